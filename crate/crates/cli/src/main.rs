fn main() {
    std::process::exit(nervlab_cli::run(std::env::args_os()));
}

/// Environment variable selecting the compute device.
pub const DEVICE_ENV: &str = "NERVLAB_DEVICE";

use crate::error::{config, Result};

/// Device descriptor recorded in manifests. Only the CPU backend exists;
/// its kernels are single-threaded and deterministic.
pub fn device() -> Result<String> {
    resolve(std::env::var(DEVICE_ENV).ok().as_deref())
}

pub fn resolve(value: Option<&str>) -> Result<String> {
    match value.map(str::trim) {
        None | Some("") | Some("cpu") | Some("auto") => Ok("cpu (deterministic single-threaded kernels)".into()),
        Some(other) => config(format!("{DEVICE_ENV}={other}: only `cpu` is available in this build")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cpu_is_the_only_device() {
        assert!(resolve(None).unwrap().starts_with("cpu"));
        assert!(resolve(Some("auto")).is_ok());
        assert!(resolve(Some("cuda:0")).unwrap_err().to_string().contains("cuda:0"));
    }
}

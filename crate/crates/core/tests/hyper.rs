mod common;

use common::{desk_hyper_run, masking_semantics, HYPER_MIN_GAIN_DB};

#[test]
fn desk_hyper_network_learns_and_masks() {
    let run = desk_hyper_run();
    let (first, last) = (run.history.first().unwrap(), run.history.last().unwrap());
    let masked = last.psnr_masked.unwrap();
    println!("psnr {:.2} -> {:.2} dB, masked {:.2} dB", first.psnr, last.psnr, masked);
    assert!(last.psnr - first.psnr >= HYPER_MIN_GAIN_DB, "gain {:.2} dB", last.psnr - first.psnr);
    assert!(last.psnr >= masked, "unmasked {} < masked {}", last.psnr, masked);
    masking_semantics(&run).unwrap();
}

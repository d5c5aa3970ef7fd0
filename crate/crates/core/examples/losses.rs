//! Compares the loss family on a bright and a dark region with the same
//! absolute error. The regularized losses weight the dark error more.
//!
//! cargo run --release --example losses

use aquasplat::losses::{combined_loss, ssim, LossConfig, SsimConfig};
use aquasplat::ImageBuffer;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (w, h) = (64, 32);
    let target = ImageBuffer::from_fn(w, h, 3, |x, _, _| if x < w / 2 { 0.05 } else { 0.8 });
    let error = 0.03;
    let dark_wrong = ImageBuffer::from_fn(w, h, 3, |x, y, c| target.get(x, y, c) + if x < w / 2 { error } else { 0.0 });
    let bright_wrong = ImageBuffer::from_fn(w, h, 3, |x, y, c| target.get(x, y, c) + if x >= w / 2 { error } else { 0.0 });

    println!("{:<18} {:>12} {:>12} {:>8}", "preset", "dark error", "bright error", "ratio");
    for cfg in LossConfig::presets() {
        let dark = combined_loss(&dark_wrong, &target, &cfg)?.value;
        let bright = combined_loss(&bright_wrong, &target, &cfg)?.value;
        println!("{:<18} {dark:>12.6} {bright:>12.6} {:>8.2}", cfg.preset_name(), dark / bright);
    }

    let a = ImageBuffer::filled(16, 16, 1, 0.5);
    let b = ImageBuffer::filled(16, 16, 1, 0.25);
    println!("ssim of constant 0.5 vs 0.25: {:.6}", ssim(&a, &b, &SsimConfig::default())?);
    Ok(())
}

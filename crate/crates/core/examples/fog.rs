//! Synthesizes easy and hard foggy benchmarks from the analytic plane
//! dataset and checks that the known parameters invert the fog.
//!
//! cargo run --release --example fog -- [out_dir]

use std::path::PathBuf;

use aquasplat::fog::{remove_fog, write_benchmark, BenchmarkView, FogPreset};
use aquasplat::metrics::psnr;
use aquasplat::synthetic::{plane_dataset, PlaneConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fog_out".into()));
    let data = plane_dataset(&PlaneConfig::default().at_resolution(200, 150))?;

    for preset in [FogPreset::Easy, FogPreset::Hard] {
        let views: Vec<BenchmarkView<'_>> = data
            .train
            .iter()
            .map(|v| BenchmarkView {
                name: &v.name,
                clear: &v.clear,
                depth: &v.depth,
            })
            .collect();
        let dir = out.join(preset.to_string());
        let manifest = write_benchmark(&dir, &views, preset)?;
        println!(
            "{preset}: beta_d={:?} beta_b={:?} b_inf={:?}, {} views, {} values clamped",
            manifest.params.beta_d, manifest.params.beta_b, manifest.params.b_inf, manifest.views.len(), manifest.clamped_values
        );

        let v = &data.train[0];
        let foggy = v.fogged(&preset.params())?;
        let restored = remove_fog(&foggy, &v.depth, &preset.params())?;
        println!(
            "  view {}: foggy vs clear {:.2} dB, inverted vs clear {:.2} dB",
            v.name,
            psnr(&foggy, &v.clear)?,
            psnr(&restored, &v.clear)?
        );
    }
    println!("wrote benchmarks to {}", out.display());
    Ok(())
}

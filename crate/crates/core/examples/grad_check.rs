//! Checks analytic gradients against central finite differences for every
//! parameter group, including each medium-network layer.
//!
//! cargo run --release --example grad_check -- [seed] [gaussians]

use aquasplat::gradients::{check_gradients_with, gradient_test_scene, GradCheckOptions};

fn main() {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let count: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    let (scene, cam) = gradient_test_scene(seed, count);
    let opts = GradCheckOptions {
        medium_samples: None,
        seed,
        ..GradCheckOptions::default()
    };
    let report = check_gradients_with(&scene, &cam, &opts);
    println!("{count} gaussians, {}x{} pixels, seed {seed}", cam.width, cam.height);
    println!("{report}");
    if !report.passed {
        std::process::exit(1);
    }
}

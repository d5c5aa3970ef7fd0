use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use aquasplat::fog::FogPreset;
use aquasplat::io::{load_checkpoint, read_png, write_pfm, write_png};
use aquasplat::synthetic::{plane_dataset, PlaneConfig};
use aquasplat::ImageBuffer;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aquasplat"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("AQUASPLAT_PORT").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small fogged plane dataset on disk.
fn dataset(dir: &Path) -> PathBuf {
    let cfg = PlaneConfig {
        points: 300,
        ..PlaneConfig::default().at_resolution(48, 36)
    };
    let root = dir.join("data");
    plane_dataset(&cfg).unwrap().write(&root, Some(&FogPreset::Easy.params())).unwrap();
    root
}

fn train(root: &Path, out: &Path, extra: &[&str]) -> Output {
    let (data, images) = (root.join("train"), root.join("images"));
    let mut args = vec!["train", "--data", p(&data), "--images", p(&images), "--out", p(out)];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn grad_check_passes_on_the_bundled_seed() {
    let out = run(&["grad-check", "--seed", "0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn diverging_training_is_a_numerical_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let root = dataset(tmp.path());
    let hyper = tmp.path().join("trainer.json");
    std::fs::write(&hyper, r#"{"lr": {"opacity": 1e300, "sh": 1e300}}"#).unwrap();
    let out = train(&root, &tmp.path().join("ckpt"), &["--iters", "5", "--trainer", p(&hyper)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("numerical failure"), "{}", stderr(&out));
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let out = run(&["render", "--bogus"]);
    assert_eq!(code(&out), 1);
    assert_eq!(stderr(&out).trim().lines().count(), 1, "{}", stderr(&out));

    let out = run(&["train", "--data", "x", "--images", "y", "--out", "z", "--loss", "l7+ssim"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));

    let out = run(&["render", "--scene", "/nonexistent/ckpt", "--camera", "0", "--out", "/tmp/x.png"]);
    assert_eq!(code(&out), 2);
    assert_eq!(stderr(&out).trim().lines().count(), 1, "{}", stderr(&out));
    assert!(stderr(&out).starts_with("aquasplat: "));
}

#[test]
fn zero_iterations_write_a_renderable_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let root = dataset(tmp.path());
    let ckpt = tmp.path().join("init");
    let out = train(&root, &ckpt, &["--iters", "0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let loaded = load_checkpoint(&ckpt).unwrap();
    assert_eq!(loaded.scene.len(), 300);
    assert_eq!(loaded.cameras.len(), 16);

    let full = tmp.path().join("full.png");
    let clear = tmp.path().join("clear.png");
    for (mode, path) in [("full", &full), ("clear", &clear)] {
        let out = run(&["render", "--scene", p(&ckpt), "--camera", "3", "--mode", mode, "--out", p(path)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    assert_ne!(std::fs::read(&full).unwrap(), std::fs::read(&clear).unwrap());
    assert_eq!(read_png(&full).unwrap().width(), 48);

    let depth = tmp.path().join("depth.png");
    let out = run(&["render", "--scene", p(&ckpt), "--camera", "0", "--mode", "depth", "--out", p(&depth)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("depth range"));

    let out = run(&["render", "--scene", p(&ckpt), "--camera", "99", "--out", p(&depth)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn training_is_seed_deterministic_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let root = dataset(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    assert_eq!(code(&train(&root, &a, &["--iters", "6", "--seed", "4", "--threads", "1"])), 0);
    assert_eq!(code(&train(&root, &b, &["--iters", "6", "--seed", "4", "--threads", "3"])), 0);
    assert_eq!(code(&train(&root, &c, &["--iters", "6", "--seed", "5", "--threads", "1"])), 0);
    for f in ["scene.ply", "medium.bin", "cameras.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(std::fs::read(a.join("scene.ply")).unwrap(), std::fs::read(c.join("scene.ply")).unwrap());
}

#[test]
fn config_file_supplies_flags_and_explicit_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let root = dataset(tmp.path());
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"iters": 5, "loss": "l1+dssim", "no_medium": true, "log_every": 1, "seed": 2}"#).unwrap();
    let ckpt = tmp.path().join("ckpt");
    let out = train(&root, &ckpt, &["--config", p(&cfg), "--iters", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("step=3 "), "{stdout}");
    assert!(!stdout.contains("step=4 "), "{stdout}");

    std::fs::write(&cfg, r#"{"iters": [1]}"#).unwrap();
    assert_eq!(code(&train(&root, &ckpt, &["--config", p(&cfg)])), 1);
}

#[test]
fn eval_reads_train_output_and_scores_restoration() {
    let tmp = tempfile::tempdir().unwrap();
    let root = dataset(tmp.path());
    let ckpt = tmp.path().join("ckpt");
    assert_eq!(code(&train(&root, &ckpt, &["--iters", "4"])), 0);
    let report = tmp.path().join("report.json");
    let out = run(&[
        "eval",
        "--scene",
        p(&ckpt),
        "--data",
        p(&root.join("test")),
        "--images",
        p(&root.join("images")),
        "--clear-gt",
        p(&root.join("clear")),
        "--out",
        p(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["per_view"].as_array().unwrap().len(), 4);
    assert!(json["mean"]["psnr"].as_f64().unwrap() > 5.0);
    assert!(json["mean"]["restoration"]["psnr"].is_number());
}

#[test]
fn simulate_fog_writes_a_benchmark() {
    let tmp = tempfile::tempdir().unwrap();
    let clear_dir = tmp.path().join("clear");
    let depth_dir = tmp.path().join("depth");
    std::fs::create_dir_all(&clear_dir).unwrap();
    std::fs::create_dir_all(&depth_dir).unwrap();
    for i in 0..2 {
        let clear = ImageBuffer::from_fn(6, 4, 3, |x, y, c| (x + y + c + i) as f64 / 16.0);
        write_png(&clear_dir.join(format!("v{i}.png")), &clear).unwrap();
        write_pfm(&depth_dir.join(format!("v{i}.pfm")), &ImageBuffer::filled(6, 4, 1, 1.0 + i as f64)).unwrap();
    }
    let out_dir = tmp.path().join("fog");
    let out = run(&["simulate-fog", "--clear", p(&clear_dir), "--depth", p(&depth_dir), "--preset", "hard", "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["views"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["preset"], "hard");
    assert!(out_dir.join("images/v1.png").exists());

    std::fs::remove_file(depth_dir.join("v1.pfm")).unwrap();
    let out = run(&["simulate-fog", "--clear", p(&clear_dir), "--depth", p(&depth_dir), "--preset", "easy", "--out", p(&out_dir)]);
    assert_eq!(code(&out), 2);
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn get(port: u16, path: &str) -> Option<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut buf = String::new();
    s.read_to_string(&mut buf).ok()?;
    Some(buf)
}

#[test]
fn serve_honours_the_port_variable() {
    let tmp = tempfile::tempdir().unwrap();
    let root = dataset(tmp.path());
    let ckpt = tmp.path().join("ckpt");
    assert_eq!(code(&train(&root, &ckpt, &["--iters", "0"])), 0);
    let port = free_port();
    let mut child = bin()
        .args(["serve", "--scene", p(&ckpt), "--port", "1"])
        .env("AQUASPLAT_PORT", port.to_string())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(30);
    let mut health = None;
    while Instant::now() < deadline {
        if let Some(r) = get(port, "/health") {
            health = Some(r);
            break;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    let scene = get(port, "/scene");
    child.kill().unwrap();
    child.wait().unwrap();
    let health = health.expect("server never came up");
    assert!(health.starts_with("HTTP/1.1 200"));
    assert!(health.ends_with("\r\n\r\nok"));
    assert!(scene.unwrap().contains("\"gaussian_count\":300"));
}

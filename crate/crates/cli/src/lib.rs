//! Subcommands of the `aquasplat` binary.
//!
//! Every flag can also come from a JSON object passed with `--config`;
//! its entries are expanded into flags placed before the command line, so
//! explicit flags override them.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use aquasplat::fog::{write_benchmark, BenchmarkView, FogPreset};
use aquasplat::gradients::{check_gradients, gradient_test_scene};
use aquasplat::io::{load_checkpoint, read_colmap, read_pfm, read_png, save_checkpoint, white_balance, write_png, Checkpoint, NamedCamera};
use aquasplat::losses::LossConfig;
use aquasplat::metrics::evaluate;
use aquasplat::trainer::{initialize_scene, scene_extent_from_cameras, InitConfig, TrainConfig, TrainView, Trainer};
use aquasplat::{render, Camera, ImageBuffer, RenderSettings};
use aquasplat_server::{inverse_depth_image, resolve_port, AppState, ServerConfig, Snapshot};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Failure {
    Usage = 1,
    Data = 2,
    Numerical = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Failure,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { kind: Failure::Usage, message: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { kind: Failure::Data, message: msg.into() }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<aquasplat::Error> for CliError {
    fn from(e: aquasplat::Error) -> Self {
        let kind = match e {
            aquasplat::Error::Numerical(_) => Failure::Numerical,
            _ => Failure::Data,
        };
        Self { kind, message: e.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "aquasplat", version, about = "Gaussian splatting through scattering media")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON file whose keys mirror the flags of the subcommand.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Seed for initialization and view order; defaults to 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a scene to posed images.
    Train(TrainArgs),
    /// Render one view of a checkpoint.
    Render(RenderArgs),
    /// Synthesize a foggy benchmark from clear images and depth maps.
    SimulateFog(FogArgs),
    /// Score a checkpoint against posed images.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    GradCheck(GradCheckArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// COLMAP model directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding the images named in the model.
    #[arg(long)]
    pub images: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Training iterations; 0 writes the initialization only.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Loss preset, `pixel+frame` (for example regl2+regdssim or l1+dssim).
    #[arg(long)]
    pub loss: Option<String>,
    /// Train plain splatting without the medium.
    #[arg(long)]
    pub no_medium: bool,
    /// Per-channel white balance clipping fraction applied to inputs.
    #[arg(long, value_name = "FRACTION")]
    pub white_balance: Option<f64>,
    /// Full trainer configuration (JSON); the flags above override it.
    #[arg(long, value_name = "FILE")]
    pub trainer: Option<PathBuf>,
    #[arg(long)]
    pub init_opacity: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Full,
    Clear,
    Medium,
    Depth,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub scene: PathBuf,
    /// Index into the checkpoint cameras, or a camera JSON file.
    #[arg(long)]
    pub camera: String,
    #[arg(long, value_enum, default_value_t = Mode::Full)]
    pub mode: Mode,
    #[arg(long, default_value_t = 1.0)]
    pub medium_scale: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Easy,
    Hard,
}

#[derive(Debug, Args)]
pub struct FogArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory of clear PNG images.
    #[arg(long)]
    pub clear: PathBuf,
    /// Directory of PFM depth maps with the same file stems.
    #[arg(long)]
    pub depth: PathBuf,
    #[arg(long, value_enum)]
    pub preset: Preset,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub scene: PathBuf,
    /// COLMAP model directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Image directory; defaults to `<data>/images`.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Clear ground truth with the same file names, for restoration scores.
    #[arg(long)]
    pub clear_gt: Option<PathBuf>,
    #[arg(long)]
    pub white_balance: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 8)]
    pub gaussians: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub scene: PathBuf,
    /// Overridden by the AQUASPLAT_PORT environment variable.
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long, default_value_t = aquasplat_server::DEFAULT_MAX_PIXELS)]
    pub max_pixels: usize,
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

/// Parses a full argument vector. A flag given twice keeps its last value,
/// which is how command-line flags override config entries.
pub fn parse_args(args: Vec<OsString>) -> Result<Cli, clap::Error> {
    let mut cmd = Cli::command().args_override_self(true);
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        cmd = cmd.mut_subcommand(name, |s| s.args_override_self(true));
    }
    let matches = cmd.try_get_matches_from(args)?;
    Cli::from_arg_matches(&matches)
}

/// Expands `--config FILE` into flags inserted right after the
/// subcommand name.
pub fn expand_config(args: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let pos = args.iter().position(|a| a == "--config");
    let inline = args.iter().position(|a| a.to_string_lossy().starts_with("--config="));
    let path = match (pos, inline) {
        (Some(i), _) => match args.get(i + 1) {
            Some(p) => PathBuf::from(p),
            None => return Err(CliError::usage("--config needs a file")),
        },
        (None, Some(i)) => PathBuf::from(&args[i].to_string_lossy()["--config=".len()..]),
        (None, None) => return Ok(args),
    };
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let json: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let obj = json
        .as_object()
        .ok_or_else(|| CliError::data(format!("{}: config must be a JSON object", path.display())))?;
    let mut flags = Vec::new();
    for (key, value) in obj {
        if key == "config" {
            return Err(CliError::usage("config files cannot nest --config"));
        }
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            serde_json::Value::Bool(true) => flags.push(OsString::from(flag)),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::String(s) => flags.extend([flag.into(), s.into()]),
            serde_json::Value::Number(n) => flags.extend([flag.into(), n.to_string().into()]),
            _ => return Err(CliError::usage(format!("config key {key:?} must be a scalar"))),
        }
    }
    let at = 2.min(args.len());
    let mut out: Vec<OsString> = args[..at].to_vec();
    out.extend(flags);
    out.extend_from_slice(&args[at..]);
    Ok(out)
}

fn configure_threads(common: &Common) -> CliResult<()> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot size the thread pool: {e}")))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Render(a) => render_cmd(a),
        Command::SimulateFog(a) => simulate_fog(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Serve(a) => serve(a),
    }
}

fn parse_preset(s: &str) -> CliResult<LossConfig> {
    s.parse().map_err(|e: aquasplat::Error| CliError::usage(e.to_string()))
}

/// Registered images of a COLMAP model paired with their images, cameras
/// rescaled to the image resolution.
fn posed_images(data: &Path, images: &Path, wb: Option<f64>) -> CliResult<(aquasplat::io::ColmapModel, Vec<TrainView>)> {
    let model = read_colmap(data)?;
    let mut views = Vec::new();
    for v in model.views()? {
        let path = images.join(&v.name);
        let mut img = read_png(&path)?;
        if let Some(clip) = wb {
            img = white_balance(&img, clip)?;
        }
        let camera = fit_camera(&v.camera, &img, &path)?;
        views.push(TrainView::new(v.name, camera, img)?);
    }
    if views.is_empty() {
        return Err(CliError::data(format!("{}: model has no registered images", data.display())));
    }
    Ok((model, views))
}

fn fit_camera(cam: &Camera, img: &ImageBuffer, path: &Path) -> CliResult<Camera> {
    if img.width() == cam.width && img.height() == cam.height {
        return Ok(cam.clone());
    }
    let scaled = cam.scaled(img.width() as f64 / cam.width as f64)?;
    if scaled.width != img.width() || scaled.height != img.height() {
        return Err(CliError::data(format!(
            "{}: image is {}x{} but its camera is {}x{}",
            path.display(),
            img.width(),
            img.height(),
            cam.width,
            cam.height
        )));
    }
    Ok(scaled)
}

fn train(a: TrainArgs) -> CliResult<()> {
    configure_threads(&a.common)?;
    let mut config = match &a.trainer {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(n) = a.iters {
        config.iterations = n;
    }
    if let Some(loss) = &a.loss {
        let preset = parse_preset(loss)?;
        config.loss.pixel = preset.pixel;
        config.loss.frame = preset.frame;
    }
    if a.no_medium {
        config.with_medium = false;
    }
    if let Some(seed) = a.common.seed {
        config.seed = seed;
    }
    config.validate().map_err(|e| CliError::usage(e.to_string()))?;

    let (model, views) = posed_images(&a.data, &a.images, a.white_balance)?;
    let (points, colors) = model.point_cloud();
    let extent = scene_extent_from_cameras(views.iter().map(|v| &v.camera));
    let mut init = InitConfig { seed: config.seed, ..InitConfig::default() };
    if let Some(o) = a.init_opacity {
        init.opacity = o;
    }
    let scene = initialize_scene(&points, &colors, extent, &init)?;
    let mut trainer = Trainer::new(scene, config)?;
    let log_every = a.log_every.max(1);
    trainer.run(&views, |t, r| {
        if r.step % log_every == 0 || r.step == t.config().iterations {
            println!("{}", t.log_line(r, views.first())?);
        }
        Ok(())
    })?;
    let cameras = views
        .iter()
        .map(|v| NamedCamera { name: v.name.clone(), camera: v.camera.clone() })
        .collect();
    let ckpt = Checkpoint { scene: trainer.into_scene(), cameras };
    save_checkpoint(&a.out, &ckpt)?;
    println!("wrote {} ({} gaussians)", a.out.display(), ckpt.scene.len());
    Ok(())
}

fn resolve_camera(arg: &str, ckpt: &Checkpoint) -> CliResult<Camera> {
    if let Ok(i) = arg.parse::<usize>() {
        return ckpt.cameras.get(i).map(|c| c.camera.clone()).ok_or_else(|| {
            CliError::usage(format!("camera index {i} out of range ({} cameras)", ckpt.cameras.len()))
        });
    }
    let path = Path::new(arg);
    let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let cam: Camera = serde_json::from_str::<NamedCamera>(&text)
        .map(|n| n.camera)
        .or_else(|_| serde_json::from_str(&text))
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    cam.validate()?;
    Ok(cam)
}

fn render_cmd(a: RenderArgs) -> CliResult<()> {
    configure_threads(&a.common)?;
    if !a.medium_scale.is_finite() || a.medium_scale < 0.0 {
        return Err(CliError::usage("--medium-scale must be finite and non-negative"));
    }
    let ckpt = load_checkpoint(&a.scene)?;
    let cam = resolve_camera(&a.camera, &ckpt)?;
    let settings = RenderSettings {
        normalize_depth: a.mode == Mode::Depth,
        ..RenderSettings::default().with_medium_scale(a.medium_scale)
    };
    let out = render(&ckpt.scene, &cam, &settings);
    match a.mode {
        Mode::Full => write_png(&a.out, &out.full)?,
        Mode::Clear => write_png(&a.out, &out.clear)?,
        Mode::Medium => write_png(&a.out, &out.medium_only)?,
        Mode::Depth => {
            let (img, range) = inverse_depth_image(&out.depth);
            let bytes = aquasplat::io::encode_png(&img, false)?;
            std::fs::write(&a.out, bytes).map_err(|e| CliError::data(format!("{}: {e}", a.out.display())))?;
            if let Some((lo, hi)) = range {
                println!("depth range {lo} .. {hi}");
            }
        }
    }
    Ok(())
}

fn files_with_extension(dir: &Path, ext: &str) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)))
        .collect();
    out.sort();
    Ok(out)
}

fn simulate_fog(a: FogArgs) -> CliResult<()> {
    configure_threads(&a.common)?;
    let preset = match a.preset {
        Preset::Easy => FogPreset::Easy,
        Preset::Hard => FogPreset::Hard,
    };
    let clear_files = files_with_extension(&a.clear, "png")?;
    if clear_files.is_empty() {
        return Err(CliError::data(format!("{}: no PNG images", a.clear.display())));
    }
    let mut loaded = Vec::new();
    for path in &clear_files {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
        let depth_path = a.depth.join(format!("{stem}.pfm"));
        let depth = read_pfm(&depth_path)?;
        loaded.push((stem, read_png(path)?, depth));
    }
    let views: Vec<BenchmarkView<'_>> = loaded
        .iter()
        .map(|(name, clear, depth)| BenchmarkView { name, clear, depth })
        .collect();
    let manifest = write_benchmark(&a.out, &views, preset)?;
    println!(
        "wrote {} views to {} ({} values clamped)",
        manifest.views.len(),
        a.out.display(),
        manifest.clamped_values
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    configure_threads(&a.common)?;
    let ckpt = load_checkpoint(&a.scene)?;
    let images = a.images.clone().unwrap_or_else(|| a.data.join("images"));
    let (_, views) = posed_images(&a.data, &images, a.white_balance)?;
    let cams: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
    let gt: Vec<ImageBuffer> = views.iter().map(|v| v.image.clone()).collect();
    let clear = match &a.clear_gt {
        Some(dir) => Some(
            views
                .iter()
                .map(|v| read_png(&dir.join(&v.name)))
                .collect::<aquasplat::Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let report = evaluate(&ckpt.scene, &cams, &gt, clear.as_deref())?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&a.out, json).map_err(|e| CliError::data(format!("{}: {e}", a.out.display())))?;
    print!("psnr={:.3} ssim={:.4}", report.mean.psnr, report.mean.ssim);
    if let Some(r) = report.mean.restoration {
        print!(" restoration_psnr={:.3} restoration_ssim={:.4}", r.psnr, r.ssim);
    }
    println!();
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> CliResult<()> {
    configure_threads(&a.common)?;
    if a.gaussians == 0 {
        return Err(CliError::usage("--gaussians must be at least 1"));
    }
    let (scene, cam) = gradient_test_scene(a.common.seed.unwrap_or(0), a.gaussians);
    let report = check_gradients(&scene, &cam, a.tolerance);
    println!("{report}");
    if report.passed {
        Ok(())
    } else {
        Err(CliError {
            kind: Failure::Numerical,
            message: format!("gradient check failed: max relative error {:.3e}", report.max_relative_error()),
        })
    }
}

fn serve(a: ServeArgs) -> CliResult<()> {
    configure_threads(&a.common)?;
    let port = resolve_port(a.port).map_err(CliError::usage)?;
    let ckpt = load_checkpoint(&a.scene)?;
    let default_camera = ckpt.cameras.first().map(|c| c.camera.clone());
    let state = AppState::with_scene(
        ServerConfig { max_pixels: a.max_pixels, render_workers: a.workers.max(1) },
        Snapshot::new(ckpt.scene, default_camera),
    );
    let addr: std::net::SocketAddr = format!("{}:{port}", a.host)
        .parse()
        .map_err(|e| CliError::usage(format!("bad listen address: {e}")))?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::data(format!("cannot start runtime: {e}")))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::data(format!("cannot bind {addr}: {e}")))?;
        println!("listening on http://{}", listener.local_addr().map_err(|e| CliError::data(e.to_string()))?);
        axum::serve(listener, aquasplat_server::router(state))
            .await
            .map_err(|e| CliError::data(format!("server failed: {e}")))
    })
}

//! The `relight` command: every pipeline stage behind one binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use relight_core::dirmath::{DirectionSet, Frame};
use relight_core::evalkit::evaluate;
use relight_core::imageio::save_rgb;
use relight_core::lightprobe::{fit_direction_set, fits_to_direction_set, load_probe_dir, FitOptions};
use relight_core::relightgen::{augment, synth_scene, AugmentOptions, MultiLightDataset, MultiViewDataset, Preset, RelighterSpec, SynthOptions};
use relight_core::scenestore::{load_scene, save_scene};
use relight_core::splatfield::render;
use relight_core::trainfield::{infer_latent, train_with_checkpoints, TrainConfig};
use relightd::request::{self, LatentChoice};
use relightd::ServerConfig;

#[derive(Debug, Parser)]
#[command(name = "relight", version, about = "Relightable radiance fields: dataset augmentation, training, evaluation and serving")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Seed for every random choice (synthesis, probe fitting, training).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit light directions to averaged gray-ball probes dir_00.png, dir_01.png, ...
    FitProbes(FitProbesArgs),
    /// Render a synthetic capture with ground-truth relighting.
    Synth(SynthArgs),
    /// Relight a capture toward every light direction.
    Augment(AugmentArgs),
    /// Train a scene from an augmented dataset.
    Train(TrainArgs),
    /// Render one image from a trained scene.
    Render(RenderArgs),
    /// Score a trained scene against held-out ground truth.
    Eval(EvalArgs),
    /// Serve trained scenes over HTTP.
    Serve(ServeArgs),
    /// Write the browser viewer's configuration file.
    ExportViewerConfig(ViewerArgs),
}

#[derive(Debug, Args)]
struct FitProbesArgs {
    #[arg(long)]
    probes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    starts: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PresetArg {
    Cornell,
    Plane,
    Spheres,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "cornell")]
    preset: PresetArg,
    /// Training views.
    #[arg(long, default_value_t = 6)]
    views: usize,
    #[arg(long, default_value_t = 2)]
    test_views: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 5000)]
    points: usize,
    #[arg(long, default_value_t = 3)]
    supersample: usize,
    /// Trace shadow rays toward the flash.
    #[arg(long)]
    shadows: bool,
    /// Direction-set file; defaults to the built-in 18 directions.
    #[arg(long)]
    lights: Option<PathBuf>,
    /// Writes `train/`, `test/` and `directions.json` here.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    /// Capture dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// `identity`, `oracle`, or the URL of a relighting service.
    #[arg(long, default_value = "oracle")]
    relighter: String,
    /// Relighter option as key=value (repeatable).
    #[arg(long = "option", value_parser = parse_key_value)]
    options: Vec<(String, String)>,
    #[arg(long)]
    lights: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    retries: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Augmented dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// JSON training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    main: Option<usize>,
    #[arg(long)]
    desk_scale: Option<f64>,
    /// View id to revisit every third main iteration (repeatable).
    #[arg(long = "overweight")]
    overweight: Vec<String>,
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LightFrameArg {
    World,
    Camera,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Camera JSON: {position, target, up, fov_deg, width, height}.
    #[arg(long)]
    camera: PathBuf,
    /// Light direction x,y,z (normalized); omit for the unlit capture look.
    #[arg(long, value_parser = parse_light, allow_hyphen_values = true)]
    light: Option<[f64; 3]>,
    #[arg(long, value_enum, default_value = "world")]
    light_frame: LightFrameArg,
    /// `mean` or a training view id.
    #[arg(long, default_value = "mean")]
    latent: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Held-out dataset with ground truth under every light.
    #[arg(long)]
    test: PathBuf,
    /// Match each prediction's LAB mean/std to the ground truth first.
    #[arg(long)]
    normalize: bool,
    /// Scene name in the report; defaults to the scene file stem.
    #[arg(long)]
    name: Option<String>,
    /// Report path (`.json`; a `.csv` is written beside it).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "RELIGHTD_SCENES")]
    scenes: PathBuf,
    #[arg(long, env = "RELIGHTD_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "RELIGHTD_MAX_CONCURRENT", default_value_t = 2)]
    max_concurrent: usize,
    /// Allowed browser origin, or `*`.
    #[arg(long, env = "RELIGHTD_CORS")]
    cors: Option<String>,
    #[arg(long, env = "RELIGHTD_BIND", default_value = "127.0.0.1")]
    bind: String,
    /// Seconds between scene directory rescans (0 disables hot reload).
    #[arg(long, env = "RELIGHTD_RELOAD_SECS", default_value_t = 2)]
    reload_secs: u64,
}

#[derive(Debug, Args)]
struct ViewerArgs {
    /// Base URL of the render service.
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    api: String,
    /// Scene file to take the initial camera and lights from.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=').map(|(k, v)| (k.to_owned(), v.to_owned())).ok_or_else(|| format!("expected key=value, got {s:?}"))
}

/// Parses `x,y,z` and normalizes it.
pub fn parse_light(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| format!("{s:?}: {e}"))?;
    let [x, y, z] = parts[..] else { return Err(format!("expected three comma-separated numbers, got {s:?}")) };
    let norm = (x * x + y * y + z * z).sqrt();
    if !norm.is_finite() || norm < 1e-9 {
        return Err(format!("{s:?} is not a usable direction"));
    }
    Ok([x / norm, y / norm, z / norm])
}

fn light_set(path: Option<&Path>) -> Result<DirectionSet> {
    let set = match path {
        Some(p) => DirectionSet::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => DirectionSet::default_set(),
    };
    if set.frame != Frame::CameraLocal {
        bail!("light directions must be in the camera frame");
    }
    Ok(set)
}

fn fit_probes(a: &FitProbesArgs, seed: u64) -> Result<()> {
    let probes = load_probe_dir(&a.probes)?;
    if probes.is_empty() {
        bail!("no dir_00.png ... found in {}", a.probes.display());
    }
    let fits = fit_direction_set(&probes, &FitOptions { starts: a.starts, seed, ..FitOptions::default() })?;
    fits_to_direction_set(&fits)?.save(&a.out)?;
    println!("fitted {} directions -> {}", fits.len(), a.out.display());
    Ok(())
}

fn synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let preset = match a.preset {
        PresetArg::Cornell => Preset::Cornell,
        PresetArg::Plane => Preset::Plane,
        PresetArg::Spheres => Preset::Spheres,
    };
    let opts = SynthOptions {
        train_views: a.views,
        test_views: a.test_views,
        width: a.size,
        height: a.size,
        supersample: a.supersample,
        shadows: a.shadows,
        points: a.points,
        seed,
        ..SynthOptions::new(preset)
    };
    let set = light_set(a.lights.as_deref())?;
    let out = synth_scene(&opts, &set.directions()?)?;
    out.train.save(&a.out.join("train"))?;
    out.test.save(&a.out.join("test"))?;
    set.save(&a.out.join("directions.json"))?;
    println!("wrote {} training and {} test views to {}", out.train.views.len(), out.test.base.views.len(), a.out.display());
    Ok(())
}

fn run_augment(a: &AugmentArgs) -> Result<()> {
    let ds = MultiViewDataset::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let mut spec = RelighterSpec::parse(&a.relighter)?;
    for (k, v) in &a.options {
        spec = spec.with_option(k, v);
    }
    let dirs = light_set(a.lights.as_deref())?.directions()?;
    let opts = AugmentOptions { workers: a.workers, retries: a.retries, out_dir: Some(a.out.clone()) };
    let out = augment(&ds, &spec, &dirs, &opts)?;
    out.save(&a.out)?;
    println!("relit {} views x {} lights -> {}", out.base.views.len(), out.light_count(), a.out.display());
    Ok(())
}

fn run_train(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(n) = a.warmup {
        cfg.warmup_iters = n;
    }
    if let Some(n) = a.main {
        cfg.main_iters = n;
    }
    if let Some(s) = a.desk_scale {
        cfg.desk_scale = s;
    }
    if !a.overweight.is_empty() {
        cfg.overweight_view_ids = a.overweight.clone();
    }
    if let Some(n) = a.checkpoint_every {
        cfg.checkpoint_every = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ds = MultiLightDataset::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let result = train_with_checkpoints(&ds, &cfg, a.checkpoints.as_deref())?;
    save_scene(&result.scene, &a.out)?;
    let tail = &result.losses[result.losses.len().saturating_sub(100)..];
    let mean = if tail.is_empty() { 0.0 } else { tail.iter().sum::<f64>() / tail.len() as f64 };
    println!("trained {} splats ({} culled), final loss {mean:.5} -> {}", result.scene.splats.len(), result.culled, a.out.display());
    Ok(())
}

fn run_render(a: &RenderArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let cam_text = std::fs::read_to_string(&a.camera).with_context(|| format!("reading {}", a.camera.display()))?;
    let mut cam: serde_json::Value = serde_json::from_str(&cam_text).with_context(|| format!("parsing {}", a.camera.display()))?;
    if let Some(inner) = cam.get("camera") {
        cam = inner.clone();
    }
    let frame = match a.light_frame {
        LightFrameArg::World => "world",
        LightFrameArg::Camera => "camera",
    };
    let body = json!({ "camera": cam, "light_dir": a.light, "light_frame": frame, "latent": a.latent });
    let req = request::parse(body.to_string().as_bytes()).map_err(|e| anyhow::anyhow!("{}: {}", e.field, e.message))?;
    let mean;
    let latent = match &req.latent {
        LatentChoice::Mean => {
            mean = infer_latent(&scene)?;
            mean.as_slice()
        }
        LatentChoice::View(v) => scene.latent(v)?,
    };
    let out = render(&scene, &req.camera, req.light_world.as_ref(), latent)?;
    save_rgb(&out.color, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let test = MultiLightDataset::load(&a.test).with_context(|| format!("loading {}", a.test.display()))?;
    let name = a.name.clone().unwrap_or_else(|| a.scene.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let report = evaluate(&scene, &test, a.normalize, &name)?;
    report.save(&a.out)?;
    println!("{} entries: PSNR {:.2} dB, SSIM {:.4} -> {}", report.entries.len(), report.aggregates.psnr, report.aggregates.ssim, a.out.display());
    Ok(())
}

fn run_serve(a: &ServeArgs) -> Result<()> {
    relightd::run(ServerConfig {
        scenes: a.scenes.clone(),
        bind: a.bind.clone(),
        port: a.port,
        max_concurrent: a.max_concurrent,
        cors: a.cors.clone(),
        reload_secs: a.reload_secs,
    })?;
    Ok(())
}

fn export_viewer(a: &ViewerArgs) -> Result<()> {
    let mut cfg = json!({
        "api": a.api.trim_end_matches('/'),
        "scene": null,
        "resolutions": [[128, 128], [256, 256], [512, 512]],
        "light_frame": "camera",
    });
    if let Some(path) = &a.scene {
        let scene = load_scene(path)?;
        let md = &scene.metadata;
        cfg["scene"] = json!(path.file_stem().map(|s| s.to_string_lossy().into_owned()));
        cfg["default_camera"] = json!(md.default_camera.map(|(p, t)| json!({ "position": p, "target": t, "up": [0.0, 1.0, 0.0] })));
        cfg["lights"] = json!(md.light_dirs);
    }
    std::fs::write(&a.out, serde_json::to_string_pretty(&cfg)?).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::FitProbes(a) => fit_probes(a, seed),
        Command::Synth(a) => synth(a, seed),
        Command::Augment(a) => run_augment(a),
        Command::Train(a) => run_train(a, cli.seed),
        Command::Render(a) => run_render(a),
        Command::Eval(a) => run_eval(a),
        Command::Serve(a) => run_serve(a),
        Command::ExportViewerConfig(a) => export_viewer(a),
    }
}

/// Joins an error chain, skipping causes already spelled out by their parent.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            2
        }
    }
}

//! Command-line front end: `train`, `render`, `eval` and `serve`.
//!
//! Every flag can also come from a `FEATSPLAT_*` environment variable; flags win.
//! [`run`] returns the process exit code: 0 on success, 1 on runtime errors, 2 on usage
//! errors.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::RgbImage;

use crate::dataset::{load_dataset, Dataset, Manifest, Split};
use crate::decoder::{Decoder, EmbeddingConfig, EmbeddingOverrides};
use crate::error::{Error, Result};
use crate::format::{load_scene, save_scene};
use crate::img::Image;
use crate::loss::{LossConfig, IGNORE_LABEL};
use crate::metrics::{psnr, ssim_metric, weighted_miou};
use crate::scene::SplatScene;
use crate::service::{class_color, serve, SceneService};
use crate::trainer::{render_decoded, train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "featsplat", version, about = "Train, render and serve feature-splatting scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize a scene on a dataset directory and write a scene file.
    Train(TrainArgs),
    /// Render cameras of a manifest to PNG files.
    Render(RenderArgs),
    /// Render the test views of a dataset and report image metrics and frame rate.
    Eval(EvalArgs),
    /// Serve a scene over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory holding cameras.json and images/.
    #[arg(long, env = "FEATSPLAT_DATA")]
    pub data: PathBuf,
    /// Output scene file.
    #[arg(long, env = "FEATSPLAT_OUT", default_value = "scene.fspl")]
    pub out: PathBuf,
    #[arg(long, env = "FEATSPLAT_FEATURE_DIM", default_value_t = 16, value_parser = parse_feature_dim)]
    pub feature_dim: usize,
    /// Semantic classes; 0 disables the semantic head.
    #[arg(long, env = "FEATSPLAT_CLASSES", default_value_t = 0)]
    pub classes: usize,
    #[arg(long, env = "FEATSPLAT_ITERS", default_value_t = 30_000)]
    pub iters: usize,
    #[arg(long, env = "FEATSPLAT_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "FEATSPLAT_LAMBDA_SSIM", default_value_t = 0.2)]
    pub lambda_ssim: f64,
    #[arg(long, env = "FEATSPLAT_LAMBDA_SEM", default_value_t = 0.001)]
    pub lambda_sem: f64,
    /// Comma-separated embeddings appended to the feature: pixel, campos, camrot or none.
    #[arg(long, env = "FEATSPLAT_EMBED", default_value = "pixel,campos", value_parser = parse_embed)]
    pub embed: EmbeddingConfig,
    #[arg(long, env = "FEATSPLAT_BACKGROUND", default_value = "0,0,0", value_parser = parse_vec3)]
    pub background: [f64; 3],
    /// Turn off densification and pruning.
    #[arg(long, env = "FEATSPLAT_NO_DENSIFY")]
    pub no_densify: bool,
    #[arg(long, env = "FEATSPLAT_CHECKPOINT_DIR")]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long, env = "FEATSPLAT_CHECKPOINT_EVERY", default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Print a log line every this many iterations.
    #[arg(long, env = "FEATSPLAT_LOG_EVERY", default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitFilter {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayerArg {
    Rgb,
    Semantic,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long, env = "FEATSPLAT_SCENE")]
    pub scene: PathBuf,
    /// cameras.json manifest; a dataset directory is accepted too.
    #[arg(long, env = "FEATSPLAT_CAMERAS")]
    pub cameras: PathBuf,
    #[arg(long, env = "FEATSPLAT_OUT_DIR")]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, env = "FEATSPLAT_SPLIT", default_value = "all")]
    pub split: SplitFilter,
    #[arg(long, value_enum, env = "FEATSPLAT_LAYER", default_value = "rgb")]
    pub layer: LayerArg,
    #[arg(long, env = "FEATSPLAT_BACKGROUND", default_value = "0,0,0", value_parser = parse_vec3)]
    pub background: [f64; 3],
    /// Replace the camera-center input of the decoder, e.g. `0.5,0,-1`.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_vec3)]
    pub override_campos: Option<[f64; 3]>,
    /// Replace the pixel-embedding input with a constant `u,v`.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_vec2)]
    pub override_pixel: Option<[f64; 2]>,
    /// Replace the camera-rotation input (XYZ Euler angles, radians).
    #[arg(long, allow_hyphen_values = true, value_parser = parse_vec3)]
    pub override_camrot: Option<[f64; 3]>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = "FEATSPLAT_SCENE")]
    pub scene: PathBuf,
    #[arg(long, env = "FEATSPLAT_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "FEATSPLAT_BACKGROUND", default_value = "0,0,0", value_parser = parse_vec3)]
    pub background: [f64; 3],
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "FEATSPLAT_SCENE")]
    pub scene: PathBuf,
    #[arg(long, env = "FEATSPLAT_ADDR", default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, env = "FEATSPLAT_MAX_PIXELS", default_value_t = crate::service::DEFAULT_MAX_PIXELS)]
    pub max_pixels: u64,
    /// Directory served at `/`, e.g. the viewer bundle.
    #[arg(long, env = "FEATSPLAT_STATIC_DIR")]
    pub static_dir: Option<PathBuf>,
}

fn parse_floats<const N: usize>(s: &str) -> std::result::Result<[f64; N], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(format!("expected {N} comma-separated numbers, got `{s}`"));
    }
    let mut out = [0.0f64; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("`{p}` is not a number"))?;
        if !o.is_finite() {
            return Err(format!("`{p}` is not finite"));
        }
    }
    Ok(out)
}

fn parse_vec3(s: &str) -> std::result::Result<[f64; 3], String> {
    parse_floats::<3>(s)
}

fn parse_vec2(s: &str) -> std::result::Result<[f64; 2], String> {
    parse_floats::<2>(s)
}

fn parse_embed(s: &str) -> std::result::Result<EmbeddingConfig, String> {
    EmbeddingConfig::parse_list(s).map_err(|e| e.to_string())
}

fn parse_feature_dim(s: &str) -> std::result::Result<usize, String> {
    match s {
        "16" => Ok(16),
        "32" => Ok(32),
        _ => Err(format!("feature dimension must be 16 or 32, got `{s}`")),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Render(a) => cmd_render(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Serve(a) => cmd_serve(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// Maps CLI flags onto a training configuration.
pub fn train_config(a: &TrainArgs) -> TrainConfig {
    let mut cfg = TrainConfig {
        iterations: a.iters,
        feature_dim: a.feature_dim,
        class_count: a.classes,
        embedding: a.embed,
        loss: LossConfig {
            lambda_ssim: a.lambda_ssim,
            lambda_sem: a.lambda_sem,
        },
        background: a.background,
        seed: a.seed,
        probe_interval: a.log_every.max(1),
        checkpoint_dir: a.checkpoint_dir.clone(),
        checkpoint_interval: a.checkpoint_every,
        ..TrainConfig::default()
    };
    if a.no_densify {
        // Opacity resets only happen inside the densification window.
        cfg.densify_until = 0;
    }
    cfg
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    let cfg = train_config(a);
    let mut write_err = None;
    let outcome = train(&dataset, &cfg, |e| {
        if a.log_every > 0 && (e.iteration % a.log_every == 0 || e.iteration == cfg.iterations) && write_err.is_none() {
            write_err = writeln!(out, "{e}").err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(e));
    }
    save_scene(&outcome.scene, &outcome.decoder, &a.out)?;
    writeln!(
        out,
        "wrote {} ({} Gaussians, D={}, C={})",
        a.out.display(),
        outcome.scene.len(),
        outcome.scene.feature_dim,
        outcome.decoder.class_count
    )
    .map_err(io_err)
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let file = if path.is_dir() { path.join("cameras.json") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn cmd_render(a: &RenderArgs, out: &mut dyn Write) -> Result<()> {
    let (scene, decoder) = load_scene(&a.scene)?;
    let manifest = read_manifest(&a.cameras)?;
    let overrides = EmbeddingOverrides {
        campos: a.override_campos,
        pixel: a.override_pixel,
        camrot: a.override_camrot,
    };
    overrides.check(&decoder.config)?;
    if a.layer == LayerArg::Semantic && decoder.class_count == 0 {
        return Err(Error::InvalidInput("scene has no semantic head".into()));
    }
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut rendered = 0;
    for (i, view) in manifest.views.iter().enumerate() {
        let keep = match a.split {
            SplitFilter::All => true,
            SplitFilter::Train => view.split == Split::Train,
            SplitFilter::Test => view.split == Split::Test,
        };
        if !keep {
            continue;
        }
        let cam = view.camera.to_camera()?;
        let decoded = render_decoded(&scene, &decoder, &cam, &a.background, &overrides)?;
        let stem = Path::new(&view.file)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{i:04}"));
        let path = a.out_dir.join(format!("{stem}.png"));
        match a.layer {
            LayerArg::Rgb => Image::new(cam.width, cam.height, 3, decoded.rgb)?.write_png(&path)?,
            LayerArg::Semantic => {
                let rgb: Vec<u8> = decoded.labels().into_iter().flat_map(class_color).collect();
                RgbImage::from_raw(cam.width, cam.height, rgb)
                    .ok_or_else(|| Error::Contract("label buffer size".into()))?
                    .save(&path)?;
            }
        }
        writeln!(out, "{}", path.display()).map_err(io_err)?;
        rendered += 1;
    }
    if rendered == 0 {
        return Err(Error::InvalidInput("no cameras matched the requested split".into()));
    }
    Ok(())
}

/// Metrics for one evaluated view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub miou: Option<f64>,
    pub seconds: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Renders every test view of `dataset` and scores it. The first view is rendered
/// once untimed as a warm-up.
pub fn evaluate_dataset(
    scene: &SplatScene,
    decoder: &Decoder,
    dataset: &Dataset,
    background: &[f64; 3],
) -> Result<Vec<ViewMetrics>> {
    let views: Vec<_> = dataset.test_views().collect();
    if views.is_empty() {
        return Err(Error::InvalidInput("dataset has no test views".into()));
    }
    let none = EmbeddingOverrides::default();
    render_decoded(scene, decoder, &views[0].camera, background, &none)?;

    let mut rows = Vec::with_capacity(views.len());
    for view in &views {
        let start = Instant::now();
        let decoded = render_decoded(scene, decoder, &view.camera, background, &none)?;
        let seconds = start.elapsed().as_secs_f64();
        let labels = decoded.labels();
        let img = Image::new(view.camera.width, view.camera.height, 3, decoded.rgb)?;
        let miou = match (&view.labels, decoder.class_count) {
            (Some(gt), c) if c > 0 && gt.iter().any(|&l| l != IGNORE_LABEL) => Some(weighted_miou(&labels, gt, c)?),
            _ => None,
        };
        rows.push(ViewMetrics {
            name: view.name.clone(),
            psnr: psnr(&img, &view.image)?,
            ssim: ssim_metric(&img, &view.image)?,
            miou,
            seconds,
        });
    }
    Ok(rows)
}

/// Means of the per-view metrics and the median frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub psnr: f64,
    pub ssim: f64,
    pub miou: Option<f64>,
    pub fps: f64,
}

pub fn summarize(rows: &[ViewMetrics]) -> EvalSummary {
    let n = rows.len() as f64;
    let mious: Vec<f64> = rows.iter().filter_map(|r| r.miou).collect();
    let mut times: Vec<f64> = rows.iter().map(|r| r.seconds).collect();
    EvalSummary {
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        miou: (!mious.is_empty()).then(|| mious.iter().sum::<f64>() / mious.len() as f64),
        fps: 1.0 / median(&mut times).max(1e-9),
    }
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (scene, decoder) = load_scene(&a.scene)?;
    let dataset = load_dataset(&a.data)?;
    let rows = evaluate_dataset(&scene, &decoder, &dataset, &a.background)?;
    let miou_col = |m: Option<f64>| m.map(|m| format!("\tmiou {m:.4}")).unwrap_or_default();
    for r in &rows {
        writeln!(
            out,
            "{}\tpsnr {:.4}\tssim {:.4}{}\t{:.2} ms",
            r.name,
            r.psnr,
            r.ssim,
            miou_col(r.miou),
            r.seconds * 1e3
        )
        .map_err(io_err)?;
    }
    let s = summarize(&rows);
    writeln!(
        out,
        "mean\tpsnr {:.4}\tssim {:.4}{}\tfps {:.1}",
        s.psnr,
        s.ssim,
        miou_col(s.miou),
        s.fps
    )
    .map_err(io_err)
}

pub fn cmd_serve(a: &ServeArgs) -> Result<()> {
    let (scene, decoder) = load_scene(&a.scene)?;
    let svc = SceneService {
        max_pixels: a.max_pixels,
        static_dir: a.static_dir.clone(),
        ..SceneService::new(scene, decoder)
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io("<runtime>", e))?;
    runtime
        .block_on(serve(Arc::new(svc), a.addr))
        .map_err(|e| Error::io(a.addr.to_string(), e))
}

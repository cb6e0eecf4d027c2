//! `nsf` command line: fit, render, synth and eval.

use std::ffi::OsString;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{load_bundle, save_bundle, synth_burst, DataError, Image, SynthSpec};
use crate::diffcore::Tensor;
use crate::layers::{render_layer, render_view, LayerError, LayerKind, SceneConfig, SceneModel};
use crate::metrics::{MetricError, MetricReport};
use crate::training::{fit_with_observer, loss_csv, FitConfig, FitError, Preset};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

const CHECKPOINT_MAGIC: &[u8; 8] = b"NSFCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Parser)]
#[command(name = "nsf", about = "Two-layer neural spline field fitting for image bursts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a scene model to a burst bundle.
    Fit(FitArgs),
    /// Render one layer of a checkpoint.
    Render(RenderArgs),
    /// Generate a synthetic burst bundle from a JSON spec.
    Synth(SynthArgs),
    /// Compare two images and print metrics as one JSON line.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    /// occlusion, reflection, segmentation, shadow, dehaze or fusion.
    #[arg(long, default_value = "occlusion")]
    preset: String,
    #[arg(long)]
    out: PathBuf,
    /// Full fit configuration as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    rays: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Initial learning rate; the final rate keeps the preset ratio.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "eta-alpha", allow_hyphen_values = true)]
    eta_alpha: Option<f64>,
    #[arg(long = "mlp-width")]
    mlp_width: Option<usize>,
    #[arg(long = "mlp-layers")]
    mlp_layers: Option<usize>,
    #[arg(long = "no-coarse-to-fine")]
    no_coarse_to_fine: bool,
    #[arg(long = "gradient-loss")]
    gradient_loss: bool,
    /// Serial, bitwise-reproducible reductions.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    quiet: bool,
    /// Display gamma for colour PNGs; alpha is written linearly.
    #[arg(long, default_value_t = 2.2)]
    gamma: f64,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    model: PathBuf,
    /// transmission, obstruction, alpha or composite.
    #[arg(long, default_value = "composite")]
    layer: String,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    time: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Display gamma for colour PNGs; alpha is written linearly.
    #[arg(long, default_value_t = 2.2)]
    gamma: f64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long = "mask-pred", requires = "mask_ref")]
    mask_pred: Option<PathBuf>,
    #[arg(long = "mask-ref", requires = "mask_pred")]
    mask_ref: Option<PathBuf>,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_threads();
    let mut stdout = std::io::stdout().lock();
    match execute(cli.command, &mut stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Caps the global worker pool at `NSF_THREADS` when set.
fn init_threads() {
    if let Some(n) = std::env::var("NSF_THREADS").ok().and_then(|s| s.parse::<usize>().ok()).filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Fit(a) => cmd_fit(a, out),
        Command::Render(a) => cmd_render(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a, out),
    }
}

fn fit_config(a: &FitArgs) -> Result<FitConfig, CliError> {
    let preset: Preset = a.preset.parse().map_err(|e: FitError| CliError::Usage(e.to_string()))?;
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => FitConfig::preset(preset),
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(r) = a.rays {
        cfg.rays_per_step = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr_final = lr * cfg.lr_final / cfg.lr_initial;
        cfg.lr_initial = lr;
    }
    if let Some(e) = a.eta_alpha {
        cfg.eta_alpha = e;
    }
    if let Some(w) = a.mlp_width {
        cfg.mlp.width = w;
    }
    if let Some(l) = a.mlp_layers {
        cfg.mlp.layers = l;
    }
    cfg.coarse_to_fine &= !a.no_coarse_to_fine;
    cfg.gradient_loss.enabled |= a.gradient_loss;
    cfg.deterministic |= a.deterministic;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_fit(a: FitArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = fit_config(&a)?;
    check_gamma(a.gamma)?;
    let burst = load_bundle(&a.input)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let cfg_path = a.out.join("config.json");
    let echoed = serde_json::to_string_pretty(&cfg).expect("config serializes");
    fs::write(&cfg_path, &echoed).map_err(io_err(&cfg_path))?;

    let quiet = a.quiet;
    let log_every = cfg.log_every;
    let result = fit_with_observer(&burst, &cfg, |s| {
        if !quiet && (s.step % log_every == 0 || s.step + 1 == cfg.steps) {
            eprintln!("step {:>6}  loss {:.6e}  lr {:.3e}", s.step, s.loss, s.learning_rate);
        }
    })?;
    let csv_path = a.out.join("loss.csv");
    fs::write(&csv_path, loss_csv(&result.trace)).map_err(io_err(&csv_path))?;
    let (w, h) = (burst.width(), burst.height());
    let meta = CheckpointMeta { scene: result.model.config.clone(), width: w, height: h, preset: cfg.preset };
    save_checkpoint(&a.out.join("model.nsf"), &result.model, &meta)?;

    let view = render_view(&result.model, w, h, 0.0, None)?;
    let png = |img: &Image, name: &str, gamma: f64| img.save_png(&a.out.join(name), gamma);
    png(&view.transmission, "transmission.png", a.gamma)?;
    png(&view.composite, "composite.png", a.gamma)?;
    if let (Some(ob), Some(alpha)) = (&view.obstruction, &view.alpha) {
        png(ob, "obstruction.png", a.gamma)?;
        png(alpha, "alpha.png", 1.0)?;
    }
    let last = result.trace.last().expect("trace holds the final step");
    writeln!(out, "{}", serde_json::json!({ "steps": cfg.steps, "final_loss": last.total, "out": a.out }))
        .map_err(io_err(Path::new("<stdout>")))?;
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<(), CliError> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("gamma {gamma} must be positive")))
    }
}

fn cmd_render(a: RenderArgs) -> Result<(), CliError> {
    let which: LayerKind = a.layer.parse().map_err(|e: LayerError| CliError::Usage(e.to_string()))?;
    check_gamma(a.gamma)?;
    let (model, meta) = load_checkpoint(&a.model)?;
    let (w, h) = (a.width.unwrap_or(meta.width), a.height.unwrap_or(meta.height));
    let img = render_layer(&model, which, w, h, a.time, None)?;
    let gamma = if which == LayerKind::Alpha { 1.0 } else { a.gamma };
    img.save_png(&a.out, gamma)?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.spec).map_err(io_err(&a.spec))?;
    let spec: SynthSpec =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", a.spec.display())))?;
    let (burst, _) = synth_burst(&spec)?;
    save_bundle(&burst, &a.out)?;
    Ok(())
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let pred = Image::load_png(&a.pred)?;
    let reference = Image::load_png(&a.reference)?;
    let masks = match (&a.mask_pred, &a.mask_ref) {
        (Some(p), Some(r)) => Some((Image::load_png(p)?, Image::load_png(r)?)),
        _ => None,
    };
    let report = MetricReport::compute(&pred, &reference, masks.as_ref().map(|(p, r)| (p, r)))?;
    writeln!(out, "{}", report.to_json_line()).map_err(io_err(Path::new("<stdout>")))?;
    Ok(())
}

/// Header stored alongside the tensors of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub scene: SceneConfig,
    pub width: usize,
    pub height: usize,
    pub preset: Preset,
}

/// Layout: magic, `u32` version, `u64` header length, JSON header,
/// `u32` tensor count, then per tensor `u32` name length, name, `u32` rank,
/// `u64` dims and little-endian `f32` values.
pub fn save_checkpoint(path: &Path, model: &SceneModel<f32>, meta: &CheckpointMeta) -> Result<(), CliError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(meta).expect("header serializes");
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    let named = model.named_tensors();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(io_err(path))
}

struct Reader<'p> {
    path: &'p Path,
    bytes: Vec<u8>,
    pos: usize,
}

impl Reader<'_> {
    fn err(&self, msg: impl Into<String>) -> CliError {
        CliError::Checkpoint { path: self.path.to_path_buf(), msg: msg.into() }
    }

    fn take(&mut self, n: usize) -> Result<&[u8], CliError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads a checkpoint. Tensors are matched by name; unknown or missing
/// names and shape mismatches are errors.
pub fn load_checkpoint(path: &Path) -> Result<(SceneModel<f32>, CheckpointMeta), CliError> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(r.err("not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?).map_err(|e| r.err(format!("header: {e}")))?;
    let mut model = SceneModel::<f32>::new(meta.scene.clone(), 0)?;
    let count = r.u32()? as usize;
    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| r.err("tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let len: usize = dims.iter().product();
        let data = r.take(len * 4)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        loaded.push((name, Tensor::new(dims, data).map_err(|e| r.err(e.to_string()))?));
    }
    if r.pos != r.bytes.len() {
        return Err(r.err("trailing bytes"));
    }
    let mut targets = model.named_tensors_mut();
    if targets.len() != loaded.len() {
        return Err(r.err(format!("expected {} tensors, found {}", targets.len(), loaded.len())));
    }
    for (name, t) in loaded {
        let slot = targets.iter_mut().find(|(n, _)| *n == name).ok_or_else(|| r.err(format!("unknown tensor '{name}'")))?;
        if slot.1.shape() != t.shape() {
            return Err(r.err(format!("tensor '{name}' has shape {:?}, expected {:?}", t.shape(), slot.1.shape())));
        }
        slot.1.data_mut().copy_from_slice(t.data());
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use crate::encoding::EncodingSize;
    use crate::layers::{LayerConfig, MlpShape, ObstructionConfig};

    fn args(s: &str) -> Vec<String> {
        std::iter::once("nsf").chain(s.split_whitespace()).map(String::from).collect()
    }

    fn parse_fit(s: &str) -> Result<FitConfig, CliError> {
        let cli = Cli::try_parse_from(args(s)).unwrap();
        match cli.command {
            Command::Fit(a) => fit_config(&a),
            _ => unreachable!(),
        }
    }

    #[test]
    fn preset_defaults_and_overrides() {
        let c = parse_fit("fit --input x --out y --preset occlusion").unwrap();
        assert_eq!(c, FitConfig::preset(Preset::Occlusion));
        assert_eq!((c.steps, c.rays_per_step), (6000, 1 << 18));
        let c = parse_fit("fit --input x --out y --preset dehaze --steps 7 --rays 9 --seed 3 --lr 0.01 --eta-alpha -0.5 --deterministic")
            .unwrap();
        assert_eq!((c.steps, c.rays_per_step, c.seed, c.eta_alpha), (7, 9, 3, -0.5));
        assert!((c.lr_final - 1e-3).abs() < 1e-15 && c.deterministic);
    }

    #[test]
    fn unknown_preset_is_usage_error() {
        let e = parse_fit("fit --input x --out y --preset bokeh").unwrap_err();
        assert_eq!(e.exit_code(), EXIT_USAGE);
        for p in Preset::ALL {
            assert!(e.to_string().contains(p.name()));
        }
        assert_eq!(run(args("frobnicate")), EXIT_USAGE);
        assert_eq!(run(args("fit --out y")), EXIT_USAGE);
        assert_eq!(parse_fit("fit --input x --out y --steps 0").unwrap_err().exit_code(), EXIT_USAGE);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut scene = SceneConfig::for_frames(
            5,
            Intrinsics::identity(),
            LayerConfig { image: EncodingSize::Tiny, flow: EncodingSize::Tiny, flow_points: 4, depth: 1.0 },
        );
        scene.obstruction = Some(ObstructionConfig {
            layer: LayerConfig { image: EncodingSize::Tiny, flow: EncodingSize::Tiny, flow_points: 4, depth: 0.5 },
            alpha: EncodingSize::Tiny,
        });
        scene.mlp = MlpShape { layers: 2, width: 4 };
        let mut model = SceneModel::<f32>::new(scene.clone(), 9).unwrap();
        for (i, x) in model.pose.translation.data_mut().iter_mut().enumerate() {
            *x = i as f32 * 0.01;
        }
        let meta = CheckpointMeta { scene, width: 8, height: 6, preset: Preset::Occlusion };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nsf");
        save_checkpoint(&path, &model, &meta).unwrap();
        let (back, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta2, meta);
        for ((n1, a), (n2, b)) in model.named_tensors().into_iter().zip(back.named_tensors()) {
            assert_eq!(n1, n2);
            assert_eq!(a.data(), b.data(), "{n1}");
        }
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CliError::Checkpoint { .. })));
        fs::write(&path, b"garbage!garbage!").unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("not a checkpoint"));
    }
}

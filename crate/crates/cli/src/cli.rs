//! Argument parsing and the subcommands.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, CommandFactory, Parser, Subcommand};

use satskip_core::data::{generate_synthetic, ShapeKind, SyntheticSpec};
use satskip_core::gradcheck::run_suite;
use satskip_core::metrics::{binarize, evaluate, sparsity_report};
use satskip_core::networks::{ArchSpec, Family};
use satskip_core::nn::sigmoid;
use satskip_core::train::{LossKind, OptimizerKind, TrainConfig, Trainer};
use satskip_core::{build_model, count_params, GateVariant, Tape, Tensor};

use crate::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
use crate::dataset::{as_sample, load_dataset, save_dataset, split_validation};
use crate::error::{Error, Result};
use crate::pgm::export_gray_image;
use crate::report::{eval_csv, history_csv, pm, summarize};
use crate::tensorfile::{load_tensor, write_atomic};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "satskip", version, about = "Gated skip-connection segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Print parameter counts.
    Params(ParamsArgs),
    /// Print per-gate channel sparsity of a checkpoint.
    Sparsity(SparsityArgs),
    /// Export gate maps and predictions for one image as PGM files.
    Attention(AttentionArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

fn family_parser() -> impl TypedValueParser<Value = Family> {
    PossibleValuesParser::new(["unet", "vnet", "tiramisu"]).map(|s| s.parse::<Family>().expect("listed value"))
}

fn variant_parser() -> impl TypedValueParser<Value = GateVariant> {
    PossibleValuesParser::new(["org", "st", "at", "sat"]).map(|s| s.parse::<GateVariant>().expect("listed value"))
}

fn rank_parser() -> impl TypedValueParser<Value = usize> {
    PossibleValuesParser::new(["2", "3"]).map(|s| s.parse::<usize>().expect("listed value"))
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2, value_parser = rank_parser())]
    rank: usize,
    #[arg(long, default_value_t = 32)]
    extent: usize,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Foreground intensity above the background.
    #[arg(long, default_value_t = 1.0)]
    contrast: f64,
    #[arg(long, value_parser = PossibleValuesParser::new(["blobs", "rings"]), default_value = "blobs")]
    shapes: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ArchArgs {
    #[arg(long, value_parser = family_parser())]
    arch: Family,
    #[arg(long, value_parser = variant_parser())]
    variant: GateVariant,
    /// Resolution levels including the bottom.
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// Channels at the top level [default: 8, or 4 for tiramisu].
    #[arg(long)]
    base_channels: Option<usize>,
    /// Channel multiplier per level.
    #[arg(long, default_value_t = 2)]
    channel_growth: usize,
    /// Conv layers per dense block (tiramisu only).
    #[arg(long, default_value_t = 2)]
    dense_layers: usize,
}

impl ArchArgs {
    fn spec(&self, rank: usize) -> Result<ArchSpec> {
        let mut s = ArchSpec::reference(self.arch).with_variant(self.variant).with_rank(rank);
        s.depth = self.depth;
        if let Some(b) = self.base_channels {
            s.base_channels = b;
        }
        s.channel_growth = self.channel_growth;
        s.dense_block_layers = self.dense_layers;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long)]
    data: PathBuf,
    /// Total epochs; a resumed run trains only the remainder.
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, value_parser = PossibleValuesParser::new(["dice", "bce"]).map(|s| s.parse::<LossKind>().expect("listed value")), default_value = "dice")]
    loss: LossKind,
    #[arg(long, value_parser = PossibleValuesParser::new(["adadelta", "sgd"]).map(|s| s.parse::<OptimizerKind>().expect("listed value")), default_value = "adadelta")]
    opt: OptimizerKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Share of samples, taken from the end, held out for per-epoch scores.
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, default_value_t = 2, value_parser = rank_parser())]
    rank: usize,
    /// Tabulate all four gate variants.
    #[arg(long)]
    compare: bool,
}

#[derive(Debug, Args)]
struct SparsityArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Debug, Args)]
struct AttentionArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Image tensor file.
    #[arg(long)]
    input: PathBuf,
    /// Ground-truth mask [default: the msk_ sibling of an img_ input, if present].
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run only this check, or every check under this dotted prefix.
    #[arg(long)]
    op: Option<String>,
}

/// The full argument grammar, for help rendering and introspection.
pub fn command() -> clap::Command {
    Cli::command()
}

/// A failed command: usage problems exit 1, everything else 2.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<satskip_core::Error> for Failure {
    fn from(e: satskip_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = std::result::Result<i32, Failure>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let mut text = String::new();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a, &mut text),
        Command::Train(a) => train(a, &mut text),
        Command::Eval(a) => eval(a, &mut text),
        Command::Params(a) => params(a, &mut text),
        Command::Sparsity(a) => sparsity(a, &mut text),
        Command::Attention(a) => attention(a, &mut text),
        Command::Gradcheck(a) => gradcheck(a, &mut text),
    };
    let _ = out.write_all(text.as_bytes());
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_FAILURE
        }
    }
}

fn gen_data(a: GenDataArgs, out: &mut String) -> CmdResult {
    let spec = SyntheticSpec {
        spatial_rank: a.rank,
        extent: a.extent,
        n_samples: a.samples,
        shapes: a.shapes.parse::<ShapeKind>()?,
        noise_sigma: a.noise,
        contrast: a.contrast,
        seed: a.seed,
    };
    if a.samples == 0 {
        return Err(Failure::Usage("--samples must be at least 1".into()));
    }
    let data = generate_synthetic(&spec)?;
    save_dataset(&a.out, &data, Some(&spec))?;
    writeln!(out, "wrote {} samples to {}", data.len(), a.out.display()).unwrap();
    Ok(EXIT_OK)
}

fn sample_rank(shape: &[usize]) -> usize {
    shape.len() - 2
}

fn train(a: TrainArgs, out: &mut String) -> CmdResult {
    let data = load_dataset(&a.data)?;
    let spec = a.arch.spec(sample_rank(data[0].image.shape()))?;
    spec.check_input(data[0].image.shape())?;
    let cfg = TrainConfig {
        optimizer: a.opt,
        loss: a.loss,
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let (mut model, mut trainer) = match &a.resume {
        None => (build_model(&spec, a.seed)?, Trainer::new(cfg)?),
        Some(path) => {
            let (model, prev) = load_checkpoint_for(path, &spec)?;
            let p = prev.config();
            if (p.optimizer, p.loss, p.batch_size, p.seed) != (cfg.optimizer, cfg.loss, cfg.batch_size, cfg.seed) {
                return Err(Failure::Usage(
                    "--opt, --loss, --batch and --seed must match the resumed checkpoint".into(),
                ));
            }
            if prev.epochs_done() > a.epochs {
                return Err(Failure::Usage(format!(
                    "checkpoint already has {} epochs, more than --epochs {}",
                    prev.epochs_done(),
                    a.epochs
                )));
            }
            let t = Trainer::resume(cfg, prev.state().clone(), prev.epochs_done())?;
            (model, t)
        }
    };
    let (train_set, val_set) = split_validation(&data, a.val_fraction)?;
    let remaining = a.epochs - trainer.epochs_done();
    let history = trainer.fit(&mut model, train_set, val_set, remaining)?;
    save_checkpoint(&a.out, &model, &trainer)?;
    if let Some(h) = &a.history {
        write_atomic(h, history_csv(&history, model.gates()).as_bytes())?;
    }
    for r in &history.records {
        write!(out, "epoch {} loss {:.6}", r.epoch, r.train_loss).unwrap();
        if let Some(d) = r.val_dice {
            write!(out, " val_dice {d:.4}").unwrap();
        }
        out.push('\n');
    }
    writeln!(out, "saved {}", a.out.display()).unwrap();
    Ok(EXIT_OK)
}

fn eval(a: EvalArgs, out: &mut String) -> CmdResult {
    if a.batch == 0 {
        return Err(Failure::Usage("--batch must be at least 1".into()));
    }
    let (model, _) = load_checkpoint(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    model.spec().check_input(data[0].image.shape())?;
    let metrics = evaluate(&model, &data, a.batch)?;
    if let Some(r) = &a.report {
        write_atomic(r, eval_csv(&metrics).as_bytes())?;
    }
    let s = summarize(&metrics);
    writeln!(out, "samples {}", metrics.len()).unwrap();
    writeln!(out, "dice {}", pm(s.dice, 4)).unwrap();
    writeln!(out, "fpr {}", pm(s.fpr, 4)).unwrap();
    writeln!(out, "fnr {}", pm(s.fnr, 4)).unwrap();
    Ok(EXIT_OK)
}

fn params(a: ParamsArgs, out: &mut String) -> CmdResult {
    let spec = a.arch.spec(a.rank)?;
    if a.compare {
        let base = count_params(&build_model(&spec.with_variant(GateVariant::Org), 0)?).total;
        writeln!(out, "{:<8}{:>10}{:>12}", "variant", "params", "vs org").unwrap();
        for v in GateVariant::ALL {
            let n = count_params(&build_model(&spec.with_variant(v), 0)?).total;
            let change = 100.0 * (n as f64 - base as f64) / base as f64;
            writeln!(out, "{:<8}{:>10}{:>11.2}%", v.as_str().to_uppercase(), n, change).unwrap();
        }
        return Ok(EXIT_OK);
    }
    let c = count_params(&build_model(&spec, 0)?);
    for (layer, n) in &c.per_layer {
        writeln!(out, "{layer} {n}").unwrap();
    }
    writeln!(out, "total {}", c.total).unwrap();
    Ok(EXIT_OK)
}

fn sparsity(a: SparsityArgs, out: &mut String) -> CmdResult {
    let (model, _) = load_checkpoint(&a.ckpt)?;
    for g in sparsity_report(&model)? {
        let hist: Vec<String> = g.histogram.iter().map(usize::to_string).collect();
        writeln!(
            out,
            "{} channels {} off {:.2}% histogram {}",
            g.name,
            g.channels,
            100.0 * g.off_fraction,
            hist.join(" ")
        )
        .unwrap();
    }
    Ok(EXIT_OK)
}

/// Per-channel min-max scaling; constant channels map to 0.
fn normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Tiles the channels of a one-sample feature map into a near-square grid
/// across the first two spatial axes, each channel scaled to `[0, 1]`.
pub fn channel_grid(map: &Tensor) -> Result<Tensor> {
    let l = map.layout("channel_grid")?;
    if l.batch != 1 {
        return Err(Error::Format("channel grid needs a single sample".into()));
    }
    let [h, w, d] = l.spatial;
    let c = l.channels;
    let cols = (1..=c).find(|k| k * k >= c).unwrap_or(1);
    let rows = c.div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut grid = vec![0.0; gh * gw * d];
    for ch in 0..c {
        let vals: Vec<f64> = (0..h * w * d).map(|p| map.data()[p * c + ch]).collect();
        let vals = normalize(&vals);
        let (oy, ox) = ((ch / cols) * h, (ch % cols) * w);
        for y in 0..h {
            for x in 0..w {
                for z in 0..d {
                    grid[((oy + y) * gw + ox + x) * d + z] = vals[(y * w + x) * d + z];
                }
            }
        }
    }
    let mut shape = vec![gh, gw];
    if l.rank == 3 {
        shape.push(d);
    }
    shape.extend([1, 1]);
    Ok(Tensor::new(shape, grid)?)
}

fn attention(a: AttentionArgs, out: &mut String) -> CmdResult {
    let (model, _) = load_checkpoint(&a.ckpt)?;
    let image = as_sample(load_tensor(&a.input)?, &a.input)?;
    model.spec().check_input(image.shape())?;
    let mask_file = a.mask.clone().or_else(|| sibling_mask(&a.input));
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut written = Vec::new();
    let mut export = |map: &Tensor, name: &str| -> Result<()> {
        written.extend(export_gray_image(map, &a.out.join(format!("{name}.pgm")))?);
        Ok(())
    };
    export(&Tensor::new(image.shape().to_vec(), normalize(image.data()))?, "input")?;
    let mut tape = Tape::new();
    let (fwd, _) = model.run(&mut tape, &image, false)?;
    let prob = sigmoid(tape.value(fwd.logits));
    export(&prob, "probability")?;
    export(&binarize(&prob, 0.5)?, "prediction")?;
    if let Some(m) = &mask_file {
        export(&as_sample(load_tensor(m)?, m)?, "ground_truth")?;
    }
    for (i, (info, trace)) in model.gates().iter().zip(&fwd.gates).enumerate() {
        let stem = format!("gate{i}_{}", info.name);
        if let Some(att) = trace.output.attention {
            export(tape.value(att), &format!("{stem}_attention"))?;
        }
        export(&channel_grid(tape.value(trace.output.selected))?, &format!("{stem}_selected"))?;
    }
    for p in &written {
        writeln!(out, "{}", p.display()).unwrap();
    }
    Ok(EXIT_OK)
}

fn sibling_mask(input: &Path) -> Option<PathBuf> {
    let name = input.file_name()?.to_str()?;
    let m = input.with_file_name(name.strip_prefix("img_").map(|rest| format!("msk_{rest}"))?);
    m.exists().then_some(m)
}

fn gradcheck(a: GradcheckArgs, out: &mut String) -> CmdResult {
    let results = match run_suite(a.seed, a.op.as_deref()) {
        Ok(r) => r,
        Err(satskip_core::Error::Invalid { op: "gradcheck", msg }) => return Err(Failure::Usage(msg)),
        Err(e) => return Err(e.into()),
    };
    let mut all = true;
    for r in &results {
        all &= r.passes();
        writeln!(
            out,
            "{:<36} worst_rel {:.3e} worst_abs {:.3e} entries {:>6} margin {:.2e} {}",
            r.name,
            r.error.max_rel,
            r.error.max_abs_tiny,
            r.checked,
            r.kink_margin,
            if r.passes() { "ok" } else { "FAIL" }
        )
        .unwrap();
    }
    let failed = results.iter().filter(|r| !r.passes()).count();
    writeln!(out, "{} checks, {failed} failed", results.len()).unwrap();
    Ok(if all { EXIT_OK } else { EXIT_FAILURE })
}

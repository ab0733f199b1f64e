use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use volformer::data::Dataset;
use volformer::degrade::degrade;
use volformer::metrics::{evaluate, MetricReport, SubjectMetrics};
use volformer::selftest::{run_selftest, SelftestOptions};
use volformer::train::{run_training, EVAL_OVERLAP, EVAL_TILE};
use volformer::volume::{list_volumes, load_volume, normalize, save_volume, synth_phantom, MIN_PHANTOM_SIZE};
use volformer::{Checkpoint, ConfigError, ModelConfig, TensorError, TrainConfig, TrainError, Trainer, VolumeError};

const THREADS_ENV: &str = "VOLFORMER_THREADS";

#[derive(Parser, Debug)]
#[command(name = "volformer", version, about = "Volumetric super-resolution with 3D shifted-window transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic phantom volumes.
    Synth(SynthArgs),
    /// Produce a low-resolution volume by k-space truncation.
    Degrade(DegradeArgs),
    /// Train a model on a directory of HR volumes.
    Train(TrainArgs),
    /// Super-resolve one volume with a trained checkpoint.
    Infer(InferArgs),
    /// Evaluate a checkpoint (or precomputed SR volumes) against HR volumes.
    Eval(EvalArgs),
    /// Run the built-in verification suite.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Edge length of each cubic volume.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Truncation factor per axis, e.g. `2,2,1`.
    #[arg(long, value_parser = parse_factors, default_value = "2,2,1")]
    factors: [usize; 3],
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model config (TOML); defaults to the full-size architecture.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Training config (TOML).
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Expected model config; rejected if the checkpoint was trained with another.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long, default_value_t = EVAL_TILE)]
    tile: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory of HR volumes.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "sr", required_unless_present = "sr")]
    checkpoint: Option<PathBuf>,
    /// Directory of precomputed SR volumes, matched to HR by volume id.
    #[arg(long)]
    sr: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Degradation factors for the baseline; defaults to the checkpoint's.
    #[arg(long, value_parser = parse_factors)]
    factors: Option<[usize; 3]>,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Include the overfit run.
    #[arg(long)]
    full: bool,
    /// Deliberately break the relative position index.
    #[arg(long, hide = true)]
    corrupt_bias_index: bool,
}

fn parse_factors(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts.as_slice() {
        [a, b, c] if parts.iter().all(|&f| f >= 1) => Ok([*a, *b, *c]),
        _ => Err(format!("expected three positive factors like 2,2,1, got {s:?}")),
    }
}

/// Marks a failing selftest so it maps to its own exit code.
#[derive(Debug)]
struct SelftestFailed(usize);

impl std::fmt::Display for SelftestFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} selftest check(s) failed", self.0)
    }
}

impl std::error::Error for SelftestFailed {}

mod exit {
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERIC: u8 = 4;
    pub const SELFTEST: u8 = 5;
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<SelftestFailed>() {
            return exit::SELFTEST;
        }
        if let Some(TensorError::NonFinite { .. }) = cause.downcast_ref::<TensorError>() {
            return exit::NUMERIC;
        }
        if cause.is::<ConfigError>() {
            return exit::CONFIG;
        }
        if let Some(t) = cause.downcast_ref::<TrainError>() {
            match t {
                TrainError::Config(_) => return exit::CONFIG,
                TrainError::Tensor(TensorError::NonFinite { .. }) => return exit::NUMERIC,
                TrainError::Tensor(_) => {}
                _ => return exit::DATA,
            }
        }
        if cause.is::<VolumeError>() {
            return exit::DATA;
        }
    }
    1
}

fn load_model_config(path: Option<&Path>) -> Result<Option<ModelConfig>> {
    path.map(|p| ModelConfig::load(p).map_err(anyhow::Error::from))
        .transpose()
        .context("loading model config")
}

fn echo(title: &str, body: &str) {
    println!("# resolved {title}");
    for line in body.lines() {
        println!("#   {line}");
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    echo(
        "synth",
        &format!("seed = {}\nsize = {}\ncount = {}\nout = {:?}", a.seed, a.size, a.count, a.out),
    );
    if a.size < MIN_PHANTOM_SIZE {
        return Err(ConfigError::Invalid(format!("size {} is below the minimum {MIN_PHANTOM_SIZE}", a.size)).into());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for i in 0..a.count {
        let seed = a.seed + i as u64;
        let mut v = normalize(&synth_phantom(seed, [a.size; 3])?)?;
        v.id = format!("phantom-{seed}");
        let path = a.out.join(format!("phantom-{i:03}.vol"));
        save_volume(&v, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn degrade_cmd(a: DegradeArgs) -> Result<()> {
    echo(
        "degrade",
        &format!("in = {:?}\nout = {:?}\nfactors = {:?}", a.input, a.out, a.factors),
    );
    let hr = load_volume(&a.input)?;
    let lr = degrade(&hr, a.factors).map_err(|e| TrainError::Data(e.to_string()))?;
    save_volume(&lr, &a.out)?;
    println!("wrote {} dims={:?}", a.out.display(), lr.dims());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let model_cfg = load_model_config(a.model_config.as_deref())?.unwrap_or_default();
    let train_cfg = match &a.train_config {
        Some(p) => TrainConfig::load(p).context("loading train config")?,
        None => TrainConfig::default(),
    };
    echo("model config", &model_cfg.to_toml());
    echo("train config", &train_cfg.to_toml());
    println!("# parameters {}", volformer::swin3d::param_count(&model_cfg));
    let trainer = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            ckpt.model(Some(&model_cfg))?;
            println!("# resuming from step {}", ckpt.step);
            Trainer::resume(ckpt, train_cfg.clone())?
        }
        None => Trainer::new(model_cfg, train_cfg.clone())?,
    };
    let data = Dataset::load(&a.data, train_cfg.factors)?;
    println!("# subjects {}", data.len());
    let summary = run_training(trainer, &data, &a.out, |line| println!("{line}"))?;
    println!("finished step={} checkpoint={}", summary.steps, a.out.join("final.ckpt").display());
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let expected = load_model_config(a.model_config.as_deref())?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model(expected.as_ref())?;
    echo("model config", &model.config.to_toml());
    echo("infer", &format!("in = {:?}\nout = {:?}\ntile = {}", a.input, a.out, a.tile));
    let lr = load_volume(&a.input)?;
    model.config.check_input_dims(lr.dims())?;
    let sr = model.predict_tiled(&lr.data, a.tile, EVAL_OVERLAP).map_err(|e| match e {
        volformer::swin3d::ModelError::Config(c) => anyhow::Error::from(c),
        volformer::swin3d::ModelError::Tensor(t) => anyhow::Error::from(t),
    })?;
    save_volume(&lr.with_data(sr)?, &a.out)?;
    println!("wrote {} dims={:?}", a.out.display(), lr.dims());
    Ok(())
}

fn eval_precomputed(data: &Dataset, sr_dir: &Path) -> Result<MetricReport> {
    let mut report = MetricReport {
        model: Vec::new(),
        baseline: Vec::new(),
    };
    let sr_paths = list_volumes(sr_dir)?;
    for pair in &data.pairs {
        let name = sr_paths
            .iter()
            .find(|p| load_volume(p).map(|v| v.id == pair.hr.id).unwrap_or(false))
            .ok_or_else(|| TrainError::Data(format!("no SR volume with id {}", pair.id())))?;
        let sr = load_volume(name)?;
        let m = |x: &volformer::Tensor<f32>| {
            SubjectMetrics::compute(pair.id(), x, &pair.hr.data).map_err(|e| TrainError::Data(e.to_string()))
        };
        report.model.push(m(&sr.data)?);
        report.baseline.push(m(&pair.lr.data)?);
    }
    Ok(report)
}

fn eval(a: EvalArgs) -> Result<()> {
    let expected = load_model_config(a.model_config.as_deref())?;
    let report = match (&a.checkpoint, &a.sr) {
        (Some(ck), _) => {
            let ckpt = Checkpoint::load(ck)?;
            let model = ckpt.model(expected.as_ref())?;
            let factors = a.factors.unwrap_or(ckpt.train_config.factors);
            echo("model config", &model.config.to_toml());
            echo("eval", &format!("data = {:?}\nfactors = {factors:?}\ntile = {EVAL_TILE}", a.data));
            let data = Dataset::load(&a.data, factors)?;
            evaluate(&model, &data)?
        }
        (None, Some(sr)) => {
            let factors = a.factors.unwrap_or(TrainConfig::default().factors);
            echo("eval", &format!("data = {:?}\nsr = {sr:?}\nfactors = {factors:?}", a.data));
            let data = Dataset::load(&a.data, factors)?;
            eval_precomputed(&data, sr)?
        }
        (None, None) => bail!(ConfigError::Invalid("either --checkpoint or --sr is required".into())),
    };
    let text = report.to_text();
    print!("{text}");
    fs::write(&a.report, &text).with_context(|| format!("writing {}", a.report.display()))?;
    Ok(())
}

fn selftest(a: SelftestArgs) -> Result<()> {
    let opts = SelftestOptions {
        full: a.full,
        corrupt_bias_index: a.corrupt_bias_index,
    };
    echo(
        "selftest",
        &format!("full = {}\ncorrupt_bias_index = {}", opts.full, opts.corrupt_bias_index),
    );
    let results = run_selftest(opts, |r| {
        println!("{} {} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    });
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(SelftestFailed(failed).into());
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| ConfigError::Invalid(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Degrade(a) => degrade_cmd(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Selftest(a) => selftest(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_parsing() {
        assert_eq!(parse_factors("2,2,1").unwrap(), [2, 2, 1]);
        assert!(parse_factors("2,2").is_err());
        assert!(parse_factors("0,1,1").is_err());
    }

    #[test]
    fn exit_code_taxonomy() {
        let e: anyhow::Error = ConfigError::Invalid("x".into()).into();
        assert_eq!(exit_code(&e), exit::CONFIG);
        let e: anyhow::Error = TrainError::Data("x".into()).into();
        assert_eq!(exit_code(&e), exit::DATA);
        let e: anyhow::Error = TrainError::Tensor(TensorError::NonFinite { op: "x" }).into();
        assert_eq!(exit_code(&e), exit::NUMERIC);
        let e: anyhow::Error = SelftestFailed(1).into();
        assert_eq!(exit_code(&e), exit::SELFTEST);
        Cli::parse_from(["volformer", "selftest"]);
    }
}

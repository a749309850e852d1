//! Command-line front end: `simulate`, `train`, `infer`, `decode`, `eval`, `check`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{load_counts, load_dataset, load_labels, load_trials, numbered_header, read_indexed_csv, save_dataset, write_indexed_csv, write_matrix_csv, DatasetPaths};
use crate::diagnostics::{run_checks, CheckReport};
use crate::error::{Error, Result};
use crate::eval::{align_latents, baseline_decode, fit_tuning_baseline, psth_and_rmse, residual_psd, AlignmentReport, PsdReport, PsthReport};
use crate::flows::decoder_forward;
use crate::infer::{
    decode_continuous_batch, decode_discrete_batch, default_grid, infer_latents, marginal_log_lik_batch, mean_marginal, prior_arrays, GridSpec,
    InferConfig,
};
use crate::model::{elbo, standard_normal, train_with_progress, Checkpoint, Mode, TrainConfig};
use crate::ndmath::{rng_stream, DenseArray};
use crate::priors::{LabelColumn, LabelSpec};
use crate::synth::{simulate, SynthConfig, SynthMode};

pub const SEED_ENV: &str = "PIVAE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Bin rate in Hz; enables the residual spectrum when set.
    pub sampling_rate: Option<f64>,
    pub baseline_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { sampling_rate: None, baseline_bins: crate::eval::DEFAULT_BASELINE_BINS }
    }
}

/// Contents of the `--config` JSON file. Every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed copied into every section.
    pub seed: u64,
    /// Declared kinds of the label columns, in file order.
    pub labels: Option<Vec<LabelColumn>>,
    pub simulate: SynthConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}


impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
        }
        Ok(cfg)
    }

    fn set_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.simulate.seed = self.seed;
        self.train.seed = self.seed;
        self.infer.seed = self.seed;
    }

    pub fn label_spec(&self) -> Result<Option<LabelSpec>> {
        self.labels.clone().map(LabelSpec::new).transpose()
    }
}

#[derive(Parser, Debug)]
#[command(name = "pivae", version, about = "Identifiable VAE with a label prior for Poisson spike counts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with known latents.
    Simulate(SimulateArgs),
    /// Fit a model and write a checkpoint.
    Train(TrainArgs),
    /// Write posterior-mean latents.
    Infer(InferArgs),
    /// Write label posteriors.
    Decode(DecodeArgs),
    /// Write a metrics report.
    Eval(EvalArgs),
    /// Run the invariant battery on a checkpoint.
    Check(CheckArgs),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["discrete", "continuous"])]
    mode: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    neurons: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    counts: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    trials: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["pi-vae", "vae"])]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    counts: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    no_label_prior: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    counts: PathBuf,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    counts: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    true_latents: Option<PathBuf>,
    #[arg(long)]
    trials: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `argv` (including the program name), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Check(a) => cmd_check(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// `<file>.meta.json` next to a CSV output.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn cmd_simulate(a: SimulateArgs) -> Result<i32> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    if let Some(m) = a.mode {
        cfg.simulate.mode = if m == "continuous" { SynthMode::Continuous } else { SynthMode::Discrete };
    }
    if let Some(n) = a.samples {
        cfg.simulate.samples = n;
    }
    if let Some(n) = a.neurons {
        cfg.simulate.obs_dim = n;
    }
    cfg.set_seed(a.common.seed);
    let syn = simulate(&cfg.simulate)?;
    save_dataset(&a.out, &syn.to_dataset())?;
    write_matrix_csv(&a.out.join("rates.csv"), &numbered_header("n", syn.rates.cols()), &syn.rates)?;
    cfg.labels = Some(syn.label_spec().columns);
    cfg.train.latent_dim = cfg.simulate.latent_dim;
    write_json(&a.out.join("config.json"), &cfg)?;
    println!("wrote {} rows to {}", syn.counts.rows(), a.out.display());
    Ok(0)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a RunConfig,
    best_epoch: usize,
    final_train_elbo: f64,
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    if let Some(m) = &a.mode {
        cfg.train.mode = m.parse()?;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.latent_dim {
        cfg.train.latent_dim = v;
    }
    cfg.set_seed(a.common.seed);
    cfg.train.validate()?;
    let spec = cfg.label_spec()?;
    if cfg.train.mode == Mode::PiVae && (a.labels.is_none() || spec.is_none()) {
        return Err(Error::Config("pi-VAE training needs --labels and label kinds declared in the config".into()));
    }
    let paths = DatasetPaths { counts: a.counts.clone(), labels: a.labels.clone(), trials: a.trials.clone(), true_latents: None };
    let data = load_dataset(&paths, spec.as_ref())?;
    let quiet = a.quiet;
    let ck = train_with_progress(&data, &cfg.train, |s| {
        if !quiet {
            match s.val_elbo {
                Some(v) => eprintln!("epoch {:>4}  train elbo {:>12.4}  val elbo {:>12.4}", s.epoch, s.train_elbo, v),
                None => eprintln!("epoch {:>4}  train elbo {:>12.4}", s.epoch, s.train_elbo),
            }
        }
    })?;
    save_checkpoint(&a.out, &ck)?;
    let summary = TrainSummary { config: &cfg, best_epoch: ck.best_epoch, final_train_elbo: ck.history.last().map_or(f64::NAN, |h| h.train_elbo) };
    write_json(&sidecar(&a.out), &summary)?;
    println!("wrote checkpoint {} (best epoch {})", a.out.display(), ck.best_epoch);
    Ok(0)
}

fn load_model_labels(ck: &Checkpoint, path: &Path) -> Result<DenseArray> {
    load_labels(path, &ck.model.config.labels)
}

fn check_rows(counts: &DenseArray, labels: Option<&DenseArray>) -> Result<()> {
    if let Some(l) = labels {
        if l.rows() != counts.rows() {
            return Err(Error::Data(format!("{} count rows but {} label rows", counts.rows(), l.rows())));
        }
    }
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<i32> {
    let ck = load_checkpoint(&a.ckpt)?;
    let counts = load_counts(&a.counts)?;
    let labels = a.labels.as_deref().map(|p| load_model_labels(&ck, p)).transpose()?;
    check_rows(&counts, labels.as_ref())?;
    let use_prior = !a.no_label_prior && ck.model.mode() == Mode::PiVae;
    if use_prior && labels.is_none() {
        return Err(Error::Argument("--labels is required unless --no-label-prior is given".into()));
    }
    let z = infer_latents(&ck.model, &counts, labels.as_ref(), use_prior)?;
    write_indexed_csv(&a.out, "z", &z)?;
    write_json(&sidecar(&a.out), &serde_json::json!({ "use_label_prior": use_prior, "train_config": ck.train_config }))?;
    Ok(0)
}

fn cmd_decode(a: DecodeArgs) -> Result<i32> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    cfg.set_seed(a.common.seed);
    if let Some(s) = a.samples {
        cfg.infer.samples = s;
    }
    if let Some(g) = &a.grid {
        cfg.infer.grid = Some(g.parse()?);
    }
    cfg.infer.validate()?;
    let ck = load_checkpoint(&a.ckpt)?;
    let counts = load_counts(&a.counts)?;
    let opts = cfg.infer.decode_options();
    let labels = &ck.model.config.labels;
    let mut w = csv::Writer::from_path(&a.out).map_err(|e| Error::Data(e.to_string()))?;
    let csv_err = |e: csv::Error| Error::Data(e.to_string());
    if labels.is_discrete_only() {
        let k = labels.class_combinations();
        let mut header = vec!["row".to_string()];
        header.extend((0..k).map(|c| format!("class{c}")));
        header.push("argmax".into());
        w.write_record(&header).map_err(csv_err)?;
        for (i, d) in decode_discrete_batch(&ck.model, &counts, &opts)?.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(d.posterior.iter().map(|p| p.to_string()));
            rec.push(d.argmax.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
    } else {
        let grid = match cfg.infer.grid {
            Some(g) => g,
            None => default_grid(&ck.model)?,
        };
        let mut header = vec!["row".to_string()];
        header.extend(grid.values().iter().map(|u| format!("u={u}")));
        header.extend(["posterior_mean".to_string(), "map".to_string()]);
        w.write_record(&header).map_err(csv_err)?;
        for (i, d) in decode_continuous_batch(&ck.model, &counts, &grid, &opts)?.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(d.posterior.iter().map(|p| p.to_string()));
            rec.extend([d.posterior_mean.to_string(), d.map.to_string()]);
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    write_json(&sidecar(&a.out), &serde_json::json!({ "infer": cfg.infer }))?;
    Ok(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodingMetrics {
    /// Fraction correct (discrete) or mean absolute error of the posterior mean (continuous).
    pub model: f64,
    pub baseline: f64,
    pub metric: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub config: RunConfig,
    pub train_config: TrainConfig,
    pub rows: usize,
    /// Mean single-sample ELBO per datapoint.
    pub elbo: f64,
    /// Mean of per-row `ln p(x)` estimates (per time bin, summed over neurons) and its standard error.
    pub marginal_log_lik: f64,
    pub marginal_log_lik_se: f64,
    pub decoding: Option<DecodingMetrics>,
    pub alignment: Option<AlignmentReport>,
    pub psth: Option<PsthReport>,
    pub residual_psd: Option<PsdReport>,
}

/// Computes every metric available for the given inputs.
pub fn evaluate(
    ck: &Checkpoint,
    cfg: &RunConfig,
    counts: &DenseArray,
    labels: &DenseArray,
    true_latents: Option<&DenseArray>,
    trials: Option<&crate::data::TrialStructure>,
) -> Result<Metrics> {
    let p = &ck.model;
    let spec = &p.config.labels;
    let seed = cfg.infer.seed;
    let eps = standard_normal(&mut rng_stream(seed, 30), counts.rows(), p.latent_dim());
    let elbo_v = elbo(p, counts, Some(labels), &eps)?;
    let marg = marginal_log_lik_batch(p, counts, None, cfg.infer.samples, seed)?;
    let (marginal, marginal_se) = mean_marginal(&marg);

    let decoding = if p.mode() != Mode::PiVae || spec.columns.len() != 1 {
        None
    } else {
        let baseline = fit_tuning_baseline(counts, labels, spec, Some(cfg.eval.baseline_bins))?;
        let opts = cfg.infer.decode_options();
        let truth: Vec<f64> = (0..labels.rows()).map(|i| labels.get(i, 0)).collect();
        let base: Vec<f64> = (0..counts.rows()).map(|i| baseline_decode(&baseline, counts.row_slice(i))).collect::<Result<_>>()?;
        match spec.columns[0] {
            LabelColumn::Discrete { .. } => {
                let dec = decode_discrete_batch(p, counts, &opts)?;
                let acc = |est: &mut dyn Iterator<Item = f64>| est.zip(&truth).filter(|(e, t)| e == *t).count() as f64 / truth.len() as f64;
                Some(DecodingMetrics {
                    model: acc(&mut dec.iter().map(|d| d.argmax as f64)),
                    baseline: acc(&mut base.iter().copied()),
                    metric: "accuracy".into(),
                })
            }
            LabelColumn::Continuous => {
                let grid: GridSpec = match cfg.infer.grid {
                    Some(g) => g,
                    None => default_grid(p)?,
                };
                let dec = decode_continuous_batch(p, counts, &grid, &opts)?;
                let mae = |est: &mut dyn Iterator<Item = f64>| est.zip(&truth).map(|(e, t)| (e - t).abs()).sum::<f64>() / truth.len() as f64;
                Some(DecodingMetrics {
                    model: mae(&mut dec.iter().map(|d| d.posterior_mean)),
                    baseline: mae(&mut base.iter().copied()),
                    metric: "mean_absolute_error".into(),
                })
            }
        }
    };

    let use_prior = p.mode() == Mode::PiVae;
    let z = infer_latents(p, counts, Some(labels), use_prior)?;
    let alignment = true_latents.map(|t| align_latents(&z, t)).transpose()?;
    let psth = match trials {
        Some(t) => {
            let rates = decoder_forward(&z, &p.decoder, &p.store)?;
            Some(psth_and_rmse(&rates, counts, t)?)
        }
        None => None,
    };
    let residual = match (cfg.eval.sampling_rate, use_prior) {
        (Some(fs), true) => {
            let (prior_mean, _) = prior_arrays(p, labels)?;
            Some(residual_psd(&z, &prior_mean, fs)?)
        }
        _ => None,
    };
    Ok(Metrics {
        config: cfg.clone(),
        train_config: ck.train_config.clone(),
        rows: counts.rows(),
        elbo: elbo_v,
        marginal_log_lik: marginal,
        marginal_log_lik_se: marginal_se,
        decoding,
        alignment,
        psth,
        residual_psd: residual,
    })
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    cfg.set_seed(a.common.seed);
    if let Some(s) = a.samples {
        cfg.infer.samples = s;
    }
    cfg.infer.validate()?;
    let ck = load_checkpoint(&a.ckpt)?;
    let counts = load_counts(&a.counts)?;
    let labels = load_model_labels(&ck, &a.labels)?;
    check_rows(&counts, Some(&labels))?;
    let truth = a.true_latents.as_deref().map(read_indexed_csv).transpose()?;
    let trials = a.trials.as_deref().map(load_trials).transpose()?;
    if let Some(t) = &truth {
        if t.rows() != counts.rows() {
            return Err(Error::Data(format!("{} count rows but {} latent rows", counts.rows(), t.rows())));
        }
    }
    let metrics = evaluate(&ck, &cfg, &counts, &labels, truth.as_ref(), trials.as_ref())?;
    write_json(&a.out, &metrics)?;
    Ok(0)
}

#[derive(Serialize)]
struct CheckOutput<'a> {
    checkpoint: String,
    seed: u64,
    #[serde(flatten)]
    report: &'a CheckReport,
}

fn cmd_check(a: CheckArgs) -> Result<i32> {
    let ck = load_checkpoint(&a.ckpt)?;
    let report = run_checks(&ck.model, a.seed)?;
    for c in &report.checks {
        println!("{:<24} {:?}  {}", c.name, c.status, c.detail);
    }
    if let Some(path) = &a.report {
        write_json(path, &CheckOutput { checkpoint: a.ckpt.display().to_string(), seed: a.seed, report: &report })?;
    }
    Ok(if report.all_passed { 0 } else { 1 })
}

//! Posterior-mean latents, Monte-Carlo label decoding and marginal likelihood.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::flows::decoder_forward;
use crate::model::{standard_normal, Mode, PiVaeParams};
use crate::ndmath::{log_sum_exp, rng_stream, DenseArray, Graph, Rng};
use crate::priors::LabelColumn;
use crate::recognition::posterior_product_nodes;

pub const DEFAULT_SAMPLES: usize = 100;
pub const DEFAULT_GRID_POINTS: usize = 100;

/// Evenly spaced label values `lo ..= hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.points < 2 {
            return Err(Error::Config(format!("a decoding grid needs at least 2 points, got {}", self.points)));
        }
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(Error::Config(format!("decoding grid needs finite lo < hi, got {}:{}", self.lo, self.hi)));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        let step = (self.hi - self.lo) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.lo + step * i as f64).collect()
    }
}

impl std::str::FromStr for GridSpec {
    type Err = Error;
    /// Parses `LO:HI:N`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Argument(format!("grid must look like LO:HI:N, got {s:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let g = GridSpec {
            lo: parts[0].trim().parse().map_err(|_| bad())?,
            hi: parts[1].trim().parse().map_err(|_| bad())?,
            points: parts[2].trim().parse().map_err(|_| bad())?,
        };
        g.validate()?;
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub samples: usize,
    pub use_label_prior: bool,
    pub common_random_numbers: bool,
    /// Defaults to the training-label range with [`DEFAULT_GRID_POINTS`] points.
    pub grid: Option<GridSpec>,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { samples: DEFAULT_SAMPLES, use_label_prior: true, common_random_numbers: false, grid: None, seed: 0 }
    }
}

/// Sampling controls shared by the decoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub samples: usize,
    pub seed: u64,
    /// Reuse one set of standard-normal draws for every class or grid point.
    pub common_random_numbers: bool,
}

impl DecodeOptions {
    pub fn new(samples: usize, seed: u64) -> Self {
        Self { samples, seed, common_random_numbers: false }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        check_samples(self.samples)?;
        if let Some(g) = &self.grid {
            g.validate()?;
        }
        Ok(())
    }

    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions { samples: self.samples, seed: self.seed, common_random_numbers: self.common_random_numbers }
    }
}

fn check_samples(s: usize) -> Result<()> {
    if s < 1 {
        return Err(Error::Config("the Monte-Carlo sample count must be at least 1".into()));
    }
    Ok(())
}

/// Posterior means: of `q(z|x,u)` with the label prior, else of `q(z|x)`.
///
/// Models trained without a label prior always return encoder means.
pub fn infer_latents(params: &PiVaeParams, counts: &DenseArray, labels: Option<&DenseArray>, use_label_prior: bool) -> Result<DenseArray> {
    if counts.cols() != params.obs_dim() {
        return Err(Error::Shape(format!("model expects {} neurons, got {}", params.obs_dim(), counts.cols())));
    }
    let mut g = Graph::inference();
    let x = g.input(counts.clone());
    let encoder = params.encoder.forward(&mut g, &params.store, x)?;
    if !use_label_prior || params.mode() == Mode::Vae {
        return Ok(g.value(encoder.0).clone());
    }
    let labels = labels.ok_or_else(|| Error::Argument("labels are required when the label prior is used".into()))?;
    let prior = params.prior_nodes(&mut g, Some(labels), counts.rows())?;
    let (mean, _) = posterior_product_nodes(&mut g, encoder, prior)?;
    Ok(g.value(mean).clone())
}

/// Prior means and log-variances for each label row (`N x m` each).
pub fn prior_arrays(params: &PiVaeParams, labels: &DenseArray) -> Result<(DenseArray, DenseArray)> {
    let mut g = Graph::inference();
    let (m, lv) = params.prior_nodes(&mut g, Some(labels), labels.rows())?;
    Ok((g.value(m).clone(), g.value(lv).clone()))
}

/// `ln p(x | z_s)` for every row `s` of `z`.
fn poisson_rows(params: &PiVaeParams, x: &[f64], z: &DenseArray) -> Result<Vec<f64>> {
    let rates = decoder_forward(z, &params.decoder, &params.store)?;
    let c: f64 = x.iter().map(|&k| ln_gamma(k + 1.0)).sum();
    Ok((0..rates.rows())
        .map(|s| rates.row_slice(s).iter().zip(x).map(|(&r, &k)| k * r.ln() - r).sum::<f64>() - c)
        .collect())
}

fn validate_counts_row(params: &PiVaeParams, x: &[f64]) -> Result<()> {
    if x.len() != params.obs_dim() {
        return Err(Error::Shape(format!("model expects {} neurons, got {}", params.obs_dim(), x.len())));
    }
    if let Some((i, v)) = x.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.fract() == 0.0)) {
        return Err(Error::Value(format!("count {v} at position {i} is not a nonnegative integer")));
    }
    Ok(())
}

/// `z = mean + exp(lv / 2) * eps` row by row.
fn sample_from(mean: &DenseArray, lv: &DenseArray, rng: &mut Rng) -> DenseArray {
    let eps = standard_normal(rng, mean.rows(), mean.cols());
    shift_scale(mean, lv, &eps)
}

fn shift_scale(mean: &DenseArray, lv: &DenseArray, eps: &DenseArray) -> DenseArray {
    let data = mean.data().iter().zip(lv.data()).zip(eps.data()).map(|((m, l), e)| m + (0.5 * l).exp() * e).collect();
    DenseArray::new(mean.shape().to_vec(), data).expect("finite samples")
}

/// Monte-Carlo `ln p(x | u_c)` for each label row with `samples` prior draws per row.
fn log_evidence(params: &PiVaeParams, x: &[f64], label_rows: &DenseArray, samples: usize, crn: bool, rng: &mut Rng) -> Result<Vec<f64>> {
    let k = label_rows.rows();
    let rep: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, samples)).collect();
    let (mean, lv) = prior_arrays(params, &label_rows.select_rows(&rep))?;
    let z = if crn {
        let eps = standard_normal(rng, samples, mean.cols());
        let idx: Vec<usize> = (0..k * samples).map(|i| i % samples).collect();
        shift_scale(&mean, &lv, &eps.select_rows(&idx))
    } else {
        sample_from(&mean, &lv, rng)
    };
    let ll = poisson_rows(params, x, &z)?;
    Ok(ll.chunks(samples).map(|c| log_sum_exp(c) - (samples as f64).ln()).collect())
}

fn normalize(log_ev: &[f64]) -> Vec<f64> {
    let max = log_ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_ev.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

fn argmax_low(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDecode {
    /// Monte-Carlo `ln p(x | c)` per class combination.
    pub log_evidence: Vec<f64>,
    pub posterior: Vec<f64>,
    pub argmax: usize,
    /// Label row of the winning class combination.
    pub label: Vec<f64>,
}

fn require_pi(params: &PiVaeParams) -> Result<()> {
    if params.mode() != Mode::PiVae || params.prior.is_none() {
        return Err(Error::Unsupported("label decoding needs a model trained with the label prior".into()));
    }
    Ok(())
}

/// Class posterior under a uniform class prior, with `samples` draws from `p(z|c)` per class.
pub fn decode_discrete(params: &PiVaeParams, x: &[f64], samples: usize, seed: u64) -> Result<DiscreteDecode> {
    decode_discrete_with(params, x, &DecodeOptions::new(samples, seed))
}

pub fn decode_discrete_with(params: &PiVaeParams, x: &[f64], opts: &DecodeOptions) -> Result<DiscreteDecode> {
    decode_discrete_row(params, x, opts, &mut rng_stream(opts.seed, 0))
}

/// Decodes every row; row `i` draws from stream `i` of the seed.
pub fn decode_discrete_batch(params: &PiVaeParams, counts: &DenseArray, opts: &DecodeOptions) -> Result<Vec<DiscreteDecode>> {
    (0..counts.rows())
        .map(|i| decode_discrete_row(params, counts.row_slice(i), opts, &mut rng_stream(opts.seed, i as u64)))
        .collect()
}

fn decode_discrete_row(params: &PiVaeParams, x: &[f64], opts: &DecodeOptions, rng: &mut Rng) -> Result<DiscreteDecode> {
    check_samples(opts.samples)?;
    require_pi(params)?;
    validate_counts_row(params, x)?;
    let spec = &params.config.labels;
    if !spec.is_discrete_only() {
        return Err(Error::Unsupported("discrete decoding needs discrete-only labels".into()));
    }
    let k = spec.class_combinations();
    let rows: Vec<Vec<f64>> = (0..k).map(|c| spec.combination_row(c)).collect();
    let labels = DenseArray::from_rows(&rows)?;
    let log_evidence = log_evidence(params, x, &labels, opts.samples, opts.common_random_numbers, rng)?;
    let posterior = normalize(&log_evidence);
    let argmax = argmax_low(&posterior);
    Ok(DiscreteDecode { label: rows[argmax].clone(), log_evidence, posterior, argmax })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousDecode {
    pub grid: Vec<f64>,
    pub log_evidence: Vec<f64>,
    pub posterior: Vec<f64>,
    pub posterior_mean: f64,
    pub map: f64,
}

/// Grid used when none is given: the training-label range.
pub fn default_grid(params: &PiVaeParams) -> Result<GridSpec> {
    let (lo, hi) = *params
        .label_support
        .first()
        .ok_or_else(|| Error::Unsupported("model has no continuous label column".into()))?;
    let g = GridSpec { lo, hi, points: DEFAULT_GRID_POINTS };
    g.validate()?;
    Ok(g)
}

/// Grid posterior over a single continuous label under a uniform prior on the grid.
pub fn decode_continuous(params: &PiVaeParams, x: &[f64], grid: &GridSpec, samples: usize, seed: u64) -> Result<ContinuousDecode> {
    decode_continuous_with(params, x, grid, &DecodeOptions::new(samples, seed))
}

pub fn decode_continuous_with(params: &PiVaeParams, x: &[f64], grid: &GridSpec, opts: &DecodeOptions) -> Result<ContinuousDecode> {
    decode_continuous_row(params, x, grid, opts, &mut rng_stream(opts.seed, 0))
}

/// Decodes every row; row `i` draws from stream `i` of the seed.
pub fn decode_continuous_batch(params: &PiVaeParams, counts: &DenseArray, grid: &GridSpec, opts: &DecodeOptions) -> Result<Vec<ContinuousDecode>> {
    (0..counts.rows())
        .map(|i| decode_continuous_row(params, counts.row_slice(i), grid, opts, &mut rng_stream(opts.seed, i as u64)))
        .collect()
}

fn decode_continuous_row(params: &PiVaeParams, x: &[f64], grid: &GridSpec, opts: &DecodeOptions, rng: &mut Rng) -> Result<ContinuousDecode> {
    check_samples(opts.samples)?;
    grid.validate()?;
    require_pi(params)?;
    validate_counts_row(params, x)?;
    if params.config.labels.columns != [LabelColumn::Continuous] {
        return Err(Error::Unsupported("grid decoding supports exactly one continuous label column".into()));
    }
    let values = grid.values();
    let labels = DenseArray::matrix(values.len(), 1, values.clone())?;
    let log_evidence = log_evidence(params, x, &labels, opts.samples, opts.common_random_numbers, rng)?;
    let posterior = normalize(&log_evidence);
    let posterior_mean = posterior.iter().zip(&values).map(|(p, u)| p * u).sum();
    let map = values[argmax_low(&posterior)];
    Ok(ContinuousDecode { grid: values, log_evidence, posterior, posterior_mean, map })
}

/// Log-mean-exp estimate with its delta-method Monte-Carlo standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalEstimate {
    pub log_lik: f64,
    pub std_err: f64,
    pub samples: usize,
}

fn log_mean_exp_with_se(ll: &[f64]) -> MarginalEstimate {
    let s = ll.len() as f64;
    let max = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = ll.iter().map(|l| (l - max).exp()).collect();
    let mean = w.iter().sum::<f64>() / s;
    let var = if ll.len() > 1 { w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1.0) } else { 0.0 };
    MarginalEstimate { log_lik: max + mean.ln(), std_err: var.sqrt() / (s.sqrt() * mean), samples: ll.len() }
}

/// Draws `count` label rows uniformly: classes uniformly, continuous values over the training range.
fn sample_labels(params: &PiVaeParams, count: usize, rng: &mut Rng) -> DenseArray {
    let spec = &params.config.labels;
    let mut out = DenseArray::zeros(&[count, spec.width()]);
    let mut cont = 0;
    let supports: Vec<(f64, f64)> = spec
        .columns
        .iter()
        .map(|c| match c {
            LabelColumn::Continuous => {
                cont += 1;
                params.label_support[cont - 1]
            }
            LabelColumn::Discrete { .. } => (0.0, 0.0),
        })
        .collect();
    for i in 0..count {
        for (j, c) in spec.columns.iter().enumerate() {
            let v = match c {
                LabelColumn::Discrete { classes } => rng.random_range(0..*classes) as f64,
                LabelColumn::Continuous => {
                    let (lo, hi) = supports[j];
                    if hi > lo {
                        rng.random_range(lo..=hi)
                    } else {
                        lo
                    }
                }
            };
            out.set(i, j, v);
        }
    }
    out
}

/// `ln p(x)` (or `ln p(x|u)` given `u`) by sampling the prior.
pub fn marginal_log_lik(params: &PiVaeParams, x: &[f64], u: Option<&[f64]>, samples: usize, seed: u64) -> Result<MarginalEstimate> {
    marginal_row(params, x, u, samples, &mut rng_stream(seed, 0))
}

/// Per-row estimates; row `i` draws from stream `i` of `seed`.
pub fn marginal_log_lik_batch(
    params: &PiVaeParams,
    counts: &DenseArray,
    labels: Option<&DenseArray>,
    samples: usize,
    seed: u64,
) -> Result<Vec<MarginalEstimate>> {
    (0..counts.rows())
        .map(|i| {
            let u = labels.map(|l| l.row_slice(i));
            marginal_row(params, counts.row_slice(i), u, samples, &mut rng_stream(seed, i as u64))
        })
        .collect()
}

fn marginal_row(params: &PiVaeParams, x: &[f64], u: Option<&[f64]>, samples: usize, rng: &mut Rng) -> Result<MarginalEstimate> {
    check_samples(samples)?;
    validate_counts_row(params, x)?;
    let m = params.latent_dim();
    let z = match (params.mode(), u) {
        (Mode::Vae, _) => standard_normal(rng, samples, m),
        (Mode::PiVae, Some(u)) => {
            params.config.labels.validate_row(u)?;
            let rows = DenseArray::from_rows(&vec![u.to_vec(); samples])?;
            let (mean, lv) = prior_arrays(params, &rows)?;
            sample_from(&mean, &lv, rng)
        }
        (Mode::PiVae, None) => {
            let rows = sample_labels(params, samples, rng);
            let (mean, lv) = prior_arrays(params, &rows)?;
            sample_from(&mean, &lv, rng)
        }
    };
    let ll = poisson_rows(params, x, &z)?;
    Ok(log_mean_exp_with_se(&ll))
}

/// Mean of per-row estimates and the standard error of that mean.
pub fn mean_marginal(estimates: &[MarginalEstimate]) -> (f64, f64) {
    let n = estimates.len() as f64;
    let mean = estimates.iter().map(|e| e.log_lik).sum::<f64>() / n;
    let se = estimates.iter().map(|e| e.std_err.powi(2)).sum::<f64>().sqrt() / n;
    (mean, se)
}

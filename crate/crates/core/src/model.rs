//! pi-VAE assembly, evidence lower bound, and training.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::flows::DecoderParams;
use crate::ndmath::{adam_step, rng_stream, AdamConfig, AdamState, DenseArray, Graph, NodeId, ParamStore, Rng};
use crate::priors::{GaussParams, LabelPrior, LabelSpec};
use crate::recognition::{posterior_product_nodes, sample_reparam_nodes, EncoderParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Label prior `p(z|u)` and posterior `q(z|x) p(z|u)`.
    PiVae,
    /// Ablation: fixed `N(0, I)` prior, labels never read.
    Vae,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pi-vae" | "pivae" => Ok(Mode::PiVae),
            "vae" => Ok(Mode::Vae),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected pi-vae or vae)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub latent_dim: usize,
    pub labels: LabelSpec,
    pub mode: Mode,
}

/// Every learnable array plus the fixed structure around it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiVaeParams {
    pub config: ModelConfig,
    pub seed: u64,
    /// `(min, max)` of each continuous label column over the training rows.
    pub label_support: Vec<(f64, f64)>,
    pub decoder: DecoderParams,
    pub prior: Option<LabelPrior>,
    pub encoder: EncoderParams,
    pub store: ParamStore,
}

impl PiVaeParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let (m, n) = (config.latent_dim, config.obs_dim);
        if m == 0 || m >= n {
            return Err(Error::Config(format!("latent dimension must satisfy 0 < m < n, got m = {m}, n = {n}")));
        }
        let mut rng = rng_stream(seed, 0);
        let mut store = ParamStore::new();
        let decoder = DecoderParams::init(&mut store, m, n, &mut rng)?;
        let prior = match config.mode {
            Mode::PiVae => Some(LabelPrior::init(&mut store, &config.labels, m, &mut rng)?),
            Mode::Vae => None,
        };
        let encoder = EncoderParams::init(&mut store, n, m, &mut rng)?;
        let label_support = vec![(0.0, 0.0); config.labels.continuous_columns().len()];
        Ok(Self { config, seed, label_support, decoder, prior, encoder, store })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.config.obs_dim
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    /// Adds `U(-scale, scale)` noise to every parameter entry.
    pub fn perturb(&mut self, scale: f64, seed: u64) {
        let mut rng = rng_stream(seed, 7);
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            for v in self.store.get_mut(id).data_mut() {
                *v += rng.random_range(-scale..scale);
            }
        }
    }

    /// Structural consistency between the configuration and the stored arrays.
    pub fn validate(&self) -> Result<()> {
        let (m, n) = (self.config.latent_dim, self.config.obs_dim);
        if self.decoder.latent_dim != m || self.decoder.obs_dim != n {
            return Err(Error::Format("decoder dimensions disagree with the model config".into()));
        }
        self.decoder.pad.validate(&self.store)?;
        for b in &self.decoder.blocks {
            b.validate()?;
            for c in &b.couplings {
                c.trunk.validate(&self.store)?;
            }
        }
        self.encoder.mean.validate(&self.store)?;
        self.encoder.log_var.validate(&self.store)?;
        match (&self.prior, self.config.mode) {
            (Some(LabelPrior::Network { net, .. }), Mode::PiVae) => net.validate(&self.store)?,
            (Some(LabelPrior::Table { mean, log_var, .. }), Mode::PiVae) => {
                let want = [self.config.labels.class_combinations(), m];
                if self.store.get(*mean).shape() != want || self.store.get(*log_var).shape() != want {
                    return Err(Error::Format("prior table shape disagrees with the label spec".into()));
                }
            }
            (None, Mode::Vae) => {}
            _ => return Err(Error::Format("prior presence disagrees with the model mode".into())),
        }
        Ok(())
    }

    /// Prior mean and log-variance nodes for a batch of `rows`.
    pub fn prior_nodes(&self, g: &mut Graph, labels: Option<&DenseArray>, rows: usize) -> Result<(NodeId, NodeId)> {
        match (&self.prior, self.config.mode) {
            (Some(prior), Mode::PiVae) => {
                let labels = labels.ok_or_else(|| Error::Argument("pi-VAE mode needs labels".into()))?;
                if labels.rows() != rows {
                    return shape_err(format!("{} label rows for {} data rows", labels.rows(), rows));
                }
                prior.forward(g, &self.store, labels)
            }
            _ => {
                let m = self.latent_dim();
                let mean = g.input(DenseArray::zeros(&[rows, m]));
                let lv = g.input(DenseArray::zeros(&[rows, m]));
                Ok((mean, lv))
            }
        }
    }

    /// Encoder, prior and approximate-posterior nodes for a batch.
    pub fn posterior_nodes(&self, g: &mut Graph, counts: &DenseArray, labels: Option<&DenseArray>) -> Result<PosteriorNodes> {
        if counts.cols() != self.obs_dim() {
            return shape_err(format!("model expects {} neurons, got {}", self.obs_dim(), counts.cols()));
        }
        let x = g.input(counts.clone());
        let encoder = self.encoder.forward(g, &self.store, x)?;
        let prior = self.prior_nodes(g, labels, counts.rows())?;
        let posterior = match self.config.mode {
            Mode::PiVae => posterior_product_nodes(g, encoder, prior)?,
            Mode::Vae => encoder,
        };
        Ok(PosteriorNodes { x, encoder, prior, posterior })
    }
}

pub struct PosteriorNodes {
    pub x: NodeId,
    pub encoder: (NodeId, NodeId),
    pub prior: (NodeId, NodeId),
    pub posterior: (NodeId, NodeId),
}

/// `sum_i x_i ln(rate_i) - rate_i - ln(x_i!)`.
pub fn poisson_log_lik(x: &[f64], rates: &[f64]) -> Result<f64> {
    if x.len() != rates.len() {
        return shape_err(format!("{} counts for {} rates", x.len(), rates.len()));
    }
    let mut total = 0.0;
    for (i, (&k, &r)) in x.iter().zip(rates).enumerate() {
        if !(k >= 0.0 && k.fract() == 0.0) {
            return Err(Error::Value(format!("count {k} at position {i} is not a nonnegative integer")));
        }
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::Numeric(format!("rate {r} at position {i} is not positive")));
        }
        total += k * r.ln() - r - ln_gamma(k + 1.0);
    }
    Ok(total)
}

/// Closed-form `KL(q || p)` for diagonal Gaussians.
pub fn kl_diag_gaussians(q: &GaussParams, p: &GaussParams) -> Result<f64> {
    if q.dim() != p.dim() {
        return shape_err(format!("KL between {}- and {}-dimensional Gaussians", q.dim(), p.dim()));
    }
    Ok(0.5
        * (0..q.dim())
            .map(|i| {
                let (lq, lp) = (q.log_var[i], p.log_var[i]);
                lp - lq + (lq.exp() + (q.mean[i] - p.mean[i]).powi(2)) / lp.exp() - 1.0
            })
            .sum::<f64>())
}

/// Sum over rows of the Poisson log-likelihood, as a `r x 1` node of per-row values.
fn poisson_rows(g: &mut Graph, x: NodeId, rates: NodeId) -> Result<NodeId> {
    let consts = {
        let xv = g.value(x);
        let c: Vec<f64> = (0..xv.rows()).map(|i| xv.row_slice(i).iter().map(|&k| ln_gamma(k + 1.0)).sum()).collect();
        DenseArray::from_raw(vec![c.len(), 1], c)
    };
    let lr = g.log(rates);
    let xl = g.mul(x, lr)?;
    let t = g.sub(xl, rates)?;
    let s = g.row_sum(t);
    let c = g.input(consts);
    g.sub(s, c)
}

/// Per-row KL between diagonal Gaussians given as node pairs.
fn kl_rows(g: &mut Graph, (qm, qlv): (NodeId, NodeId), (pm, plv): (NodeId, NodeId)) -> Result<NodeId> {
    let dl = g.sub(plv, qlv)?;
    let qv = g.exp(qlv);
    let diff = g.sub(qm, pm)?;
    let d2 = g.square(diff);
    let num = g.add(qv, d2)?;
    let pv = g.exp(plv);
    let ratio = g.div(num, pv)?;
    let t = g.add(dl, ratio)?;
    let t = g.offset(t, -1.0);
    let s = g.row_sum(t);
    Ok(g.scale(s, 0.5))
}

/// Per-row reconstruction and KL terms of the ELBO.
pub struct ElboNodes {
    pub recon: NodeId,
    pub kl: NodeId,
    /// Mean over rows of `recon - kl`.
    pub elbo: NodeId,
}

/// Builds the single-sample ELBO for a batch with the given standard-normal noise (`B x m`).
pub fn elbo_nodes(
    g: &mut Graph,
    params: &PiVaeParams,
    counts: &DenseArray,
    labels: Option<&DenseArray>,
    eps: &DenseArray,
) -> Result<ElboNodes> {
    if eps.rows() != counts.rows() || eps.cols() != params.latent_dim() {
        return shape_err(format!("noise {:?} for {} rows of a {}-d latent", eps.shape(), counts.rows(), params.latent_dim()));
    }
    let post = params.posterior_nodes(g, counts, labels)?;
    let e = g.input(eps.clone());
    let z = sample_reparam_nodes(g, post.posterior.0, post.posterior.1, e)?;
    let rates = params.decoder.forward(g, &params.store, z)?;
    let recon = poisson_rows(g, post.x, rates)?;
    let kl = kl_rows(g, post.posterior, post.prior)?;
    let diff = g.sub(recon, kl)?;
    let elbo = g.mean(diff);
    Ok(ElboNodes { recon, kl, elbo })
}

/// Mean ELBO per datapoint (per time bin, summed over neurons).
pub fn elbo(params: &PiVaeParams, counts: &DenseArray, labels: Option<&DenseArray>, eps: &DenseArray) -> Result<f64> {
    let mut g = Graph::inference();
    let nodes = elbo_nodes(&mut g, params, counts, labels, eps)?;
    g.scalar(nodes.elbo)
}

/// Per-datapoint ELBO values.
pub fn elbo_rows(params: &PiVaeParams, counts: &DenseArray, labels: Option<&DenseArray>, eps: &DenseArray) -> Result<Vec<f64>> {
    let mut g = Graph::inference();
    let nodes = elbo_nodes(&mut g, params, counts, labels, eps)?;
    Ok(g.value(nodes.recon)
        .data()
        .iter()
        .zip(g.value(nodes.kl).data())
        .map(|(r, k)| r - k)
        .collect())
}

/// Standard-normal `rows x cols` matrix.
pub fn standard_normal(rng: &mut Rng, rows: usize, cols: usize) -> DenseArray {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    DenseArray::from_raw(vec![rows, cols], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub mode: Mode,
    /// Fraction of rows held out for validation and best-epoch selection.
    pub val_fraction: f64,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            epochs: 600,
            batch_size: 200,
            learning_rate: 5e-4,
            seed: 0,
            mode: Mode::PiVae,
            val_fraction: 0.1,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_elbo: f64,
    pub val_elbo: Option<f64>,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub train_config: TrainConfig,
    pub model: PiVaeParams,
    pub history: Vec<EpochStats>,
    /// Epoch whose parameters are stored (best validation ELBO, or the last epoch).
    pub best_epoch: usize,
}

fn label_support(spec: &LabelSpec, labels: &DenseArray, rows: &[usize]) -> Vec<(f64, f64)> {
    spec.continuous_columns()
        .iter()
        .map(|&j| {
            rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                let v = labels.get(i, j);
                (lo.min(v), hi.max(v))
            })
        })
        .collect()
}

/// Fits a model to `data`. Deterministic given `config.seed`.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<Checkpoint> {
    train_with_progress(data, config, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with_progress(data: &Dataset, config: &TrainConfig, mut progress: impl FnMut(&EpochStats)) -> Result<Checkpoint> {
    config.validate()?;
    let n_rows = data.rows();
    if n_rows == 0 {
        return Err(Error::Data("dataset has no rows".into()));
    }
    let (labels, spec) = match config.mode {
        Mode::PiVae => match (&data.labels, &data.label_spec) {
            (Some(l), Some(s)) => (Some(l), s.clone()),
            _ => return Err(Error::Config("pi-VAE training needs labels with a declared label spec".into())),
        },
        // the ablation never reads label columns
        Mode::Vae => (None, data.label_spec.clone().unwrap_or_else(|| LabelSpec { columns: vec![] })),
    };
    let model_cfg = ModelConfig { obs_dim: data.obs_dim(), latent_dim: config.latent_dim, labels: spec.clone(), mode: config.mode };
    let mut params = PiVaeParams::init(model_cfg, config.seed)?;

    let mut order: Vec<usize> = (0..n_rows).collect();
    order.shuffle(&mut rng_stream(config.seed, 1));
    let mut n_val = (n_rows as f64 * config.val_fraction).round() as usize;
    if n_val >= n_rows {
        n_val = n_rows - 1;
    }
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    if let Some(l) = labels {
        params.label_support = label_support(&spec, l, &train_idx);
    }

    let val_counts = data.counts.select_rows(&val_idx);
    let val_labels = labels.map(|l| l.select_rows(&val_idx));

    let mut adam = AdamState::new(&params.store, AdamConfig::with_lr(config.learning_rate));
    let mut shuffle_rng = rng_stream(config.seed, 2);
    let mut noise_rng = rng_stream(config.seed, 3);
    let m = config.latent_dim;

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=config.epochs {
        train_idx.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in train_idx.chunks(config.batch_size) {
            let counts = data.counts.select_rows(batch);
            let blabels = labels.map(|l| l.select_rows(batch));
            let eps = standard_normal(&mut noise_rng, batch.len(), m);
            let mut g = Graph::new();
            let nodes = elbo_nodes(&mut g, &params, &counts, blabels.as_ref(), &eps)?;
            let value = g.scalar(nodes.elbo)?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("ELBO became non-finite at epoch {epoch}")));
            }
            total += value * batch.len() as f64;
            let loss = g.neg(nodes.elbo);
            let grads = g.backward(loss)?.for_store(&params.store);
            adam_step(&mut params.store, &grads, &mut adam)?;
        }
        let train_elbo = total / train_idx.len() as f64;

        let val_elbo = if val_idx.is_empty() {
            None
        } else {
            // same noise every epoch so that epochs are compared on equal footing
            let eps = standard_normal(&mut rng_stream(config.seed, 4), val_idx.len(), m);
            Some(elbo(&params, &val_counts, val_labels.as_ref(), &eps)?)
        };
        let stats = EpochStats { epoch, train_elbo, val_elbo };
        progress(&stats);
        history.push(stats);

        if let Some(v) = val_elbo {
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, epoch, params.store.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            if config.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }

    let best_epoch = match best {
        Some((_, epoch, store)) => {
            params.store = store;
            epoch
        }
        None => history.len(),
    };
    Ok(Checkpoint { format_version: CHECKPOINT_FORMAT_VERSION, train_config: config.clone(), model: params, history, best_epoch })
}

/// Analytic-vs-central-difference comparison for one named parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Relative errors are taken against `max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Compares the analytic ELBO gradient with central differences for every parameter entry.
pub fn elbo_gradient_check(
    params: &PiVaeParams,
    counts: &DenseArray,
    labels: Option<&DenseArray>,
    eps: &DenseArray,
    h: f64,
) -> Result<Vec<GradCheckEntry>> {
    let mut g = Graph::new();
    let nodes = elbo_nodes(&mut g, params, counts, labels, eps)?;
    let analytic = g.backward(nodes.elbo)?.for_store(&params.store);
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.store.len());
    for id in params.store.ids() {
        let mut entry = GradCheckEntry { name: params.store.name(id).to_string(), max_rel_error: 0.0, max_abs_error: 0.0 };
        for k in 0..params.store.get(id).len() {
            let x0 = params.store.get(id).data()[k];
            probe.store.get_mut(id).data_mut()[k] = x0 + h;
            let fp = elbo(&probe, counts, labels, eps)?;
            probe.store.get_mut(id).data_mut()[k] = x0 - h;
            let fm = elbo(&probe, counts, labels, eps)?;
            probe.store.get_mut(id).data_mut()[k] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[id.0].data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            entry.max_abs_error = entry.max_abs_error.max(abs);
            entry.max_rel_error = entry.max_rel_error.max(rel);
        }
        out.push(entry);
    }
    Ok(out)
}

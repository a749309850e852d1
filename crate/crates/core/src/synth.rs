//! Ground-truth simulations: Gaussian-mixture and sine-shaped latents pushed
//! through a random RealNVP generator into Poisson counts.

use std::f64::consts::TAU;

use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::flows::{GinBlockParams, RATE_FLOOR};
use crate::ndmath::{rng_stream, softplus, DenseArray, Graph, ParamStore, Rng};
use crate::priors::LabelSpec;

pub const GENERATOR_BLOCKS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    Discrete,
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub mode: SynthMode,
    pub samples: usize,
    pub obs_dim: usize,
    pub latent_dim: usize,
    pub clusters: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { mode: SynthMode::Discrete, samples: 10_000, obs_dim: 100, latent_dim: 2, clusters: 5, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("simulation needs at least one sample".into()));
        }
        if self.latent_dim == 0 || self.latent_dim >= self.obs_dim {
            return Err(Error::Config(format!(
                "simulation needs 0 < m < n, got m = {}, n = {}",
                self.latent_dim, self.obs_dim
            )));
        }
        match self.mode {
            SynthMode::Discrete if self.clusters < 2 => {
                Err(Error::Config(format!("discrete simulation needs at least 2 clusters, got {}", self.clusters)))
            }
            SynthMode::Continuous if self.latent_dim != 2 => {
                Err(Error::Config(format!("continuous simulation is defined for m = 2, got {}", self.latent_dim)))
            }
            _ => Ok(()),
        }
    }
}

/// Random injective map from latents to rates: zero padding, RealNVP blocks, softplus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub blocks: Vec<GinBlockParams>,
    pub store: ParamStore,
}

impl GeneratorParams {
    pub fn init(latent_dim: usize, obs_dim: usize, seed: u64) -> Result<Self> {
        if latent_dim == 0 || latent_dim >= obs_dim {
            return Err(Error::Config(format!("generator needs 0 < m < n, got m = {latent_dim}, n = {obs_dim}")));
        }
        let mut rng = rng_stream(seed, 10);
        let mut store = ParamStore::new();
        let hidden = (obs_dim / 2).max(1);
        let blocks = (0..GENERATOR_BLOCKS)
            .map(|i| GinBlockParams::init(&mut store, &format!("generator.block{i}"), obs_dim, hidden, false, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { latent_dim, obs_dim, blocks, store })
    }
}

pub fn synth_decoder_forward(z: &DenseArray, gen: &GeneratorParams) -> Result<DenseArray> {
    if z.cols() != gen.latent_dim {
        return shape_err(format!("generator expects {} latent dims, got {}", gen.latent_dim, z.cols()));
    }
    let mut g = Graph::inference();
    let zn = g.input(z.clone());
    let pad = g.input(DenseArray::zeros(&[z.rows(), gen.obs_dim - gen.latent_dim]));
    let mut h = g.concat(&[zn, pad])?;
    for b in &gen.blocks {
        h = b.forward(&mut g, &gen.store, h)?;
    }
    Ok(g.value(h).map(|v| softplus(v).max(RATE_FLOOR)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub counts: DenseArray,
    /// Class index (discrete) or `u` in `[0, 2 pi]` (continuous), one column.
    pub labels: DenseArray,
    pub latents: DenseArray,
    pub rates: DenseArray,
    pub generator: GeneratorParams,
    /// Mixture component means and variances (`K x m`), discrete mode only.
    pub cluster_means: Option<DenseArray>,
    pub cluster_vars: Option<DenseArray>,
}

impl SynthDataset {
    pub fn label_spec(&self) -> LabelSpec {
        match self.config.mode {
            SynthMode::Discrete => LabelSpec::discrete(self.config.clusters),
            SynthMode::Continuous => LabelSpec::continuous(1),
        }
    }

    pub fn to_dataset(&self) -> Dataset {
        let mut ds = Dataset::new(self.counts.clone()).with_labels(self.labels.clone(), self.label_spec());
        ds.true_latents = Some(self.latents.clone());
        ds
    }
}

/// Mean and variance of the continuous-mode latent at label `u`.
pub fn continuous_latent_moments(u: f64) -> ([f64; 2], [f64; 2]) {
    let s = u.sin();
    ([u, 2.0 * s], [0.6 - 0.3 * s.abs(), 0.3 * s.abs()])
}

fn poisson_counts(rates: &DenseArray, rng: &mut Rng) -> Result<DenseArray> {
    let mut out = Vec::with_capacity(rates.len());
    for &r in rates.data() {
        let d = Poisson::new(r).map_err(|e| Error::Numeric(format!("Poisson rate {r}: {e}")))?;
        out.push(d.sample(rng));
    }
    Ok(DenseArray::from_raw(rates.shape().to_vec(), out))
}

fn finish(cfg: &SynthConfig, labels: DenseArray, latents: DenseArray, clusters: Option<(DenseArray, DenseArray)>) -> Result<SynthDataset> {
    let generator = GeneratorParams::init(cfg.latent_dim, cfg.obs_dim, cfg.seed)?;
    let rates = synth_decoder_forward(&latents, &generator)?;
    let counts = poisson_counts(&rates, &mut rng_stream(cfg.seed, 13))?;
    let (cluster_means, cluster_vars) = match clusters {
        Some((m, v)) => (Some(m), Some(v)),
        None => (None, None),
    };
    Ok(SynthDataset { config: cfg.clone(), counts, labels, latents, rates, generator, cluster_means, cluster_vars })
}

pub fn simulate_discrete(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    if cfg.mode != SynthMode::Discrete {
        return Err(Error::Config("simulate_discrete needs discrete mode".into()));
    }
    let (k, m) = (cfg.clusters, cfg.latent_dim);
    let mut rng = rng_stream(cfg.seed, 11);
    let means: Vec<f64> = (0..k * m).map(|_| rng.random_range(-5.0..=5.0)).collect();
    let vars: Vec<f64> = (0..k * m).map(|_| rng.random_range(0.5..=3.0)).collect();

    let mut rng = rng_stream(cfg.seed, 12);
    let mut labels = Vec::with_capacity(cfg.samples);
    let mut z = Vec::with_capacity(cfg.samples * m);
    for _ in 0..cfg.samples {
        let c = rng.random_range(0..k);
        labels.push(c as f64);
        for j in 0..m {
            let e: f64 = StandardNormal.sample(&mut rng);
            z.push(means[c * m + j] + vars[c * m + j].sqrt() * e);
        }
    }
    finish(
        cfg,
        DenseArray::from_raw(vec![cfg.samples, 1], labels),
        DenseArray::from_raw(vec![cfg.samples, m], z),
        Some((DenseArray::from_raw(vec![k, m], means), DenseArray::from_raw(vec![k, m], vars))),
    )
}

pub fn simulate_continuous(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    if cfg.mode != SynthMode::Continuous {
        return Err(Error::Config("simulate_continuous needs continuous mode".into()));
    }
    let mut rng = rng_stream(cfg.seed, 12);
    let mut labels = Vec::with_capacity(cfg.samples);
    let mut z = Vec::with_capacity(cfg.samples * 2);
    for _ in 0..cfg.samples {
        let u = rng.random_range(0.0..=TAU);
        labels.push(u);
        let (mean, var) = continuous_latent_moments(u);
        for j in 0..2 {
            let e: f64 = StandardNormal.sample(&mut rng);
            z.push(mean[j] + var[j].sqrt() * e);
        }
    }
    finish(cfg, DenseArray::from_raw(vec![cfg.samples, 1], labels), DenseArray::from_raw(vec![cfg.samples, 2], z), None)
}

pub fn simulate(cfg: &SynthConfig) -> Result<SynthDataset> {
    match cfg.mode {
        SynthMode::Discrete => simulate_discrete(cfg),
        SynthMode::Continuous => simulate_continuous(cfg),
    }
}

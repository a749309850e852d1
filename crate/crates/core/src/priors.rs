//! Label-conditioned latent prior `p(z | u)`.
//!
//! The prior is a diagonal Gaussian, i.e. an exponential family with
//! sufficient statistics `(z, z^2)` (`k = 2`) and natural parameters
//! `(mu / sigma^2, -1 / (2 sigma^2))` per latent dimension. Purely discrete
//! labels index a learned table; anything with a continuous column goes
//! through a small tanh network fed with the continuous values followed by
//! one-hot codes of the discrete columns.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ndmath::{Activation, DenseArray, Graph, MlpParams, NodeId, ParamId, ParamStore};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;
/// Number of sufficient statistics per latent dimension.
pub const SUFFICIENT_STATS: usize = 2;
/// Hidden width of the continuous-label prior network.
pub const PRIOR_HIDDEN: usize = 20;

/// Diagonal Gaussian over the latent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussParams {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussParams {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return shape_err(format!("mean has {} entries, log_var {}", mean.len(), log_var.len()));
        }
        if mean.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::Value("Gaussian parameters must be finite".into()));
        }
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], log_var: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn var(&self) -> Vec<f64> {
        self.log_var.iter().map(|l| l.exp()).collect()
    }

    /// Rows of `mean` and `log_var` matrices (`N x m`), one Gaussian per row.
    pub fn from_rows(mean: &DenseArray, log_var: &DenseArray) -> Vec<GaussParams> {
        (0..mean.rows())
            .map(|i| GaussParams { mean: mean.row_slice(i).to_vec(), log_var: log_var.row_slice(i).to_vec() })
            .collect()
    }
}

/// `sum_i log N(z_i; mean_i, exp(log_var_i))`.
pub fn gauss_log_prob(z: &[f64], g: &GaussParams) -> Result<f64> {
    if z.len() != g.dim() {
        return shape_err(format!("latent has {} entries, Gaussian {}", z.len(), g.dim()));
    }
    Ok(z.iter()
        .zip(&g.mean)
        .zip(&g.log_var)
        .map(|((&x, &mu), &lv)| -0.5 * ((2.0 * PI).ln() + lv + (x - mu).powi(2) / lv.exp()))
        .sum())
}

/// Natural parameters, interleaved per dimension as `(mu/var, -1/(2 var))`.
pub fn natural_params(g: &GaussParams) -> Vec<f64> {
    g.mean
        .iter()
        .zip(g.var())
        .flat_map(|(&mu, v)| [mu / v, -0.5 / v])
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LabelColumn {
    Discrete { classes: usize },
    Continuous,
}

/// Kinds of the label columns, in file order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub columns: Vec<LabelColumn>,
}

impl LabelSpec {
    pub fn new(columns: Vec<LabelColumn>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Config("at least one label column is required".into()));
        }
        for c in &columns {
            if let LabelColumn::Discrete { classes } = c {
                if *classes < 1 {
                    return Err(Error::Config("a discrete label column needs at least one class".into()));
                }
            }
        }
        Ok(Self { columns })
    }

    pub fn discrete(classes: usize) -> Self {
        Self { columns: vec![LabelColumn::Discrete { classes }] }
    }

    pub fn continuous(count: usize) -> Self {
        Self { columns: vec![LabelColumn::Continuous; count] }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn is_discrete_only(&self) -> bool {
        self.columns.iter().all(|c| matches!(c, LabelColumn::Discrete { .. }))
    }

    pub fn continuous_columns(&self) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| matches!(c, LabelColumn::Continuous))
            .map(|(i, _)| i)
            .collect()
    }

    /// `(column, class count)` of every discrete column.
    pub fn discrete_columns(&self) -> Vec<(usize, usize)> {
        self.columns
            .iter()
            .enumerate()
            .filter_map(|(i, c)| match c {
                LabelColumn::Discrete { classes } => Some((i, *classes)),
                LabelColumn::Continuous => None,
            })
            .collect()
    }

    /// Product of the class counts of all discrete columns.
    pub fn class_combinations(&self) -> usize {
        self.discrete_columns().iter().map(|(_, k)| k).product()
    }

    /// Width of the prior-network input: continuous values then one-hot codes.
    pub fn network_input_dim(&self) -> usize {
        self.continuous_columns().len() + self.discrete_columns().iter().map(|(_, k)| k).sum::<usize>()
    }

    pub fn validate_row(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.width() {
            return shape_err(format!("label row has {} entries, expected {}", row.len(), self.width()));
        }
        for (j, (c, &v)) in self.columns.iter().zip(row).enumerate() {
            if !v.is_finite() {
                return Err(Error::Value(format!("non-finite label in column {j}")));
            }
            if let LabelColumn::Discrete { classes } = c {
                if v < 0.0 || v.fract() != 0.0 || v as usize >= *classes {
                    return Err(Error::Label(format!(
                        "class {v} out of range 0..{classes} in column {j}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Mixed-radix index of the discrete part of `row` (first column most significant).
    pub fn combination_index(&self, row: &[f64]) -> usize {
        self.discrete_columns().iter().fold(0, |acc, &(j, k)| acc * k + row[j] as usize)
    }

    /// Discrete label row for a combination index (continuous columns set to 0).
    pub fn combination_row(&self, mut index: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.width()];
        for &(j, k) in self.discrete_columns().iter().rev() {
            row[j] = (index % k) as f64;
            index /= k;
        }
        row
    }

    pub fn network_input(&self, labels: &DenseArray) -> Result<DenseArray> {
        let cont = self.continuous_columns();
        let disc = self.discrete_columns();
        let width = self.network_input_dim();
        let mut out = DenseArray::zeros(&[labels.rows(), width]);
        for i in 0..labels.rows() {
            let row = labels.row_slice(i);
            self.validate_row(row)?;
            let dst = out.row_slice_mut(i);
            for (k, &j) in cont.iter().enumerate() {
                dst[k] = row[j];
            }
            let mut off = cont.len();
            for &(j, classes) in &disc {
                dst[off + row[j] as usize] = 1.0;
                off += classes;
            }
        }
        Ok(out)
    }

    fn table_onehot(&self, labels: &DenseArray) -> Result<DenseArray> {
        let k = self.class_combinations();
        let mut out = DenseArray::zeros(&[labels.rows(), k]);
        for i in 0..labels.rows() {
            let row = labels.row_slice(i);
            self.validate_row(row)?;
            out.set(i, self.combination_index(row), 1.0);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LabelPrior {
    /// One Gaussian per class combination; `mean` and `log_var` are `K x m`.
    Table { spec: LabelSpec, latent_dim: usize, mean: ParamId, log_var: ParamId },
    /// `[mean, log_var]` emitted by a shared tanh network.
    Network { spec: LabelSpec, latent_dim: usize, net: MlpParams },
}

impl LabelPrior {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, spec: &LabelSpec, latent_dim: usize, rng: &mut R) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        if spec.is_discrete_only() {
            let k = spec.class_combinations();
            let mut draw = |n| {
                DenseArray::from_raw(vec![k, latent_dim], (0..n).map(|_| rng.random_range(-0.05..0.05)).collect())
            };
            let mean = store.add("prior.mean", draw(k * latent_dim));
            let log_var = store.add("prior.log_var", draw(k * latent_dim));
            Ok(Self::Table { spec: spec.clone(), latent_dim, mean, log_var })
        } else {
            let dims = [spec.network_input_dim(), PRIOR_HIDDEN, PRIOR_HIDDEN, 2 * latent_dim];
            let net = MlpParams::init(store, "prior.net", &dims, Activation::Tanh, rng)?;
            Ok(Self::Network { spec: spec.clone(), latent_dim, net })
        }
    }

    pub fn spec(&self) -> &LabelSpec {
        match self {
            Self::Table { spec, .. } | Self::Network { spec, .. } => spec,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Self::Table { latent_dim, .. } | Self::Network { latent_dim, .. } => *latent_dim,
        }
    }

    /// Mean and clamped log-variance nodes (`B x m`) for a batch of label rows.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, labels: &DenseArray) -> Result<(NodeId, NodeId)> {
        let (mean, raw_lv) = match self {
            Self::Table { spec, mean, log_var, .. } => {
                let onehot = g.input(spec.table_onehot(labels)?);
                let mt = g.param(store, *mean);
                let lt = g.param(store, *log_var);
                (g.matmul(onehot, mt)?, g.matmul(onehot, lt)?)
            }
            Self::Network { spec, latent_dim, net } => {
                let input = g.input(spec.network_input(labels)?);
                let out = net.forward(g, store, input)?;
                (g.cols(out, 0, *latent_dim)?, g.cols(out, *latent_dim, 2 * latent_dim)?)
            }
        };
        Ok((mean, g.clamp(raw_lv, LOG_VAR_MIN, LOG_VAR_MAX)))
    }

    /// Prior Gaussians for each label row.
    pub fn params_batch(&self, store: &ParamStore, labels: &DenseArray) -> Result<Vec<GaussParams>> {
        let mut g = Graph::inference();
        let (m, lv) = self.forward(&mut g, store, labels)?;
        Ok(GaussParams::from_rows(g.value(m), g.value(lv)))
    }
}

pub fn prior_params(u: &[f64], p: &LabelPrior, store: &ParamStore) -> Result<GaussParams> {
    let row = DenseArray::row(u).map_err(|e| match e {
        Error::Value(m) => Error::Value(format!("label: {m}")),
        other => other,
    })?;
    Ok(p.params_batch(store, &row)?.remove(0))
}

pub fn prior_log_prob(z: &[f64], u: &[f64], p: &LabelPrior, store: &ParamStore) -> Result<f64> {
    if z.len() != p.latent_dim() {
        return shape_err(format!("latent has {} entries, prior {}", z.len(), p.latent_dim()));
    }
    gauss_log_prob(z, &prior_params(u, p, store)?)
}

/// Diagnostic for the invertibility of the natural-parameter difference matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    /// `mk x mk`; column `j - 1` is `lambda(u^j) - lambda(u^0)`.
    pub l_matrix: DenseArray,
    pub determinant: f64,
    pub singular_values: Vec<f64>,
    pub condition_number: f64,
    pub rank: usize,
    pub invertible: bool,
}

/// Relative singular-value cutoff used for the rank decision.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// Builds `L` from the first `mk + 1` probe labels and reports whether it is invertible.
pub fn check_conditions(p: &LabelPrior, store: &ParamStore, probes: &[Vec<f64>]) -> Result<ConditionReport> {
    let m = p.latent_dim();
    let mk = m * SUFFICIENT_STATS;
    if probes.len() < mk + 1 {
        return Err(Error::Argument(format!("need {} probe labels, got {}", mk + 1, probes.len())));
    }
    let probes = &probes[..mk + 1];
    for i in 0..probes.len() {
        for j in 0..i {
            if probes[i] == probes[j] {
                return Err(Error::Argument(format!("probe labels {j} and {i} are identical")));
            }
        }
    }
    let lambdas = probes
        .iter()
        .map(|u| prior_params(u, p, store).map(|g| natural_params(&g)))
        .collect::<Result<Vec<_>>>()?;
    let mut l = DenseArray::zeros(&[mk, mk]);
    for j in 1..=mk {
        for i in 0..mk {
            l.set(i, j - 1, lambdas[j][i] - lambdas[0][i]);
        }
    }
    let mat = DMatrix::from_row_slice(mk, mk, l.data());
    let determinant = mat.clone().lu().determinant();
    let mut sv: Vec<f64> = mat.svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let smax = sv.first().copied().unwrap_or(0.0);
    let smin = sv.last().copied().unwrap_or(0.0);
    let cutoff = RANK_TOLERANCE * smax.max(1.0);
    let rank = sv.iter().filter(|&&s| s > cutoff).count();
    let condition_number = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    Ok(ConditionReport {
        l_matrix: l,
        determinant,
        singular_values: sv,
        condition_number,
        rank,
        invertible: rank == mk,
    })
}

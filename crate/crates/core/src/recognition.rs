//! Recognition model `q(z | x)` and its product with the label prior.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::ndmath::{Activation, DenseArray, Graph, MlpParams, NodeId, ParamStore};
use crate::priors::{GaussParams, LOG_VAR_MAX, LOG_VAR_MIN};

pub const ENCODER_HIDDEN: usize = 60;

/// Separate mean and log-variance networks, each `n -> 60 -> 60 -> m` with tanh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub mean: MlpParams,
    pub log_var: MlpParams,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, obs_dim: usize, latent_dim: usize, rng: &mut R) -> Result<Self> {
        let dims = [obs_dim, ENCODER_HIDDEN, ENCODER_HIDDEN, latent_dim];
        let mean = MlpParams::init(store, "encoder.mean", &dims, Activation::Tanh, rng)?;
        let log_var = MlpParams::init(store, "encoder.log_var", &dims, Activation::Tanh, rng)?;
        Ok(Self { mean, log_var })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<(NodeId, NodeId)> {
        let mean = self.mean.forward(g, store, x)?;
        let lv = self.log_var.forward(g, store, x)?;
        Ok((mean, g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX)))
    }
}

/// Encoder Gaussians for each row of `counts`.
pub fn encode_batch(counts: &DenseArray, p: &EncoderParams, store: &ParamStore) -> Result<Vec<GaussParams>> {
    let mut g = Graph::inference();
    let x = g.input(counts.clone());
    let (m, lv) = p.forward(&mut g, store, x)?;
    Ok(GaussParams::from_rows(g.value(m), g.value(lv)))
}

pub fn encode(x: &[f64], p: &EncoderParams, store: &ParamStore) -> Result<GaussParams> {
    Ok(encode_batch(&DenseArray::row(x)?, p, store)?.remove(0))
}

/// Precision-weighted product of two diagonal Gaussians, as graph nodes.
pub fn posterior_product_nodes(
    g: &mut Graph,
    (m1, lv1): (NodeId, NodeId),
    (m2, lv2): (NodeId, NodeId),
) -> Result<(NodeId, NodeId)> {
    let v1 = g.exp(lv1);
    let v2 = g.exp(lv2);
    let vsum = g.add(v1, v2)?;
    let a = g.mul(m1, v2)?;
    let b = g.mul(m2, v1)?;
    let num = g.add(a, b)?;
    let mean = g.div(num, vsum)?;
    let lsum = g.add(lv1, lv2)?;
    let lvs = g.log(vsum);
    let lv = g.sub(lsum, lvs)?;
    Ok((mean, lv))
}

/// `var = v1 v2 / (v1 + v2)`, `mean = (mu1 v2 + mu2 v1) / (v1 + v2)` per dimension.
pub fn posterior_product(enc: &GaussParams, prior: &GaussParams) -> Result<GaussParams> {
    if enc.dim() != prior.dim() {
        return shape_err(format!("encoder has {} dims, prior {}", enc.dim(), prior.dim()));
    }
    let mut mean = Vec::with_capacity(enc.dim());
    let mut log_var = Vec::with_capacity(enc.dim());
    for i in 0..enc.dim() {
        let (v1, v2) = (enc.log_var[i].exp(), prior.log_var[i].exp());
        mean.push((enc.mean[i] * v2 + prior.mean[i] * v1) / (v1 + v2));
        log_var.push(enc.log_var[i] + prior.log_var[i] - (v1 + v2).ln());
    }
    Ok(GaussParams { mean, log_var })
}

pub fn sample_reparam_nodes(g: &mut Graph, mean: NodeId, log_var: NodeId, eps: NodeId) -> Result<NodeId> {
    let half = g.scale(log_var, 0.5);
    let sd = g.exp(half);
    let noise = g.mul(sd, eps)?;
    g.add(mean, noise)
}

/// `z = mean + exp(log_var / 2) * eps`.
pub fn sample_reparam(g: &GaussParams, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != g.dim() {
        return shape_err(format!("noise has {} entries, Gaussian {}", eps.len(), g.dim()));
    }
    Ok(g.mean
        .iter()
        .zip(&g.log_var)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect())
}

//! Dense arrays, a tape-based reverse-mode differentiation engine, MLPs,
//! the Adam optimizer and finite-difference oracles.

mod adam;
mod array;
mod graph;
mod mlp;
mod numdiff;
mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use array::DenseArray;
pub use graph::{sigmoid, softplus, softplus_inverse, Gradients, Graph, NodeId};
pub use mlp::{mlp_forward, Activation, DenseLayer, MlpParams};
pub use numdiff::{finite_diff_grad, log_abs_det, numeric_jacobian, DEFAULT_STEP};
pub use params::{NamedParam, ParamId, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator used everywhere: ChaCha with 8 rounds.
pub type Rng = ChaCha8Rng;

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// `ln(mean(exp(xs)))`, stabilized.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

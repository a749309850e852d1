//! Affine coupling layers, volume-preserving (GIN) blocks, and the injective
//! decoder mapping an `m`-dimensional latent to `n` Poisson firing rates.
//!
//! A coupling layer keeps the first `l` coordinates and updates the rest:
//!
//! ```text
//! y[..l] = x[..l]
//! y[l..] = x[l..] * exp(s(x[..l])) + t(x[..l])
//! ```
//!
//! `s` and `t` come out of one shared trunk network (first `D - l` outputs are
//! `s`, the remainder `t`). Scale entries are squashed with `0.1 * tanh`. In a
//! volume-preserving coupling the last scale entry is replaced by the negative
//! sum of the others, so `sum(s) = 0` and the Jacobian determinant is 1.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ndmath::{softplus_inverse, Activation, DenseArray, Graph, MlpParams, NodeId, ParamStore};

/// Lower bound applied to decoded firing rates.
pub const RATE_FLOOR: f64 = 1e-7;
/// Bound on the magnitude of squashed scale entries.
pub const SCALE_CLAMP: f64 = 0.1;
/// Maximum pad residual accepted by [`decoder_left_inverse`].
pub const IMAGE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingParams {
    pub dim: usize,
    /// Number of pass-through coordinates `l`, with `1 <= l < dim`.
    pub split: usize,
    /// `R^l -> R^{2(D-l)}`, emitting `s` then `t`.
    pub trunk: MlpParams,
    pub zero_sum_scale: bool,
}

impl CouplingParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        split: usize,
        hidden_width: usize,
        zero_sum_scale: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if split == 0 || split >= dim {
            return Err(Error::Config(format!("coupling split {split} must lie in 1..{dim}")));
        }
        let h = hidden_width.max(1);
        let trunk = MlpParams::init(store, prefix, &[split, h, h, 2 * (dim - split)], Activation::Relu, rng)?;
        Ok(Self { dim, split, trunk, zero_sum_scale })
    }

    fn tail(&self) -> usize {
        self.dim - self.split
    }

    fn check_width(&self, g: &Graph, x: NodeId) -> Result<()> {
        let c = g.value(x).cols();
        if c != self.dim {
            return shape_err(format!("coupling of dimension {} applied to {} columns", self.dim, c));
        }
        Ok(())
    }

    /// Effective (squashed, optionally zero-sum) scale and the translation for conditioning input `head`.
    pub fn scale_shift(&self, g: &mut Graph, store: &ParamStore, head: NodeId) -> Result<(NodeId, NodeId)> {
        let k = self.tail();
        let out = self.trunk.forward(g, store, head)?;
        let t = g.cols(out, k, 2 * k)?;
        let s = if self.zero_sum_scale {
            if k == 1 {
                let rows = g.value(head).rows();
                g.input(DenseArray::zeros(&[rows, 1]))
            } else {
                let free = g.cols(out, 0, k - 1)?;
                let free = g.tanh(free);
                let free = g.scale(free, SCALE_CLAMP);
                let total = g.row_sum(free);
                let last = g.neg(total);
                g.concat(&[free, last])?
            }
        } else {
            let raw = g.cols(out, 0, k)?;
            let sq = g.tanh(raw);
            g.scale(sq, SCALE_CLAMP)
        };
        Ok((s, t))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        self.check_width(g, x)?;
        let head = g.cols(x, 0, self.split)?;
        let tail = g.cols(x, self.split, self.dim)?;
        let (s, t) = self.scale_shift(g, store, head)?;
        let es = g.exp(s);
        let scaled = g.mul(tail, es)?;
        let new_tail = g.add(scaled, t)?;
        g.concat(&[head, new_tail])
    }

    pub fn inverse(&self, g: &mut Graph, store: &ParamStore, y: NodeId) -> Result<NodeId> {
        self.check_width(g, y)?;
        let head = g.cols(y, 0, self.split)?;
        let tail = g.cols(y, self.split, self.dim)?;
        let (s, t) = self.scale_shift(g, store, head)?;
        let shifted = g.sub(tail, t)?;
        let ns = g.neg(s);
        let ens = g.exp(ns);
        let old_tail = g.mul(shifted, ens)?;
        g.concat(&[head, old_tail])
    }
}

fn eval<F>(x: &DenseArray, f: F) -> Result<DenseArray>
where
    F: FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::inference();
    let xn = g.input(x.clone());
    let out = f(&mut g, xn)?;
    Ok(g.value(out).clone())
}

pub fn coupling_forward(x: &DenseArray, p: &CouplingParams, store: &ParamStore) -> Result<DenseArray> {
    eval(x, |g, xn| p.forward(g, store, xn))
}

pub fn coupling_inverse(y: &DenseArray, p: &CouplingParams, store: &ParamStore) -> Result<DenseArray> {
    eval(y, |g, yn| p.inverse(g, store, yn))
}

/// Effective scale vector of a coupling for each row of `x`.
pub fn effective_scale(x: &DenseArray, p: &CouplingParams, store: &ParamStore) -> Result<DenseArray> {
    eval(x, |g, xn| {
        p.check_width(g, xn)?;
        let head = g.cols(xn, 0, p.split)?;
        Ok(p.scale_shift(g, store, head)?.0)
    })
}

/// A fixed permutation followed by two coupling layers.
///
/// After each coupling the updated coordinates are rotated to the front so
/// that the next coupling conditions on them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GinBlockParams {
    pub dim: usize,
    /// Output column `j` takes input column `perm[j]`.
    pub perm: Vec<usize>,
    pub couplings: Vec<CouplingParams>,
}

impl GinBlockParams {
    /// Draws the permutation from `rng`. With `volume_preserving` unset the
    /// couplings are ordinary RealNVP layers.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden_width: usize,
        volume_preserving: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("flow blocks need dimension >= 2, got {dim}")));
        }
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(rng);
        let split = dim / 2;
        let couplings = (0..2)
            .map(|i| {
                CouplingParams::init(store, &format!("{prefix}.coupling{i}"), dim, split, hidden_width, volume_preserving, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, perm, couplings })
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.dim];
        for &p in &self.perm {
            if p >= self.dim || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Format(format!("block permutation {:?} is not a bijection", self.perm)));
            }
        }
        if self.perm.len() != self.dim {
            return Err(Error::Format("block permutation has the wrong length".into()));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut h = g.permute_cols(x, &self.perm)?;
        for c in &self.couplings {
            let y = c.forward(g, store, h)?;
            let head = g.cols(y, 0, c.split)?;
            let tail = g.cols(y, c.split, c.dim)?;
            h = g.concat(&[tail, head])?;
        }
        Ok(h)
    }

    pub fn inverse(&self, g: &mut Graph, store: &ParamStore, y: NodeId) -> Result<NodeId> {
        let mut h = y;
        for c in self.couplings.iter().rev() {
            let k = c.dim - c.split;
            let tail = g.cols(h, 0, k)?;
            let head = g.cols(h, k, c.dim)?;
            let joined = g.concat(&[head, tail])?;
            h = c.inverse(g, store, joined)?;
        }
        let mut inv = vec![0; self.dim];
        for (j, &p) in self.perm.iter().enumerate() {
            inv[p] = j;
        }
        g.permute_cols(h, &inv)
    }
}

pub fn gin_block_forward(x: &DenseArray, p: &GinBlockParams, store: &ParamStore) -> Result<DenseArray> {
    eval(x, |g, xn| p.forward(g, store, xn))
}

pub fn gin_block_inverse(y: &DenseArray, p: &GinBlockParams, store: &ParamStore) -> Result<DenseArray> {
    eval(y, |g, yn| p.inverse(g, store, yn))
}

/// The injective map from latents to firing rates.
///
/// `z` is extended to `(z, t_pad(z))`, passed through the GIN blocks, then
/// through softplus with a floor of [`RATE_FLOOR`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub latent_dim: usize,
    pub obs_dim: usize,
    /// `R^m -> R^{n-m}`.
    pub pad: MlpParams,
    pub blocks: Vec<GinBlockParams>,
    pub rate_floor: f64,
}

/// Hidden width `floor(n / 4)`, clamped to at least 1.
pub fn decoder_hidden_width(n: usize) -> usize {
    (n / 4).max(1)
}

impl DecoderParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, latent_dim: usize, obs_dim: usize, rng: &mut R) -> Result<Self> {
        if latent_dim == 0 || latent_dim >= obs_dim {
            return Err(Error::Config(format!(
                "decoder needs 0 < m < n, got m = {latent_dim}, n = {obs_dim}"
            )));
        }
        let h = decoder_hidden_width(obs_dim);
        let pad = MlpParams::init(store, "decoder.pad", &[latent_dim, h, h, obs_dim - latent_dim], Activation::Relu, rng)?;
        let blocks = (0..2)
            .map(|i| GinBlockParams::init(store, &format!("decoder.gin{i}"), obs_dim, h, true, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { latent_dim, obs_dim, pad, blocks, rate_floor: RATE_FLOOR })
    }

    /// Pre-softplus flow output.
    pub fn flow(&self, g: &mut Graph, store: &ParamStore, z: NodeId) -> Result<NodeId> {
        let c = g.value(z).cols();
        if c != self.latent_dim {
            return shape_err(format!("decoder expects {} latent dims, got {}", self.latent_dim, c));
        }
        let pad = self.pad.forward(g, store, z)?;
        let mut h = g.concat(&[z, pad])?;
        for b in &self.blocks {
            h = b.forward(g, store, h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: NodeId) -> Result<NodeId> {
        let h = self.flow(g, store, z)?;
        let sp = g.softplus(h);
        Ok(g.floor(sp, self.rate_floor))
    }
}

/// Firing rates for each row of `z`.
pub fn decoder_forward(z: &DenseArray, p: &DecoderParams, store: &ParamStore) -> Result<DenseArray> {
    eval(z, |g, zn| p.forward(g, store, zn))
}

/// Recovers the latent that produced `rates` (one row), or reports that the
/// rate vector is not in the decoder's image.
pub fn decoder_left_inverse(rates: &DenseArray, p: &DecoderParams, store: &ParamStore) -> Result<DenseArray> {
    if rates.len() != p.obs_dim {
        return shape_err(format!("expected {} rates, got {}", p.obs_dim, rates.len()));
    }
    if let Some((i, v)) = rates.data().iter().enumerate().find(|(_, &v)| v <= p.rate_floor) {
        return Err(Error::DegenerateInput(format!("rate {i} = {v:e} is at or below the floor")));
    }
    let pre = rates.map(softplus_inverse).as_matrix();
    let mut g = Graph::inference();
    let mut h = g.input(pre);
    for b in p.blocks.iter().rev() {
        h = b.inverse(&mut g, store, h)?;
    }
    let z = g.cols(h, 0, p.latent_dim)?;
    let padded = g.cols(h, p.latent_dim, p.obs_dim)?;
    let expect = p.pad.forward(&mut g, store, z)?;
    let residual = g
        .value(padded)
        .data()
        .iter()
        .zip(g.value(expect).data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if residual > IMAGE_TOLERANCE {
        return Err(Error::NotInImage { residual });
    }
    Ok(g.value(z).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::{log_abs_det, numeric_jacobian, rng_stream, softplus, DEFAULT_STEP};

    fn random_row<R: rand::Rng>(rng: &mut R, d: usize) -> DenseArray {
        DenseArray::row(&(0..d).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>()).unwrap()
    }

    /// Perturbs every parameter so that biases are nonzero too.
    fn jitter(store: &mut ParamStore, seed: u64) {
        let mut rng = rng_stream(seed, 99);
        for p in store.iter_mut() {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }

    #[test]
    fn zero_trunk_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = rng_stream(1, 0);
        let c = CouplingParams::init(&mut store, "c", 5, 2, 3, false, &mut rng).unwrap();
        c.trunk.zero(&mut store);
        let x = random_row(&mut rng, 5);
        assert_eq!(coupling_forward(&x, &c, &store).unwrap(), x);
        assert_eq!(coupling_inverse(&x, &c, &store).unwrap(), x);
    }

    /// D = 2, l = 1, zero-sum scale, t(x1) = x1: y = (x1, x2 + x1).
    fn additive_pair() -> (ParamStore, CouplingParams) {
        let mut store = ParamStore::new();
        let mut rng = rng_stream(2, 0);
        let c = CouplingParams::init(&mut store, "c", 2, 1, 1, true, &mut rng).unwrap();
        c.trunk.zero(&mut store);
        // hidden relu units pass x1 >= 0 and -x1 through a second hidden layer that copies them
        let l = &c.trunk.layers;
        store.set(l[0].weight, DenseArray::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        store.set(l[1].weight, DenseArray::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        store.set(l[2].weight, DenseArray::matrix(1, 2, vec![5.0, 1.0]).unwrap()).unwrap();
        (store, c)
    }

    #[test]
    fn two_dim_additive_coupling_by_hand() {
        let (store, c) = additive_pair();
        // relu chain means t(x1) = x1 for x1 >= 0
        let x = DenseArray::row(&[0.7, -1.3]).unwrap();
        let y = coupling_forward(&x, &c, &store).unwrap();
        assert!((y.data()[0] - 0.7).abs() < 1e-15);
        assert!((y.data()[1] - (-1.3 + 0.7)).abs() < 1e-15);
        let back = coupling_inverse(&y, &c, &store).unwrap();
        assert!((back.data()[1] - (y.data()[1] - y.data()[0])).abs() < 1e-15);
        // raw scale output 5 * x1 is ignored: the single scale entry is forced to zero
        assert_eq!(effective_scale(&x, &c, &store).unwrap().data(), &[0.0]);
    }

    #[test]
    fn coupling_roundtrip_random() {
        for seed in 0..20u64 {
            let mut rng = rng_stream(seed, 1);
            let d = 2 + (seed as usize % 9);
            let mut store = ParamStore::new();
            let c = CouplingParams::init(&mut store, "c", d, d / 2, 4, seed % 2 == 0, &mut rng).unwrap();
            jitter(&mut store, seed);
            let x = random_row(&mut rng, d);
            let back = coupling_inverse(&coupling_forward(&x, &c, &store).unwrap(), &c, &store).unwrap();
            for (a, b) in back.data().iter().zip(x.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn coupling_rejects_wrong_width() {
        let (store, c) = additive_pair();
        let x = DenseArray::row(&[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(coupling_forward(&x, &c, &store), Err(Error::Shape(_))));
    }

    #[test]
    fn two_dim_gin_block_is_exactly_volume_preserving() {
        let mut store = ParamStore::new();
        let mut rng = rng_stream(3, 0);
        let b = GinBlockParams::init(&mut store, "b", 2, 1, true, &mut rng).unwrap();
        jitter(&mut store, 3);
        for c in &b.couplings {
            let x = random_row(&mut rng, 2);
            assert_eq!(effective_scale(&x, c, &store).unwrap().data(), &[0.0]);
        }
        let x = DenseArray::vector(vec![0.4, -0.9]).unwrap();
        let f = |v: &DenseArray| gin_block_forward(v, &b, &store).unwrap();
        let j = numeric_jacobian(f, &x, DEFAULT_STEP).unwrap();
        assert!(log_abs_det(&j).unwrap().abs() < 1e-9);
    }

    #[test]
    fn gin_block_deterministic_and_invertible() {
        let mut store = ParamStore::new();
        let mut rng = rng_stream(4, 0);
        let b = GinBlockParams::init(&mut store, "b", 7, 3, true, &mut rng).unwrap();
        b.validate().unwrap();
        jitter(&mut store, 4);
        let x = random_row(&mut rng, 7);
        let y1 = gin_block_forward(&x, &b, &store).unwrap();
        let y2 = gin_block_forward(&x, &b, &store).unwrap();
        assert_eq!(y1, y2);
        let back = gin_block_inverse(&y1, &b, &store).unwrap();
        for (a, c) in back.data().iter().zip(x.data()) {
            assert!((a - c).abs() < 1e-10);
        }
    }

    #[test]
    fn gin_block_log_det_six_dims() {
        let mut store = ParamStore::new();
        let mut rng = rng_stream(5, 0);
        let b = GinBlockParams::init(&mut store, "b", 6, 3, true, &mut rng).unwrap();
        jitter(&mut store, 5);
        let x = random_row(&mut rng, 6).reshape(vec![6]).unwrap();
        let j = numeric_jacobian(|v| gin_block_forward(v, &b, &store).unwrap(), &x, DEFAULT_STEP).unwrap();
        assert!(log_abs_det(&j).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn zero_sum_and_clamp_on_effective_scale() {
        let mut store = ParamStore::new();
        let mut rng = rng_stream(6, 0);
        let c = CouplingParams::init(&mut store, "c", 11, 5, 4, true, &mut rng).unwrap();
        jitter(&mut store, 6);
        for _ in 0..50 {
            let x = random_row(&mut rng, 11).map(|v| 5.0 * v);
            let s = effective_scale(&x, &c, &store).unwrap();
            assert!(s.sum().abs() <= 1e-12);
            let k = s.len() - 1;
            assert!(s.data()[..k].iter().all(|v| v.abs() < SCALE_CLAMP));
            // completion entry is bounded by the number of free entries
            assert!(s.data()[k].abs() < SCALE_CLAMP * k as f64);
        }
    }

    fn zero_decoder(m: usize, n: usize) -> (ParamStore, DecoderParams) {
        let mut store = ParamStore::new();
        let mut rng = rng_stream(8, 0);
        let d = DecoderParams::init(&mut store, m, n, &mut rng).unwrap();
        for p in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        (store, d)
    }

    #[test]
    fn zero_decoder_is_softplus_of_permuted_padding() {
        let (store, d) = zero_decoder(2, 4);
        let z = [0.8, -1.7];
        // hand evaluation: each block permutes, then each coupling rotates the halves (l = 2)
        let mut v = vec![z[0], z[1], 0.0, 0.0];
        for b in &d.blocks {
            v = b.perm.iter().map(|&p| v[p]).collect();
            for _ in &b.couplings {
                v = [&v[2..], &v[..2]].concat();
            }
        }
        let expect: Vec<f64> = v.iter().map(|&x| softplus(x).max(RATE_FLOOR)).collect();
        let rates = decoder_forward(&DenseArray::row(&z).unwrap(), &d, &store).unwrap();
        for (a, b) in rates.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rates_positive_and_left_inverse_roundtrip() {
        let mut store = ParamStore::new();
        let mut rng = rng_stream(9, 0);
        let d = DecoderParams::init(&mut store, 2, 10, &mut rng).unwrap();
        jitter(&mut store, 9);
        for _ in 0..20 {
            let z = random_row(&mut rng, 2);
            let rates = decoder_forward(&z, &d, &store).unwrap();
            assert!(rates.data().iter().all(|&r| r > 0.0));
            let back = decoder_left_inverse(&rates, &d, &store).unwrap();
            for (a, b) in back.data().iter().zip(z.data()) {
                assert!((a - b).abs() <= 1e-6);
            }
            let mut bad = rates.clone();
            bad.data_mut()[3] += 1.0;
            assert!(matches!(decoder_left_inverse(&bad, &d, &store), Err(Error::NotInImage { .. })));
        }
    }

    #[test]
    fn left_inverse_rejects_floor_rates() {
        let (store, d) = zero_decoder(2, 4);
        let r = DenseArray::row(&[1.0, RATE_FLOOR, 0.5, 0.2]).unwrap();
        assert!(matches!(decoder_left_inverse(&r, &d, &store), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn decoder_rejects_bad_dims() {
        let mut store = ParamStore::new();
        let mut rng = rng_stream(0, 0);
        assert!(matches!(DecoderParams::init(&mut store, 4, 4, &mut rng), Err(Error::Config(_))));
        assert!(matches!(DecoderParams::init(&mut store, 0, 4, &mut rng), Err(Error::Config(_))));
        assert_eq!(decoder_hidden_width(3), 1);
    }
}

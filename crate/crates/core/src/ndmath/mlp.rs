use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DenseArray, Graph, NodeId, ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `in x out` weight matrix; the layer computes `x W + b`.
    pub weight: ParamId,
    /// `1 x out` bias row.
    pub bias: ParamId,
    pub activation: Activation,
}

/// Feed-forward network whose last layer is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub dims: Vec<usize>,
    pub layers: Vec<DenseLayer>,
}

impl MlpParams {
    /// Glorot-uniform weights and zero biases. `dims` lists every layer width
    /// from input to output; every hidden layer uses `hidden`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        hidden: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!("{prefix}: an MLP needs at least input and output widths")));
        }
        if dims.contains(&0) {
            return Err(Error::Config(format!("{prefix}: zero-width layer in {dims:?}")));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            let weight = store.add(format!("{prefix}.{i}.weight"), DenseArray::from_raw(vec![fan_in, fan_out], data));
            let bias = store.add(format!("{prefix}.{i}.bias"), DenseArray::zeros(&[1, fan_out]));
            let activation = if i + 2 == dims.len() { Activation::Linear } else { hidden };
            layers.push(DenseLayer { weight, bias, activation });
        }
        Ok(Self { dims: dims.to_vec(), layers })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Checks the layer chain against the stored arrays.
    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        if self.layers.len() + 1 != self.dims.len() {
            return shape_err("layer count does not match dims");
        }
        for (i, l) in self.layers.iter().enumerate() {
            let w = store.get(l.weight);
            let b = store.get(l.bias);
            if w.shape() != [self.dims[i], self.dims[i + 1]] || b.shape() != [1, self.dims[i + 1]] {
                return shape_err(format!("layer {i} shapes {:?}/{:?} break the chain {:?}", w.shape(), b.shape(), self.dims));
            }
        }
        if self.layers.last().map(|l| l.activation) != Some(Activation::Linear) {
            return Err(Error::Config("final MLP layer must be linear".into()));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let xin = g.value(x).cols();
        if xin != self.input_dim() {
            return shape_err(format!("MLP expects {} inputs, got {}", self.input_dim(), xin));
        }
        let mut h = x;
        for layer in &self.layers {
            let w = g.param(store, layer.weight);
            let b = g.param(store, layer.bias);
            let z = g.matmul(h, w)?;
            let z = g.add_bias(z, b)?;
            h = match layer.activation {
                Activation::Relu => g.relu(z),
                Activation::Tanh => g.tanh(z),
                Activation::Linear => z,
            };
        }
        Ok(h)
    }

    /// Sets every weight and bias of the network to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        for l in &self.layers {
            store.get_mut(l.weight).data_mut().fill(0.0);
            store.get_mut(l.bias).data_mut().fill(0.0);
        }
    }
}

/// Forward pass over the rows of `x` without recording gradients.
pub fn mlp_forward(x: &DenseArray, p: &MlpParams, store: &ParamStore) -> Result<DenseArray> {
    let mut g = Graph::inference();
    let xn = g.input(x.clone());
    let out = p.forward(&mut g, store, xn)?;
    Ok(g.value(out).clone())
}

//! Affine layers and shared pointwise MLPs.

use rand::Rng;

use crate::tensor::{Graph, ParamId, ParamStore, Real, Result, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

/// `x·W + b` applied along the last axis; `W` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), &[out_dim], in_dim, rng)?;
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Stack of [`Linear`] layers, each followed by its activation. Rows are
/// transformed independently, so the same weights are shared by every point.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(Linear, Activation)>,
}

impl Mlp {
    /// Builds layers of the given output widths. Hidden layers use ReLU; the
    /// last layer uses `last`.
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        widths: &[usize],
        last: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(TensorError::Contract(format!("MLP `{name}` has no layers")));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            let act = if i + 1 == widths.len() { last } else { Activation::Relu };
            layers.push((Linear::new(store, &format!("{name}.{i}"), d, w, rng)?, act));
            d = w;
        }
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<(Linear, Activation)>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].0.out_dim != pair[1].0.in_dim {
                return Err(TensorError::Dimension(format!(
                    "MLP layer widths do not chain: {} -> {}",
                    pair[0].0.out_dim, pair[1].0.in_dim
                )));
            }
        }
        if layers.is_empty() {
            return Err(TensorError::Contract("MLP has no layers".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[(Linear, Activation)] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].0.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].0.out_dim
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let d = g.value(x).last_dim();
        if d != self.in_dim() {
            return Err(TensorError::Dimension(format!(
                "MLP expects width {}, got {d}",
                self.in_dim()
            )));
        }
        let mut h = x;
        for (layer, act) in &self.layers {
            h = layer.forward(g, h)?;
            if *act == Activation::Relu {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

//! Resolution embedding: a set-abstraction branch and a spatial-split branch
//! fused by a two-way softmax attention.
//!
//! Given per-seed features `h` of shape `[m, d]`:
//!
//! * the feature block runs one more set abstraction over `ceil(m/2)` seeds
//!   re-sampled from `h`'s seeds, giving `n`;
//! * the resolution block splits the rows of `h` into two contiguous halves
//!   (seed order from FPS), concatenates them along channels into
//!   `g: [m/2, 2d]` and maps it through an MLP `f`, giving `k`;
//! * the fusion computes `[a1, a2] = softmax(γ(k ∥ n))` per row and returns
//!   `a1·k + a2·n`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::point_ops::{ball_query, fps, set_abstraction, FeatureMap, NeighborhoodGrouping};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ReConfig {
    /// Widths of the feature block's set-abstraction MLP.
    pub feature_mlp: Vec<usize>,
    pub feature_radius: f64,
    pub feature_k: usize,
    /// Widths of the resolution block's MLP `f`.
    pub resolution_mlp: Vec<usize>,
    /// Hidden width of the two-layer fusion MLP `γ`; `None` uses the output width.
    pub gamma_hidden: Option<usize>,
}

impl ReConfig {
    pub fn output_dim(&self) -> usize {
        *self.feature_mlp.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_mlp.is_empty() || self.resolution_mlp.is_empty() {
            return Err(Error::Config("resolution embedding MLPs need at least one layer".into()));
        }
        if self.feature_mlp.last() != self.resolution_mlp.last() {
            return Err(Error::Config(format!(
                "feature block width {} differs from resolution block width {}",
                self.output_dim(),
                self.resolution_mlp.last().unwrap()
            )));
        }
        if !(self.feature_radius > 0.0) || self.feature_k == 0 {
            return Err(Error::Config("feature block radius and k must be positive".into()));
        }
        Ok(())
    }
}

/// Intermediate values of one resolution-embedding pass.
#[derive(Clone, Debug)]
pub struct ReState {
    /// Feature-block output `[m', d']`.
    pub n_feat: Var,
    /// Resolution-block output `[m', d']`.
    pub k_feat: Var,
    /// `[m', 2]` softmax fusion weights `[a1, a2]`.
    pub fusion_weights: Var,
}

#[derive(Clone, Debug)]
pub struct ReModule {
    pub cfg: ReConfig,
    pub in_dim: usize,
    feature_mlp: Mlp,
    f: Mlp,
    gamma: Mlp,
}

impl ReModule {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        cfg: ReConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.output_dim();
        let feature_mlp = Mlp::new(store, &format!("{name}.feature"), in_dim + 3, &cfg.feature_mlp, Activation::Relu, rng)?;
        let f = Mlp::new(store, &format!("{name}.resolution"), 2 * in_dim, &cfg.resolution_mlp, Activation::Relu, rng)?;
        let hidden = cfg.gamma_hidden.unwrap_or(out);
        let gamma = Mlp::new(store, &format!("{name}.gamma"), 2 * out, &[hidden, 2], Activation::Identity, rng)?;
        Ok(Self { cfg, in_dim, feature_mlp, f, gamma })
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.output_dim()
    }

    pub fn feature_mlp(&self) -> &Mlp {
        &self.feature_mlp
    }

    pub fn resolution_mlp(&self) -> &Mlp {
        &self.f
    }

    pub fn gamma(&self) -> &Mlp {
        &self.gamma
    }

    /// Number of output seeds for `m` input seeds.
    pub fn output_seeds(m: usize) -> usize {
        m.div_ceil(2)
    }

    /// Feature-block neighbourhoods over the input seed coordinates.
    pub fn grouping(&self, coords: &Tensor<f64>) -> Result<NeighborhoodGrouping> {
        let m = coords.shape()[0];
        let seeds = fps(coords, Self::output_seeds(m), 0)?;
        ball_query(&seeds, coords, self.cfg.feature_radius, self.cfg.feature_k)
    }

    /// Set abstraction over `h`, giving `n: [m', d']`.
    pub fn feature_block<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        h: &FeatureMap,
        grouping: &NeighborhoodGrouping,
    ) -> Result<Var> {
        let out = set_abstraction(g, Some(h.feats), &h.seed_coords, grouping, &self.feature_mlp, h.frame_index)?;
        Ok(out.feats)
    }

    /// Split-and-concatenate branch, giving `k: [m', d']`.
    ///
    /// An odd number of rows is padded by repeating the last row.
    pub fn resolution_block<F: Real>(&self, g: &mut Graph<'_, F>, h: Var) -> Result<Var> {
        let gv = self.split_concat(g, h)?;
        Ok(self.f.forward(g, gv)?)
    }

    /// The `g = concat(h[..m/2], h[m/2..])` rearrangement on its own.
    pub fn split_concat<F: Real>(&self, g: &mut Graph<'_, F>, h: Var) -> Result<Var> {
        let shape = g.shape(h).to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::dimension(format!(
                "resolution block expects [m, {}], got {shape:?}",
                self.in_dim
            )));
        }
        let m = shape[0];
        if m == 0 {
            return Err(Error::contract("resolution block needs at least one seed"));
        }
        let h = if m % 2 == 1 {
            let last = g.slice(h, 0, m - 1, 1)?;
            g.concat(&[h, last], 0)?
        } else {
            h
        };
        let half = Self::output_seeds(m);
        let parts = g.split(h, 0, &[half, half])?;
        Ok(g.concat(&parts, 1)?)
    }

    /// Attention-weighted fusion `a1·k + a2·n`; returns the fused features
    /// and the `[m', 2]` weights.
    pub fn fuse<F: Real>(&self, g: &mut Graph<'_, F>, k: Var, n: Var) -> Result<(Var, Var)> {
        if g.shape(k) != g.shape(n) {
            return Err(Error::dimension(format!(
                "fusion branches differ in shape: {:?} vs {:?}",
                g.shape(k),
                g.shape(n)
            )));
        }
        let rows = g.shape(k)[0];
        let kn = g.concat(&[k, n], 1)?;
        let logits = self.gamma.forward(g, kn)?;
        let weights = g.softmax_rows(logits)?;
        let a = g.split(weights, 1, &[1, 1])?;
        debug_assert_eq!(g.shape(a[0]), &[rows, 1]);
        let wk = g.mul(a[0], k)?;
        let wn = g.mul(a[1], n)?;
        Ok((g.add(wk, wn)?, weights))
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        h: &FeatureMap,
        grouping: &NeighborhoodGrouping,
    ) -> Result<(FeatureMap, ReState)> {
        let n_feat = self.feature_block(g, h, grouping)?;
        let k_feat = self.resolution_block(g, h.feats)?;
        if g.shape(n_feat)[0] != g.shape(k_feat)[0] {
            return Err(Error::contract(format!(
                "feature block produced {} seeds, resolution block {}",
                g.shape(n_feat)[0],
                g.shape(k_feat)[0]
            )));
        }
        let (fused, fusion_weights) = self.fuse(g, k_feat, n_feat)?;
        let out = FeatureMap {
            seed_coords: grouping.seeds.coords.clone(),
            feats: fused,
            frame_index: h.frame_index,
        };
        Ok((out, ReState { n_feat, k_feat, fusion_weights }))
    }
}

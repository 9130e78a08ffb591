//! Encoder–decoder network for point-wise segmentation of sequences.
//!
//! Per frame: set-abstraction stack, optional resolution embedding, then the
//! top-level features of all frames are mixed by spatio-temporal attention
//! (optional) and propagated back down to every input point with skip
//! connections before a point-wise linear classifier.

use rand::Rng;

use super::encoder::{validate_stages, Encoder, EncoderGeometry, EncoderStage};
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp};
use crate::point_ops::{IdwWeights, NeighborhoodGrouping, PointCloudSequence};
use crate::re::{ReConfig, ReModule, ReState};
use crate::stsa::{patch_division, stsa_forward, tokens_to_frames, AttentionTrace, StsaConfig, StsaParams};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// Number of nearest coarse seeds used by feature propagation.
pub const FP_NEIGHBORS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SegNetConfig {
    pub stages: Vec<EncoderStage>,
    pub re: ReConfig,
    pub stsa_dim: usize,
    pub window: usize,
    pub stride: usize,
    /// Decoder stage that brings resolution-embedding features back onto the
    /// top encoder seeds. Only built when `use_re` is set.
    pub re_fp_mlp: Vec<usize>,
    /// One decoder MLP per encoder stage, coarsest first; the last one
    /// produces per-point features.
    pub fp_mlps: Vec<Vec<usize>>,
    pub num_classes: usize,
    pub use_re: bool,
    pub use_stsa: bool,
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        validate_stages(&self.stages)?;
        if self.fp_mlps.len() != self.stages.len() {
            return Err(Error::Config(format!(
                "{} decoder stages for {} encoder stages",
                self.fp_mlps.len(),
                self.stages.len()
            )));
        }
        if self.fp_mlps.iter().any(|m| m.is_empty() || m.contains(&0)) {
            return Err(Error::Config("decoder MLPs need non-zero widths".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.use_re {
            self.re.validate()?;
            if self.re_fp_mlp.is_empty() || self.re_fp_mlp.contains(&0) {
                return Err(Error::Config("resolution-embedding decoder MLP is empty".into()));
            }
        }
        if self.use_stsa && (self.stsa_dim == 0 || self.window == 0 || self.stride == 0) {
            return Err(Error::Config("attention width, window and stride must be positive".into()));
        }
        if self.use_stsa && self.stride > self.window {
            return Err(Error::Config("stride larger than the window leaves frames without tokens".into()));
        }
        Ok(())
    }
}

/// Everything about a sequence that depends only on coordinates; computed
/// once and reused across training steps.
#[derive(Clone, Debug)]
pub struct SegGeometry {
    pub encoder: EncoderGeometry,
    pub re_grouping: Option<NeighborhoodGrouping>,
    /// Resolution-embedding seeds onto top encoder seeds.
    pub re_up: Option<IdwWeights>,
    /// `level_up[l]`: stage `l + 1` seeds onto stage `l` seeds.
    pub level_up: Vec<IdwWeights>,
    /// First-stage seeds onto each frame's points.
    pub point_up: Vec<IdwWeights>,
    pub points_per_frame: usize,
}

/// Graph outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct SegOutput {
    /// `[T·n, C]` logits, frame-major.
    pub logits: Var,
    pub frames: usize,
    pub points: usize,
    pub re: Vec<ReState>,
    pub attention: Option<AttentionTrace>,
}

/// Detached prediction for a whole sequence.
#[derive(Clone, Debug)]
pub struct SegPrediction {
    /// `[T, n, C]`.
    pub logits: Tensor<f32>,
    /// Arg-max class per point, frame-major.
    pub labels: Vec<u16>,
}

#[derive(Clone, Debug)]
pub struct SegNet {
    pub cfg: SegNetConfig,
    encoder: Encoder,
    re: Option<ReModule>,
    stsa: Option<StsaParams>,
    re_fp: Option<Mlp>,
    fp: Vec<Mlp>,
    head: Linear,
}

impl SegNet {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        cfg: &SegNetConfig,
        feat_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(store, "seg.enc", feat_width, &cfg.stages, rng)?;
        let widths: Vec<usize> = cfg.stages.iter().map(|s| s.out_dim()).collect();
        let top = encoder.out_dim();
        let re = if cfg.use_re {
            Some(ReModule::new(store, "seg.re", top, cfg.re.clone(), rng)?)
        } else {
            None
        };
        let mut coarse = re.as_ref().map_or(top, |r| r.output_dim());
        let stsa = if cfg.use_stsa {
            let sc = StsaConfig::new(coarse, cfg.stsa_dim, cfg.window, cfg.stride);
            coarse = cfg.stsa_dim;
            Some(StsaParams::new(store, "seg.stsa", sc, rng)?)
        } else {
            None
        };
        let re_fp = if cfg.use_re {
            let m = Mlp::new(store, "seg.fp_re", coarse + top, &cfg.re_fp_mlp, Activation::Relu, rng)?;
            coarse = m.out_dim();
            Some(m)
        } else {
            None
        };
        let levels = widths.len();
        let mut fp = Vec::with_capacity(levels);
        for (i, mlp) in cfg.fp_mlps.iter().enumerate() {
            let skip = if i + 1 < levels { widths[levels - 2 - i] } else { feat_width };
            let m = Mlp::new(store, &format!("seg.fp{i}"), coarse + skip, mlp, Activation::Relu, rng)?;
            coarse = m.out_dim();
            fp.push(m);
        }
        let head = Linear::new(store, "seg.head", coarse, cfg.num_classes, rng)?;
        Ok(Self { cfg: cfg.clone(), encoder, re, stsa, re_fp, fp, head })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn prepare(&self, seq: &PointCloudSequence) -> Result<SegGeometry> {
        let n = seq.frames.first().map_or(0, |f| f.len());
        if seq.frames.iter().any(|f| f.len() != n) {
            return Err(Error::contract("segmentation needs the same number of points in every frame"));
        }
        if self.cfg.use_stsa {
            let sc = &self.stsa.as_ref().unwrap().cfg;
            let t = seq.len();
            if t < sc.window || (t - sc.window) % sc.stride != 0 {
                return Err(Error::Config(format!(
                    "window {} with stride {} does not tile {t} frames",
                    sc.window, sc.stride
                )));
            }
        }
        let encoder = self.encoder.geometry(seq)?;
        let levels = encoder.level_coords.len();
        let top = &encoder.level_coords[levels - 1];
        let (re_grouping, re_up) = match &self.re {
            Some(re) => {
                let grouping = re.grouping(top)?;
                let up = IdwWeights::new(top, &grouping.seeds.coords, FP_NEIGHBORS)?;
                (Some(grouping), Some(up))
            }
            None => (None, None),
        };
        let level_up = (0..levels - 1)
            .map(|l| IdwWeights::new(&encoder.level_coords[l], &encoder.level_coords[l + 1], FP_NEIGHBORS))
            .collect::<Result<Vec<_>>>()?;
        let point_up = encoder
            .frame_coords
            .iter()
            .map(|c| IdwWeights::new(c, &encoder.level_coords[0], FP_NEIGHBORS))
            .collect::<Result<Vec<_>>>()?;
        Ok(SegGeometry { encoder, re_grouping, re_up, level_up, point_up, points_per_frame: n })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, seq: &PointCloudSequence, geom: &SegGeometry) -> Result<SegOutput> {
        let enc = self.encoder.forward(g, seq, &geom.encoder)?;
        let frames = seq.len();
        let levels = self.cfg.stages.len();
        let mut top: Vec<Var> = enc.iter().map(|maps| maps[levels - 1].feats).collect();

        let mut re_states = Vec::new();
        if let Some(re) = &self.re {
            let grouping = geom.re_grouping.as_ref().ok_or_else(|| Error::contract("geometry lacks RE grouping"))?;
            for (t, maps) in enc.iter().enumerate() {
                let (fm, state) = re.forward(g, &maps[levels - 1], grouping)?;
                top[t] = fm.feats;
                re_states.push(state);
            }
        }

        let mut attention = None;
        if let Some(stsa) = &self.stsa {
            let patches = patch_division(g, &top, stsa)?;
            let (out, trace) = stsa_forward(g, &patches, stsa)?;
            for (t, v) in tokens_to_frames(g, out, &patches)?.into_iter().enumerate() {
                top[t] = v.ok_or_else(|| Error::Config(format!("frame {t} is not covered by any window")))?;
            }
            attention = Some(trace);
        }

        let mut per_frame = Vec::with_capacity(frames);
        for (t, maps) in enc.iter().enumerate() {
            let mut x = top[t];
            if let (Some(mlp), Some(up)) = (&self.re_fp, &geom.re_up) {
                let lifted = up.apply(g, x)?;
                let cat = g.concat(&[lifted, maps[levels - 1].feats], 1)?;
                x = mlp.forward(g, cat)?;
            }
            for (i, mlp) in self.fp.iter().enumerate() {
                let (weights, skip) = if i + 1 < levels {
                    let l = levels - 2 - i;
                    (&geom.level_up[l], Some(maps[l].feats))
                } else {
                    (&geom.point_up[t], self.encoder.point_feats(g, seq, t)?)
                };
                let lifted = weights.apply(g, x)?;
                let cat = match skip {
                    Some(s) => g.concat(&[lifted, s], 1)?,
                    None => lifted,
                };
                x = mlp.forward(g, cat)?;
            }
            per_frame.push(self.head.forward(g, x)?);
        }
        let logits = if per_frame.len() == 1 { per_frame[0] } else { g.concat(&per_frame, 0)? };
        Ok(SegOutput { logits, frames, points: geom.points_per_frame, re: re_states, attention })
    }

    /// Forward pass without gradients.
    pub fn predict<F: Real>(&self, store: &ParamStore<F>, seq: &PointCloudSequence, geom: &SegGeometry) -> Result<SegPrediction> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, seq, geom)?;
        let logits = g.value(out.logits);
        let c = self.cfg.num_classes;
        let labels = logits.rows().map(|r| argmax(r) as u16).collect();
        let data = logits.data().iter().map(|x| x.as_f64() as f32).collect();
        Ok(SegPrediction { logits: Tensor::new([out.frames, out.points, c], data)?, labels })
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

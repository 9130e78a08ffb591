//! Per-frame set-abstraction stack over temporally aligned seeds.
//!
//! First-stage seeds are sampled once, from the first frame, and every frame
//! groups its own points around those seed locations. Deeper stages sample
//! and group the (shared) seed locations of the stage below, so all frames of
//! a sequence end up with features on identical seed sets.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::point_ops::{ball_query, fps, set_abstraction, FeatureMap, NeighborhoodGrouping, PointCloudSequence};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStage {
    /// Seeds sampled at this stage.
    pub points: usize,
    pub radius: f64,
    pub k: usize,
    pub mlp: Vec<usize>,
}

impl EncoderStage {
    pub fn out_dim(&self) -> usize {
        *self.mlp.last().unwrap_or(&0)
    }
}

pub(crate) fn validate_stages(stages: &[EncoderStage]) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::Config("encoder needs at least one stage".into()));
    }
    for (i, s) in stages.iter().enumerate() {
        if s.points == 0 || s.k == 0 || s.mlp.is_empty() || s.mlp.contains(&0) || !(s.radius > 0.0) {
            return Err(Error::Config(format!("encoder stage {i} has an empty size, width or radius")));
        }
    }
    if stages.windows(2).any(|w| w[1].points >= w[0].points) {
        return Err(Error::Config("encoder seed counts must be strictly decreasing".into()));
    }
    Ok(())
}

/// Sampling and grouping of one sequence; depends only on coordinates.
#[derive(Clone, Debug)]
pub struct EncoderGeometry {
    pub frame_coords: Vec<Tensor<f64>>,
    /// Seed coordinates per stage, shared by all frames.
    pub level_coords: Vec<Tensor<f64>>,
    /// First-stage grouping per frame.
    pub first: Vec<NeighborhoodGrouping>,
    /// Groupings of stages `1..`, shared by all frames.
    pub shared: Vec<NeighborhoodGrouping>,
}

impl EncoderGeometry {
    pub fn frames(&self) -> usize {
        self.frame_coords.len()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<EncoderStage>,
    mlps: Vec<Mlp>,
    in_feats: usize,
}

impl Encoder {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_feats: usize,
        stages: &[EncoderStage],
        rng: &mut R,
    ) -> Result<Self> {
        validate_stages(stages)?;
        let mut mlps = Vec::with_capacity(stages.len());
        let mut d = in_feats;
        for (i, s) in stages.iter().enumerate() {
            mlps.push(Mlp::new(store, &format!("{name}.sa{i}"), d + 3, &s.mlp, Activation::Relu, rng)?);
            d = s.out_dim();
        }
        Ok(Self { stages: stages.to_vec(), mlps, in_feats })
    }

    pub fn stages(&self) -> &[EncoderStage] {
        &self.stages
    }

    pub fn in_feats(&self) -> usize {
        self.in_feats
    }

    pub fn out_dim(&self) -> usize {
        self.stages[self.stages.len() - 1].out_dim()
    }

    pub fn geometry(&self, seq: &PointCloudSequence) -> Result<EncoderGeometry> {
        seq.validate()?;
        if seq.is_empty() {
            return Err(Error::contract("sequence has no frames"));
        }
        if seq.feat_width() != self.in_feats {
            return Err(Error::Config(format!(
                "network expects {} point features, sequence has {}",
                self.in_feats,
                seq.feat_width()
            )));
        }
        let first_stage = &self.stages[0];
        for (t, f) in seq.frames.iter().enumerate() {
            if f.len() < first_stage.points {
                return Err(Error::contract(format!(
                    "frame {t} has {} points, fewer than the {} first-stage seeds",
                    f.len(),
                    first_stage.points
                )));
            }
        }
        let frame_coords: Vec<Tensor<f64>> = seq.frames.iter().map(|f| f.coords_f64()).collect();
        let seeds = fps(&frame_coords[0], first_stage.points, 0)?;
        let first = frame_coords
            .iter()
            .map(|c| ball_query(&seeds, c, first_stage.radius, first_stage.k))
            .collect::<Result<Vec<_>>>()?;
        let mut level_coords = vec![seeds.coords.clone()];
        let mut shared = Vec::new();
        for s in &self.stages[1..] {
            let below = level_coords.last().unwrap();
            let seeds = fps(below, s.points, 0)?;
            let grouping = ball_query(&seeds, below, s.radius, s.k)?;
            level_coords.push(seeds.coords.clone());
            shared.push(grouping);
        }
        Ok(EncoderGeometry { frame_coords, level_coords, first, shared })
    }

    /// Raw point features of frame `t` as a graph constant, or `None` when
    /// points carry no features.
    pub fn point_feats<F: Real>(&self, g: &mut Graph<'_, F>, seq: &PointCloudSequence, t: usize) -> Result<Option<Var>> {
        if self.in_feats == 0 {
            return Ok(None);
        }
        Ok(Some(g.constant(seq.frames[t].feats.cast())?))
    }

    /// Feature maps indexed `[frame][stage]`.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        seq: &PointCloudSequence,
        geom: &EncoderGeometry,
    ) -> Result<Vec<Vec<FeatureMap>>> {
        if geom.frames() != seq.len() {
            return Err(Error::contract("geometry was prepared for a different sequence"));
        }
        let mut out = Vec::with_capacity(seq.len());
        for t in 0..seq.len() {
            let feats = self.point_feats(g, seq, t)?;
            let mut maps: Vec<FeatureMap> = Vec::with_capacity(self.stages.len());
            maps.push(set_abstraction(g, feats, &geom.frame_coords[t], &geom.first[t], &self.mlps[0], t)?);
            for (l, mlp) in self.mlps.iter().enumerate().skip(1) {
                let prev = maps[l - 1].feats;
                maps.push(set_abstraction(g, Some(prev), &geom.level_coords[l - 1], &geom.shared[l - 1], mlp, t)?);
            }
            out.push(maps);
        }
        Ok(out)
    }
}

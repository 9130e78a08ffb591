//! Point cloud containers and the geometric primitives used by the encoder
//! and decoder: farthest point sampling, ball query grouping, set abstraction
//! and inverse-distance feature interpolation.
//!
//! Geometry (seed selection, neighbour lists, interpolation weights) is always
//! computed in `f64` from the stored coordinates and is not differentiated;
//! only features flow through the [`Graph`].

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Default epsilon added to distances in inverse-distance weighting.
pub const IDW_EPS: f64 = 1e-8;

/// One frame: `coords` is `[n, 3]`, `feats` is `[n, f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudFrame {
    pub coords: Tensor<f32>,
    pub feats: Tensor<f32>,
    pub labels: Option<Vec<u16>>,
}

impl PointCloudFrame {
    pub fn new(coords: Tensor<f32>, feats: Tensor<f32>, labels: Option<Vec<u16>>) -> Result<Self> {
        let frame = Self { coords, feats, labels };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.coords.ndim() != 2 || self.coords.shape()[1] != 3 {
            return Err(Error::dimension(format!("coords must be [n, 3], got {:?}", self.coords.shape())));
        }
        if n == 0 {
            return Err(Error::contract("a frame needs at least one point"));
        }
        if !self.coords.is_finite() || !self.feats.is_finite() {
            return Err(Error::contract("frame holds non-finite values"));
        }
        if self.feats.ndim() != 2 || self.feats.shape()[0] != n {
            return Err(Error::dimension(format!(
                "feats must be [{n}, f], got {:?}",
                self.feats.shape()
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::dimension(format!("{} labels for {n} points", labels.len())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feat_width(&self) -> usize {
        self.feats.shape()[1]
    }

    pub fn coords_f64(&self) -> Tensor<f64> {
        self.coords.cast()
    }
}

/// Ordered frames sharing feature width and class count.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudSequence {
    pub frames: Vec<PointCloudFrame>,
    pub num_classes: usize,
}

impl PointCloudSequence {
    pub fn new(frames: Vec<PointCloudFrame>, num_classes: usize) -> Result<Self> {
        let seq = Self { frames, num_classes };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Err(Error::contract("a sequence needs at least one frame"));
        };
        let f = first.feat_width();
        for (t, frame) in self.frames.iter().enumerate() {
            frame.validate()?;
            if frame.feat_width() != f {
                return Err(Error::dimension(format!(
                    "frame {t} has feature width {}, frame 0 has {f}",
                    frame.feat_width()
                )));
            }
            if let Some(labels) = &frame.labels {
                if let Some(&bad) = labels.iter().find(|&&l| l as usize >= self.num_classes) {
                    return Err(Error::contract(format!(
                        "frame {t} label {bad} outside [0, {})",
                        self.num_classes
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn feat_width(&self) -> usize {
        self.frames[0].feat_width()
    }
}

/// Seeds chosen by farthest point sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedSet {
    /// Indices into the point set the seeds were sampled from.
    pub indices: Vec<usize>,
    /// `[m, 3]` seed coordinates.
    pub coords: Tensor<f64>,
}

impl SeedSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Per-seed neighbour lists of fixed length `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodGrouping {
    pub seeds: SeedSet,
    /// Row-major `[m, k]` indices into the grouped point set.
    pub neighbor_idx: Vec<usize>,
    pub radius: f64,
    pub k: usize,
}

impl NeighborhoodGrouping {
    pub fn neighbors(&self, seed: usize) -> &[usize] {
        &self.neighbor_idx[seed * self.k..(seed + 1) * self.k]
    }

    pub fn num_seeds(&self) -> usize {
        self.seeds.len()
    }
}

/// Per-seed features produced by an encoder stage.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    /// `[m, 3]` seed coordinates.
    pub seed_coords: Tensor<f64>,
    /// `[m, d]` features on the graph.
    pub feats: Var,
    pub frame_index: usize,
}

#[inline]
pub(crate) fn point<F: Real>(coords: &Tensor<F>, i: usize) -> [f64; 3] {
    let r = &coords.data()[i * 3..i * 3 + 3];
    [r[0].as_f64(), r[1].as_f64(), r[2].as_f64()]
}

#[inline]
pub(crate) fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

fn check_coords<F: Real>(coords: &Tensor<F>) -> Result<usize> {
    if coords.ndim() != 2 || coords.shape()[1] != 3 {
        return Err(Error::dimension(format!("coords must be [n, 3], got {:?}", coords.shape())));
    }
    Ok(coords.shape()[0])
}

/// Greedy farthest point sampling starting at `start`.
///
/// Each new seed maximises the squared distance to its nearest already
/// chosen seed; ties go to the lowest index.
pub fn fps<F: Real>(coords: &Tensor<F>, m: usize, start: usize) -> Result<SeedSet> {
    let n = check_coords(coords)?;
    if m == 0 || m > n {
        return Err(Error::contract(format!("fps needs 1 <= m <= n, got m={m}, n={n}")));
    }
    if start >= n {
        return Err(Error::contract(format!("fps start {start} out of range for {n} points")));
    }
    let pts: Vec<[f64; 3]> = (0..n).map(|i| point(coords, i)).collect();
    let mut min_d = vec![f64::INFINITY; n];
    let mut chosen = vec![false; n];
    let mut indices = Vec::with_capacity(m);
    let mut current = start;
    for _ in 0..m {
        indices.push(current);
        chosen[current] = true;
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            if chosen[i] {
                continue;
            }
            let d = dist2(*p, c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    let coords_out = Tensor::from_fn([m, 3], |k| pts[indices[k / 3]][k % 3]);
    Ok(SeedSet { indices, coords: coords_out })
}

/// Groups up to `k` points of `coords` lying within `radius` of each seed.
///
/// Neighbours are listed in ascending index order and short lists are padded
/// with their first entry. A seed with no point in range (possible when the
/// seeds come from another frame) falls back to its nearest point.
pub fn ball_query<F: Real>(seeds: &SeedSet, coords: &Tensor<F>, radius: f64, k: usize) -> Result<NeighborhoodGrouping> {
    let n = check_coords(coords)?;
    if !(radius > 0.0) || k == 0 {
        return Err(Error::contract(format!("ball_query needs radius > 0 and k >= 1, got {radius}, {k}")));
    }
    let r2 = radius * radius;
    let pts: Vec<[f64; 3]> = (0..n).map(|i| point(coords, i)).collect();
    let mut neighbor_idx = Vec::with_capacity(seeds.len() * k);
    for j in 0..seeds.len() {
        let s = point(&seeds.coords, j);
        let start = neighbor_idx.len();
        for (i, p) in pts.iter().enumerate() {
            if dist2(*p, s) <= r2 {
                neighbor_idx.push(i);
                if neighbor_idx.len() - start == k {
                    break;
                }
            }
        }
        let found = neighbor_idx.len() - start;
        let pad = if found == 0 {
            nearest(&pts, s)
        } else {
            neighbor_idx[start]
        };
        neighbor_idx.resize(start + k, pad);
    }
    Ok(NeighborhoodGrouping { seeds: seeds.clone(), neighbor_idx, radius, k })
}

fn nearest(pts: &[[f64; 3]], q: [f64; 3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in pts.iter().enumerate() {
        let d = dist2(*p, q);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Relative neighbour offsets `[m·k, 3]` (neighbour minus seed).
pub fn relative_offsets<F: Real>(grouping: &NeighborhoodGrouping, coords: &Tensor<f64>) -> Tensor<F> {
    let k = grouping.k;
    let mut data = Vec::with_capacity(grouping.neighbor_idx.len() * 3);
    for (slot, &i) in grouping.neighbor_idx.iter().enumerate() {
        let s = point(&grouping.seeds.coords, slot / k);
        let p = point(coords, i);
        data.extend((0..3).map(|a| F::of(p[a] - s[a])));
    }
    Tensor::new([grouping.neighbor_idx.len(), 3], data).expect("offset layout")
}

/// One set abstraction stage: gather neighbour features, append the
/// neighbour-minus-seed offset, run the shared MLP and max-pool over the
/// neighbourhood. `feats` may be `None` when points carry no features.
pub fn set_abstraction<F: Real>(
    g: &mut Graph<'_, F>,
    feats: Option<Var>,
    coords: &Tensor<f64>,
    grouping: &NeighborhoodGrouping,
    mlp: &Mlp,
    frame_index: usize,
) -> Result<FeatureMap> {
    let n = check_coords(coords)?;
    if let Some(&bad) = grouping.neighbor_idx.iter().find(|&&i| i >= n) {
        return Err(Error::contract(format!("neighbour index {bad} out of range for {n} points")));
    }
    let offsets = g.constant(relative_offsets(grouping, coords))?;
    let x = match feats {
        Some(f) => {
            if g.shape(f).len() != 2 || g.shape(f)[0] != n {
                return Err(Error::dimension(format!(
                    "features {:?} do not match {n} points",
                    g.shape(f)
                )));
            }
            let gathered = g.gather_rows(f, &grouping.neighbor_idx)?;
            g.concat(&[gathered, offsets], 1)?
        }
        None => offsets,
    };
    let h = mlp.forward(g, x)?;
    let d = mlp.out_dim();
    let h = g.reshape(h, &[grouping.num_seeds(), grouping.k, d])?;
    let pooled = g.max_over_axis(h, 1)?;
    Ok(FeatureMap { seed_coords: grouping.seeds.coords.clone(), feats: pooled, frame_index })
}

/// Inverse-distance interpolation weights from each target to its `fan`
/// nearest sources; each row of `weights` sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct IdwWeights {
    /// Row-major `[q, fan]` source indices.
    pub idx: Vec<usize>,
    pub weights: Vec<f64>,
    pub fan: usize,
}

impl IdwWeights {
    /// Weights to the `min(p, m)` nearest sources (ties to the lower index).
    pub fn new(targets: &Tensor<f64>, sources: &Tensor<f64>, p: usize) -> Result<Self> {
        let q = check_coords(targets)?;
        let m = check_coords(sources)?;
        if m == 0 || p == 0 {
            return Err(Error::contract("interpolation needs at least one source and p >= 1"));
        }
        let fan = p.min(m);
        let src: Vec<[f64; 3]> = (0..m).map(|i| point(sources, i)).collect();
        let mut idx = Vec::with_capacity(q * fan);
        let mut weights = Vec::with_capacity(q * fan);
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(fan + 1);
        for t in 0..q {
            let x = point(targets, t);
            best.clear();
            for (i, s) in src.iter().enumerate() {
                let d = dist2(*s, x);
                if best.len() < fan || d < best[best.len() - 1].0 {
                    let pos = best.partition_point(|&(bd, _)| bd <= d);
                    best.insert(pos, (d, i));
                    best.truncate(fan);
                }
            }
            let inv: Vec<f64> = best.iter().map(|&(d, _)| 1.0 / (d.sqrt() + IDW_EPS)).collect();
            let total: f64 = inv.iter().sum();
            for (&(_, i), w) in best.iter().zip(inv) {
                idx.push(i);
                weights.push(w / total);
            }
        }
        Ok(Self { idx, weights, fan })
    }

    pub fn num_targets(&self) -> usize {
        self.idx.len() / self.fan
    }

    /// Interpolates `[m, d]` source features on the graph.
    pub fn apply<F: Real>(&self, g: &mut Graph<'_, F>, source_feats: Var) -> Result<Var> {
        let w: Vec<F> = self.weights.iter().map(|&x| F::of(x)).collect();
        Ok(g.weighted_gather(source_feats, &self.idx, &w, self.fan)?)
    }
}

/// Feature propagation interpolation of `sources` onto `targets` on the graph.
pub fn interpolate_features<F: Real>(
    g: &mut Graph<'_, F>,
    targets: &Tensor<f64>,
    sources: &FeatureMap,
    p: usize,
) -> Result<Var> {
    IdwWeights::new(targets, &sources.seed_coords, p)?.apply(g, sources.feats)
}

/// Off-graph variant of [`interpolate_features`] on plain tensors.
pub fn interpolate<F: Real>(
    targets: &Tensor<f64>,
    source_coords: &Tensor<f64>,
    source_feats: &Tensor<F>,
    p: usize,
) -> Result<Tensor<F>> {
    if source_feats.ndim() != 2 || source_feats.shape()[0] != source_coords.shape()[0] {
        return Err(Error::dimension("source features do not match source coordinates"));
    }
    let w = IdwWeights::new(targets, source_coords, p)?;
    let d = source_feats.shape()[1];
    let mut out = vec![F::zero(); w.num_targets() * d];
    for (k, (&i, &wk)) in w.idx.iter().zip(&w.weights).enumerate() {
        let row = &mut out[(k / w.fan) * d..(k / w.fan + 1) * d];
        for (o, &v) in row.iter_mut().zip(source_feats.row(i)) {
            *o += F::of(wk) * v;
        }
    }
    Ok(Tensor::new([w.num_targets(), d], out)?)
}

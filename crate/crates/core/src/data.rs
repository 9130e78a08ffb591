//! Synthetic point cloud sequences and depth back-projection.
//!
//! Segmentation scenes hold a flat ground patch (class 0) and rigid clusters
//! translating at constant velocity. Each object class sits in its own height
//! band and the point feature is the height, so labels are learnable from a
//! single frame. Classification scenes hold one cluster moving along one of
//! `K` evenly spaced headings; the heading index is the label.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::point_ops::{PointCloudFrame, PointCloudSequence};
use crate::tensor::Tensor;

/// How object clusters are assigned classes `1..num_classes`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassRule {
    /// Object `i` gets class `1 + i mod (num_classes − 1)`.
    Cyclic,
    /// Classes drawn uniformly from the scene's generator.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub num_static_points: usize,
    pub num_objects: usize,
    pub object_point_counts: Vec<usize>,
    /// Speed range in units per frame.
    pub velocity_range: (f64, f64),
    pub noise_sigma: f64,
    pub frames: usize,
    pub num_classes: usize,
    pub class_rule: ClassRule,
    /// Half-width of the square ground patch.
    pub extent: f64,
    /// Radius of each object cluster.
    pub object_radius: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_static_points: 256,
            num_objects: 3,
            object_point_counts: vec![64; 3],
            velocity_range: (0.02, 0.08),
            noise_sigma: 0.005,
            frames: 3,
            num_classes: 4,
            class_rule: ClassRule::Cyclic,
            extent: 2.0,
            object_radius: 0.3,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene spec: {m}")));
        if self.num_static_points == 0 || self.num_objects == 0 || self.frames == 0 {
            return bad("point, object and frame counts must be at least 1");
        }
        if self.object_point_counts.len() != self.num_objects || self.object_point_counts.contains(&0) {
            return bad("object_point_counts needs one positive count per object");
        }
        let (lo, hi) = self.velocity_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return bad("velocity range must satisfy 0 <= lo <= hi");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be finite and non-negative");
        }
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize {
            return bad("num_classes must lie in [2, 65535]");
        }
        if !(self.extent > 0.0 && self.object_radius > 0.0) {
            return bad("extent and object radius must be positive");
        }
        Ok(())
    }

    pub fn points_per_frame(&self) -> usize {
        self.num_static_points + self.object_point_counts.iter().sum::<usize>()
    }
}

/// Ground-truth motion of one generated object.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectTruth {
    pub class: u16,
    pub velocity: [f64; 3],
    /// Range of the object's points within each frame.
    pub points: std::ops::Range<usize>,
}

/// Height of the bottom of class `c`'s band.
fn band_floor(class: u16) -> f64 {
    0.2 + 0.5 * (class as f64 - 1.0)
}

const BAND_HEIGHT: f64 = 0.3;

struct Builder {
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    /// Base position, velocity and label per point.
    points: Vec<([f64; 3], [f64; 3], u16)>,
}

impl Builder {
    fn new(spec: &SceneSpec) -> Self {
        let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("valid sigma"));
        Self { rng: ChaCha8Rng::seed_from_u64(spec.seed), noise, points: Vec::new() }
    }

    fn ground(&mut self, count: usize, extent: f64) {
        for _ in 0..count {
            let p = [self.rng.random_range(-extent..extent), self.rng.random_range(-extent..extent), 0.0];
            self.points.push((p, [0.0; 3], 0));
        }
    }

    /// Points uniform in a vertical cylinder spanning the class height band.
    fn cluster(&mut self, count: usize, centre: [f64; 2], radius: f64, class: u16, velocity: [f64; 3]) {
        let floor = band_floor(class);
        for _ in 0..count {
            let r = radius * self.rng.random::<f64>().sqrt();
            let a = self.rng.random_range(0.0..TAU);
            let z = floor + BAND_HEIGHT * self.rng.random::<f64>();
            self.points.push(([centre[0] + r * a.cos(), centre[1] + r * a.sin(), z], velocity, class));
        }
    }

    fn heading(&mut self, spec: &SceneSpec, angle: f64) -> [f64; 3] {
        let (lo, hi) = spec.velocity_range;
        let speed = if hi > lo { self.rng.random_range(lo..=hi) } else { lo };
        [speed * angle.cos(), speed * angle.sin(), 0.0]
    }

    fn build(mut self, frames: usize, num_classes: usize, sequence_label: Option<u16>) -> PointCloudSequence {
        let n = self.points.len();
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let mut coords = Vec::with_capacity(n * 3);
            for (p, v, _) in &self.points {
                for a in 0..3 {
                    let e = self.noise.map_or(0.0, |d| d.sample(&mut self.rng));
                    coords.push((p[a] + v[a] * t as f64 + e) as f32);
                }
            }
            let feats: Vec<f32> = (0..n).map(|i| coords[3 * i + 2]).collect();
            let labels = self.points.iter().map(|&(_, _, l)| sequence_label.unwrap_or(l)).collect();
            let frame = PointCloudFrame::new(
                Tensor::new([n, 3], coords).expect("coordinate layout"),
                Tensor::new([n, 1], feats).expect("feature layout"),
                Some(labels),
            )
            .expect("generated frame is valid");
            out.push(frame);
        }
        PointCloudSequence::new(out, num_classes).expect("generated sequence is valid")
    }
}

/// Segmentation scene; see [`gen_seg_scene_with_truth`].
pub fn gen_seg_scene(spec: &SceneSpec) -> Result<PointCloudSequence> {
    Ok(gen_seg_scene_with_truth(spec)?.0)
}

/// Segmentation scene plus the per-object class and velocity it was built from.
pub fn gen_seg_scene_with_truth(spec: &SceneSpec) -> Result<(PointCloudSequence, Vec<ObjectTruth>)> {
    spec.validate()?;
    let mut b = Builder::new(spec);
    b.ground(spec.num_static_points, spec.extent);
    let mut truth = Vec::with_capacity(spec.num_objects);
    let span = spec.extent * 0.7;
    for (i, &count) in spec.object_point_counts.iter().enumerate() {
        let class = match spec.class_rule {
            ClassRule::Cyclic => 1 + (i % (spec.num_classes - 1)) as u16,
            ClassRule::Random => b.rng.random_range(1..spec.num_classes as u16),
        };
        let centre = [b.rng.random_range(-span..span), b.rng.random_range(-span..span)];
        let angle = b.rng.random_range(0.0..TAU);
        let velocity = b.heading(spec, angle);
        let start = b.points.len();
        b.cluster(count, centre, spec.object_radius, class, velocity);
        truth.push(ObjectTruth { class, velocity, points: start..b.points.len() });
    }
    Ok((b.build(spec.frames, spec.num_classes, None), truth))
}

/// Classification scene whose single cluster moves along heading
/// `class_id · 2π / num_classes`. Every point carries the sequence label.
pub fn gen_cls_scene(spec: &SceneSpec, class_id: usize) -> Result<(PointCloudSequence, u16)> {
    spec.validate()?;
    if class_id >= spec.num_classes {
        return Err(Error::Config(format!("direction {class_id} outside {} classes", spec.num_classes)));
    }
    let mut b = Builder::new(spec);
    b.ground(spec.num_static_points, spec.extent);
    let span = spec.extent * 0.3;
    let centre = [b.rng.random_range(-span..span), b.rng.random_range(-span..span)];
    let angle = class_id as f64 * TAU / spec.num_classes as f64;
    let velocity = b.heading(spec, angle);
    let count = spec.object_point_counts.iter().sum();
    b.cluster(count, centre, spec.object_radius, 1, velocity);
    let label = class_id as u16;
    Ok((b.build(spec.frames, spec.num_classes, Some(label)), label))
}

/// Seed of the `i`-th member of a dataset generated from `base`.
pub fn member_seed(base: u64, i: usize) -> u64 {
    // splitmix64 step keeps neighbouring members decorrelated
    let mut z = base.wrapping_add((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` classification sequences with labels `i mod num_classes`.
pub fn gen_cls_dataset(spec: &SceneSpec, count: usize) -> Result<Vec<(PointCloudSequence, u16)>> {
    (0..count)
        .map(|i| {
            let s = SceneSpec { seed: member_seed(spec.seed, i), ..spec.clone() };
            gen_cls_scene(&s, i % spec.num_classes)
        })
        .collect()
}

/// `count` segmentation sequences with decorrelated seeds.
pub fn gen_seg_dataset(spec: &SceneSpec, count: usize) -> Result<Vec<PointCloudSequence>> {
    (0..count)
        .map(|i| gen_seg_scene(&SceneSpec { seed: member_seed(spec.seed, i), ..spec.clone() }))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Pinhole back-projection of an `[H, W]` depth map (metres). Pixels with
/// zero, negative or non-finite depth are dropped; the rest are emitted in
/// row-major pixel order.
pub fn depth_backproject(depth: &Tensor<f64>, k: &Intrinsics) -> Result<Tensor<f64>> {
    if !(k.fx > 0.0 && k.fy > 0.0) {
        return Err(Error::Config("focal lengths must be positive".into()));
    }
    if depth.ndim() != 2 {
        return Err(Error::dimension(format!("depth map must be [H, W], got {:?}", depth.shape())));
    }
    let w = depth.shape()[1];
    let mut pts = Vec::new();
    for (i, &z) in depth.data().iter().enumerate() {
        if !(z.is_finite() && z > 0.0) {
            continue;
        }
        let (v, u) = ((i / w) as f64, (i % w) as f64);
        pts.extend([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z]);
    }
    Ok(Tensor::new([pts.len() / 3, 3], pts)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_noiseless_frames_are_identical() {
        let spec = SceneSpec { velocity_range: (0.0, 0.0), noise_sigma: 0.0, ..SceneSpec::default() };
        let seq = gen_seg_scene(&spec).unwrap();
        for f in &seq.frames[1..] {
            assert_eq!(f, &seq.frames[0]);
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec { seed: 17, ..SceneSpec::default() };
        assert_eq!(gen_seg_scene(&spec).unwrap(), gen_seg_scene(&spec).unwrap());
        assert_ne!(gen_seg_scene(&spec).unwrap(), gen_seg_scene(&SceneSpec { seed: 18, ..spec }).unwrap());
    }

    #[test]
    fn labels_follow_objects() {
        let (seq, truth) = gen_seg_scene_with_truth(&SceneSpec::default()).unwrap();
        for f in &seq.frames {
            let labels = f.labels.as_ref().unwrap();
            assert!(labels[..256].iter().all(|&l| l == 0));
            for o in &truth {
                assert!(labels[o.points.clone()].iter().all(|&l| l == o.class));
            }
        }
    }

    #[test]
    fn positive_x_heading_moves_right() {
        let spec = SceneSpec { noise_sigma: 0.0, frames: 5, ..SceneSpec::default() };
        let (seq, label) = gen_cls_scene(&spec, 0).unwrap();
        assert_eq!(label, 0);
        let n0 = spec.num_static_points;
        let cx: Vec<f64> = seq
            .frames
            .iter()
            .map(|f| {
                let c = f.coords.data();
                (n0..f.len()).map(|i| c[3 * i] as f64).sum::<f64>() / (f.len() - n0) as f64
            })
            .collect();
        assert!(cx.windows(2).all(|w| w[1] > w[0]), "{cx:?}");
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(SceneSpec { num_objects: 0, object_point_counts: vec![], ..SceneSpec::default() }.validate().is_err());
        assert!(SceneSpec { velocity_range: (0.2, 0.1), ..SceneSpec::default() }.validate().is_err());
        assert!(gen_cls_scene(&SceneSpec::default(), 4).is_err());
    }

    #[test]
    fn principal_point_and_empty_depth() {
        let k = Intrinsics { fx: 2.0, fy: 3.0, cx: 1.0, cy: 2.0 };
        let mut d = Tensor::<f64>::zeros([4, 3]);
        assert_eq!(depth_backproject(&d, &k).unwrap().shape(), &[0, 3]);
        d.data_mut()[2 * 3 + 1] = 5.0;
        assert_eq!(depth_backproject(&d, &k).unwrap().data(), &[0.0, 0.0, 5.0]);
        assert!(depth_backproject(&d, &Intrinsics { fx: 0.0, ..k }).is_err());
    }
}

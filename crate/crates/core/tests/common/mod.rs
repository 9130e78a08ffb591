//! Brute-force reference implementations and invariant probes shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code)]

use pst_core::formats::Checkpoint;
use pst_core::networks::metrics;
use pst_core::point_ops::{fps, interpolate, PointCloudFrame, PointCloudSequence};
use pst_core::re::{ReConfig, ReModule};
use pst_core::stsa::{stsa_forward, PatchSet, StsaConfig, StsaParams};
use pst_core::tensor::{Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random `[n, 3]` coordinates. With `grid`, values are small integers so that
/// duplicate points and distance ties are common.
pub fn random_coords(rng: &mut ChaCha8Rng, n: usize, grid: bool) -> Tensor<f64> {
    Tensor::from_fn([n, 3], |_| if grid { rng.random_range(0..4) as f64 } else { rng.random_range(-1.0..1.0) })
}

fn pt(c: &Tensor<f64>, i: usize) -> [f64; 3] {
    [c.at(&[i, 0]), c.at(&[i, 1]), c.at(&[i, 2])]
}

fn d2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let (x, y, z) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    x * x + y * y + z * z
}

/// Greedy farthest point sampling recomputing every point-to-set distance
/// from scratch at each step.
pub fn fps_oracle(c: &Tensor<f64>, m: usize, start: usize) -> Vec<usize> {
    let n = c.shape()[0];
    let mut chosen = vec![start];
    while chosen.len() < m {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in (0..n).filter(|i| !chosen.contains(i)) {
            let d = chosen.iter().map(|&s| d2(pt(c, i), pt(c, s))).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

/// Runs `instances` random comparisons with n ≤ 64; returns the first mismatch.
pub fn fps_check(instances: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for inst in 0..instances {
        let n = r.random_range(1..=64);
        let m = r.random_range(1..=n);
        let start = r.random_range(0..n);
        let c = random_coords(&mut r, n, inst % 3 == 0);
        let got = fps(&c, m, start).map_err(|e| e.to_string())?;
        let want = fps_oracle(&c, m, start);
        if got.indices != want {
            return Err(format!("instance {inst} (n={n}, m={m}): {:?} != {:?}", got.indices, want));
        }
        for (k, &i) in want.iter().enumerate() {
            if (0..3).any(|a| got.coords.at(&[k, a]) != c.at(&[i, a])) {
                return Err(format!("instance {inst}: seed {k} coordinates differ from point {i}"));
            }
        }
    }
    Ok(())
}

/// Inverse-distance interpolation over the `p` nearest sources, found by a
/// full sort.
pub fn idw_oracle(targets: &Tensor<f64>, sources: &Tensor<f64>, feats: &Tensor<f64>, p: usize) -> Vec<Vec<f64>> {
    let d = feats.shape()[1];
    (0..targets.shape()[0])
        .map(|t| {
            let mut all: Vec<(f64, usize)> =
                (0..sources.shape()[0]).map(|s| (d2(pt(targets, t), pt(sources, s)), s)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all.truncate(p);
            let w: Vec<f64> = all.iter().map(|&(dd, _)| 1.0 / (dd.sqrt() + 1e-8)).collect();
            let total: f64 = w.iter().sum();
            (0..d).map(|j| all.iter().zip(&w).map(|(&(_, s), wi)| wi / total * feats.at(&[s, j])).sum()).collect()
        })
        .collect()
}

/// Largest absolute deviation from the oracle over `instances` random cases.
pub fn idw_check(instances: usize, seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (q, m, d) = (r.random_range(1..40), r.random_range(1..20), r.random_range(1..6));
        let targets = random_coords(&mut r, q, false);
        let sources = random_coords(&mut r, m, false);
        let feats = Tensor::from_fn([m, d], |_| r.random_range(-2.0..2.0));
        let got = interpolate(&targets, &sources, &feats, 3).map_err(|e| e.to_string())?;
        for (t, row) in idw_oracle(&targets, &sources, &feats, 3).iter().enumerate() {
            for (j, want) in row.iter().enumerate() {
                worst = worst.max((got.at(&[t, j]) - want).abs());
            }
        }
    }
    Ok(worst)
}

/// Per-class IoU, mIoU, mean recall and accuracy from direct counting.
pub fn metrics_oracle(pred: &[u16], truth: &[u16], c: usize) -> (Vec<Option<f64>>, f64, f64, f64) {
    let count = |f: &dyn Fn(u16, u16) -> bool| pred.iter().zip(truth).filter(|(&p, &t)| f(p, t)).count() as u64;
    let mut ious = Vec::new();
    let mut recalls = Vec::new();
    for k in 0..c as u16 {
        let tp = count(&|p, t| p == k && t == k);
        let fp = count(&|p, t| p == k && t != k);
        let fneg = count(&|p, t| p != k && t == k);
        ious.push((tp + fp + fneg > 0).then(|| tp as f64 / (tp + fp + fneg) as f64));
        if tp + fneg > 0 {
            recalls.push(tp as f64 / (tp + fneg) as f64);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    let oacc = if pred.is_empty() { 0.0 } else { count(&|p, t| p == t) as f64 / pred.len() as f64 };
    (ious.clone(), mean(&present), mean(&recalls), oacc)
}

pub fn metrics_check(instances: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for inst in 0..instances {
        let c = r.random_range(1..7);
        let n = r.random_range(0..200);
        let truth: Vec<u16> = (0..n).map(|_| r.random_range(0..c as u16)).collect();
        // mostly correct predictions, so IoUs spread over (0, 1]
        let pred: Vec<u16> =
            truth.iter().map(|&t| if r.random_bool(0.7) { t } else { r.random_range(0..c as u16) }).collect();
        let m = metrics(&pred, &truth, c).map_err(|e| e.to_string())?;
        let (ious, miou, macc, oacc) = metrics_oracle(&pred, &truth, c);
        if m.per_class_iou != ious || m.miou != miou || m.macc != macc || m.oacc != oacc {
            return Err(format!("instance {inst}: {m:?} vs oracle {ious:?} {miou} {macc} {oacc}"));
        }
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(in_unit(m.miou) && in_unit(m.macc) && in_unit(m.oacc) && ious.iter().flatten().all(|&x| in_unit(x))) {
            return Err(format!("instance {inst}: metric outside [0, 1]"));
        }
    }
    Ok(())
}

/// Worst deviations seen by [`attention_check`].
#[derive(Debug, Default)]
pub struct AttentionStats {
    /// max |Σ_j A3[i, j] − 1|
    pub row_sum: f64,
    /// max |out(P·x) − P·out(x)|
    pub permutation: f64,
    /// max |A3 − 1/N| with zero query and key projections
    pub uniform: f64,
}

fn random_tokens(r: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    Tensor::from_fn([n, d], |_| r.random_range(-1.5..1.5))
}

fn patch_set(g: &mut Graph<'_, f64>, x: Tensor<f64>) -> PatchSet {
    let n = x.shape()[0];
    PatchSet {
        tokens: g.constant(x).unwrap(),
        index_map: (0..n).map(|j| (j, 0)).collect(),
        frames: 1,
        seeds: n,
        window: 1,
        stride: 1,
    }
}

pub fn attention_check(instances: usize, seed: u64) -> AttentionStats {
    let mut r = rng(seed);
    let mut s = AttentionStats::default();
    for _ in 0..instances {
        let (n, d) = (r.random_range(1..24), r.random_range(1..12));
        let mut store = ParamStore::<f64>::new();
        let params = StsaParams::new(&mut store, "a", StsaConfig::new(d, d, 1, 1), &mut r).unwrap();
        let x = random_tokens(&mut r, n, d);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let xp = Tensor::from_fn([n, d], |k| x.at(&[perm[k / d], k % d]));
        {
            let mut g = Graph::new(&store);
            let p0 = patch_set(&mut g, x.clone());
            let (out, trace) = stsa_forward(&mut g, &p0, &params).unwrap();
            let p1 = patch_set(&mut g, xp);
            let (out_p, _) = stsa_forward(&mut g, &p1, &params).unwrap();
            for row in g.value(trace.a3).rows() {
                s.row_sum = s.row_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            }
            let (o, op) = (g.value(out), g.value(out_p));
            for k in 0..n * d {
                s.permutation = s.permutation.max((op.data()[k] - o.at(&[perm[k / d], k % d])).abs());
            }
        }
        store.set_value(params.w_q, Tensor::zeros([d, d])).unwrap();
        store.set_value(params.w_k, Tensor::zeros([d, d])).unwrap();
        let mut g = Graph::new(&store);
        let p0 = patch_set(&mut g, x);
        let (_, trace) = stsa_forward(&mut g, &p0, &params).unwrap();
        for &a in g.value(trace.a3).data() {
            s.uniform = s.uniform.max((a - 1.0 / n as f64).abs());
        }
    }
    s
}

/// Worst deviations seen by [`re_check`].
#[derive(Debug, Default)]
pub struct ReStats {
    /// max |a1 + a2 − 1|
    pub weight_sum: f64,
    /// Largest amount by which an output leaves the interval spanned by its
    /// two branch values, plus the largest reconstruction error
    /// |out − (a1·k + a2·n)|.
    pub convexity: f64,
    /// max |fuse(k, k) − k|
    pub fixed_point: f64,
}

pub fn re_check(instances: usize, seed: u64) -> ReStats {
    let mut r = rng(seed);
    let mut s = ReStats::default();
    for _ in 0..instances {
        let (m, d_in, d) = (r.random_range(1..20), r.random_range(1..6), r.random_range(1..8));
        let cfg = ReConfig {
            feature_mlp: vec![d],
            feature_radius: 0.7,
            feature_k: 4,
            resolution_mlp: vec![d],
            gamma_hidden: None,
        };
        let mut store = ParamStore::<f64>::new();
        let re = ReModule::new(&mut store, "re", d_in, cfg, &mut r).unwrap();
        let coords = random_coords(&mut r, m, false);
        let feats = random_tokens(&mut r, m, d_in);
        let grouping = re.grouping(&coords).unwrap();
        let mut g = Graph::new(&store);
        let h = pst_core::point_ops::FeatureMap { seed_coords: coords, feats: g.constant(feats).unwrap(), frame_index: 0 };
        let (out, state) = re.forward(&mut g, &h, &grouping).unwrap();
        let (w, k, n, o) =
            (g.value(state.fusion_weights), g.value(state.k_feat), g.value(state.n_feat), g.value(out.feats));
        for i in 0..o.shape()[0] {
            let (a1, a2) = (w.at(&[i, 0]), w.at(&[i, 1]));
            s.weight_sum = s.weight_sum.max((a1 + a2 - 1.0).abs());
            for j in 0..d {
                let (kv, nv, ov) = (k.at(&[i, j]), n.at(&[i, j]), o.at(&[i, j]));
                let outside = (kv.min(nv) - ov).max(ov - kv.max(nv)).max(0.0);
                s.convexity = s.convexity.max(outside).max((ov - (a1 * kv + a2 * nv)).abs());
            }
        }
        let kk = state.k_feat;
        let (same, _) = re.fuse(&mut g, kk, kk).unwrap();
        let (a, b) = (g.value(same), g.value(kk));
        s.fixed_point = s.fixed_point.max(a.max_abs_diff(b).unwrap());
    }
    s
}

/// Any finite `f32`, drawn from raw bit patterns (subnormals and signed zeros
/// included).
fn finite_bits(r: &mut ChaCha8Rng) -> f32 {
    loop {
        let x = f32::from_bits(r.random());
        if x.is_finite() {
            return x;
        }
    }
}

/// A random sequence with uniform point count and optional labels.
pub fn random_sequence(r: &mut ChaCha8Rng) -> PointCloudSequence {
    let (t, n, f, c) = (r.random_range(1..5), r.random_range(1..40), r.random_range(1..4), r.random_range(1..9));
    let labelled = r.random_bool(0.5);
    let frames = (0..t)
        .map(|_| {
            let coords = Tensor::from_fn([n, 3], |_| finite_bits(r));
            let feats = Tensor::from_fn([n, f], |_| r.random_range(-1e3f32..1e3));
            let labels = labelled.then(|| (0..n).map(|_| r.random_range(0..c as u16)).collect());
            PointCloudFrame::new(coords, feats, labels).unwrap()
        })
        .collect();
    PointCloudSequence::new(frames, c).unwrap()
}

/// A random checkpoint with arbitrary names, shapes and finite values.
pub fn random_checkpoint(r: &mut ChaCha8Rng) -> Checkpoint {
    let params = (0..r.random_range(0..8))
        .map(|i| {
            let shape: Vec<usize> = (0..r.random_range(0..4)).map(|_| r.random_range(1..5)).collect();
            let numel = shape.iter().product::<usize>();
            let data = (0..numel).map(|_| r.random_range(-10.0f32..10.0)).collect();
            (format!("p{i}.w_é"), Tensor::new(shape, data).unwrap())
        })
        .collect();
    Checkpoint { metadata: format!("# seed = {}\nlr = 0.001\n", r.random::<u64>()), params }
}

pub fn sequences_bit_equal(a: &PointCloudSequence, b: &PointCloudSequence) -> bool {
    let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    a.num_classes == b.num_classes
        && a.frames.len() == b.frames.len()
        && a.frames.iter().zip(&b.frames).all(|(x, y)| {
            x.coords.shape() == y.coords.shape()
                && bits(&x.coords) == bits(&y.coords)
                && x.feats.shape() == y.feats.shape()
                && bits(&x.feats) == bits(&y.feats)
                && x.labels == y.labels
        })
}

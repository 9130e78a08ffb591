//! Central finite-difference checks of reverse-mode gradients.
//!
//! The numerical side only ever evaluates forward passes, so it is
//! independent of the backward rules it checks. Errors are measured per
//! parameter as `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, floor)`
//! over the checked coordinates.
//!
//! Each parameter is probed at two step sizes and the smaller error is kept.
//! The small step fails only through roundoff when a gradient is tiny
//! relative to the loss; the large step fails only when the interval straddles
//! a ReLU or max-pool switch. A wrong backward rule is off by the same amount
//! at both steps.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::networks::{cross_entropy_loss, ClsNet, ClsNetConfig, EncoderStage, SegNet, SegNetConfig, Temporal};
use crate::nn::{Activation, Mlp};
use crate::point_ops::{ball_query, fps, set_abstraction, FeatureMap, PointCloudFrame, PointCloudSequence};
use crate::re::{ReConfig, ReModule};
use crate::stsa::{patch_division, stsa_forward, tokens_to_frames, StsaConfig, StsaParams};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Finite-difference steps.
pub const STEPS: [f64; 2] = [1e-5, 1e-3];
/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;
const NORM_FLOOR: f64 = 1e-8;

/// Outcome of checking one parameter.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub rel_error: f64,
}

/// Outcome of checking all parameters for one instance.
#[derive(Clone, Debug)]
pub struct InstanceCheck {
    pub params: Vec<ParamCheck>,
}

impl InstanceCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.params.iter().all(|p| p.rel_error < tol)
    }
}

/// Compares backward-pass gradients of `loss_fn` against central differences.
///
/// At most `max_coords` coordinates per parameter are perturbed (chosen at
/// random when the parameter is larger). Untrainable parameters are skipped.
pub fn check_store<R, L>(store: &ParamStore<f64>, loss_fn: L, max_coords: usize, rng: &mut R) -> Result<InstanceCheck>
where
    R: Rng + ?Sized,
    L: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        let grads = g.backward(loss)?;
        store
            .ids()
            .map(|id| grads.param_or_zeros(id, store))
            .collect::<Vec<_>>()
    };
    let mut probe = store.clone();
    let mut params = Vec::new();
    for id in store.ids() {
        let p = store.get(id);
        if !p.trainable {
            continue;
        }
        let numel = p.value.numel();
        let coords: Vec<usize> = if numel <= max_coords {
            (0..numel).collect()
        } else {
            sample(rng, numel, max_coords).into_vec()
        };
        let mut rel_error = f64::INFINITY;
        for step in STEPS {
            let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
            for &c in &coords {
                let numeric = central_difference(&mut probe, id, c, step, &loss_fn)?;
                let analytic = grads[id.index()].data()[c];
                diff2 += (analytic - numeric).powi(2);
                a2 += analytic * analytic;
                n2 += numeric * numeric;
            }
            let denom = a2.sqrt().max(n2.sqrt()).max(NORM_FLOOR);
            rel_error = rel_error.min(diff2.sqrt() / denom);
        }
        params.push(ParamCheck { name: p.name.clone(), coords_checked: coords.len(), rel_error });
    }
    Ok(InstanceCheck { params })
}

fn central_difference<L>(probe: &mut ParamStore<f64>, id: ParamId, coord: usize, step: f64, loss_fn: &L) -> Result<f64>
where
    L: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let original = probe.get(id).value.data()[coord];
    let eval = |x: f64, probe: &mut ParamStore<f64>| -> Result<f64> {
        probe.get_mut(id).value.data_mut()[coord] = x;
        let mut g = Graph::new(probe);
        let loss = loss_fn(&mut g)?;
        Ok(g.value(loss).item()?)
    };
    let plus = eval(original + step, probe);
    let minus = eval(original - step, probe);
    probe.get_mut(id).value.data_mut()[coord] = original;
    Ok((plus? - minus?) / (2.0 * step))
}

/// Modules accepted by [`run_module`].
pub const MODULES: [&str; 6] = ["ops", "sa", "re", "stsa", "seg", "cls"];

/// Elementary operations covered by the `ops` module.
pub const OPS: [&str; 25] = [
    "add", "sub", "mul", "mul_broadcast", "scale", "div_scalar", "relu", "matmul", "matmul_batched",
    "transpose", "reshape", "concat", "slice", "split", "sum_all", "sum_axis", "mean_axis", "max_axis",
    "softmax", "layer_norm", "gather_rows", "weighted_gather", "cross_entropy", "linear", "mlp",
];

/// Coordinates probed per parameter.
pub const COORDS_PER_PARAM: usize = 8;

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: String,
    pub instance: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub module: String,
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_rel_error < TOLERANCE)
    }

    /// Number of instances checked for case `name`.
    pub fn instances_of(&self, name: &str) -> usize {
        self.cases.iter().filter(|c| c.name == name).count()
    }
}

type LossFn = Box<dyn Fn(&mut Graph<'_, f64>) -> Result<Var>>;

struct Case {
    store: ParamStore<f64>,
    loss: LossFn,
}

/// Runs `instances` seeded checks of every case in `module`.
pub fn run_module(module: &str, instances: usize, seed: u64) -> Result<SuiteReport> {
    let names: Vec<&str> = match module {
        "ops" => OPS.to_vec(),
        m if MODULES.contains(&m) => vec![m],
        _ => {
            return Err(crate::Error::Config(format!(
                "unknown gradcheck module `{module}` (one of {})",
                MODULES.join(", ")
            )))
        }
    };
    let mut cases = Vec::new();
    for name in names {
        for i in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::data::member_seed(seed, i));
            let case = match module {
                "ops" => op_case(name, &mut rng)?,
                "sa" => sa_case(&mut rng)?,
                "re" => re_case(&mut rng)?,
                "stsa" => stsa_case(&mut rng)?,
                "seg" => seg_case(&mut rng)?,
                _ => cls_case(&mut rng)?,
            };
            let check = check_store(&case.store, &case.loss, COORDS_PER_PARAM, &mut rng)?;
            let worst = check
                .params
                .iter()
                .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
                .map_or(String::new(), |p| p.name.clone());
            cases.push(CaseReport { name: name.to_string(), instance: i, max_rel_error: check.max_rel_error(), worst_param: worst });
        }
    }
    Ok(SuiteReport { module: module.to_string(), cases })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Entries bounded away from zero, so ReLU kinks are never straddled.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let x: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() { x } else { -x }
    })
}

/// `Σ v ⊙ w` for a fixed random `w`, so every output entry matters.
fn weighted(g: &mut Graph<'_, f64>, v: Var, w: &Tensor<f64>) -> Result<Var> {
    let c = g.constant(w.clone())?;
    let p = g.mul(v, c)?;
    Ok(g.sum_all(p)?)
}

fn unary<F>(rng: &mut ChaCha8Rng, shape: &[usize], out_shape: &[usize], f: F) -> Result<Case>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var> + 'static,
{
    let mut store = ParamStore::new();
    let x = store.add("x", uniform(rng, shape))?;
    let w = uniform(rng, out_shape);
    Ok(Case {
        store,
        loss: Box::new(move |g| {
            let xv = g.param(x);
            let y = f(g, xv)?;
            weighted(g, y, &w)
        }),
    })
}

fn binary<F>(rng: &mut ChaCha8Rng, a: &[usize], b: &[usize], out: &[usize], f: F) -> Result<Case>
where
    F: Fn(&mut Graph<'_, f64>, Var, Var) -> Result<Var> + 'static,
{
    let mut store = ParamStore::new();
    let x = store.add("a", uniform(rng, a))?;
    let y = store.add("b", uniform(rng, b))?;
    let w = uniform(rng, out);
    Ok(Case {
        store,
        loss: Box::new(move |g| {
            let (xv, yv) = (g.param(x), g.param(y));
            let z = f(g, xv, yv)?;
            weighted(g, z, &w)
        }),
    })
}

fn op_case(name: &str, rng: &mut ChaCha8Rng) -> Result<Case> {
    let r = rng.random_range(2..5usize);
    let c = rng.random_range(2..5usize);
    let k = rng.random_range(2..4usize);
    let s = rng.random_range(0.5..2.0f64);
    Ok(match name {
        "add" => binary(rng, &[r, c], &[r, c], &[r, c], |g, a, b| Ok(g.add(a, b)?))?,
        "sub" => binary(rng, &[r, c], &[c], &[r, c], |g, a, b| Ok(g.sub(a, b)?))?,
        "mul" => binary(rng, &[r, c], &[r, c], &[r, c], |g, a, b| Ok(g.mul(a, b)?))?,
        "mul_broadcast" => binary(rng, &[r, 1], &[r, c], &[r, c], |g, a, b| Ok(g.mul(a, b)?))?,
        "scale" => unary(rng, &[r, c], &[r, c], move |g, x| Ok(g.scale(x, s)?))?,
        "div_scalar" => unary(rng, &[r, c], &[r, c], move |g, x| Ok(g.div_scalar(x, s)?))?,
        "relu" => {
            let mut store = ParamStore::new();
            let x = store.add("x", off_zero(rng, &[r, c]))?;
            let w = uniform(rng, &[r, c]);
            Case {
                store,
                loss: Box::new(move |g| {
                    let xv = g.param(x);
                    let y = g.relu(xv)?;
                    weighted(g, y, &w)
                }),
            }
        }
        "matmul" => binary(rng, &[r, k], &[k, c], &[r, c], |g, a, b| Ok(g.matmul(a, b)?))?,
        "matmul_batched" => binary(rng, &[2, r, k], &[k, c], &[2, r, c], |g, a, b| Ok(g.matmul(a, b)?))?,
        "transpose" => unary(rng, &[2, r, c], &[2, c, r], |g, x| Ok(g.transpose_last2(x)?))?,
        "reshape" => unary(rng, &[r, c], &[c, r], move |g, x| Ok(g.reshape(x, &[c, r])?))?,
        "concat" => binary(rng, &[r, c], &[r, k], &[r, c + k], |g, a, b| Ok(g.concat(&[a, b], 1)?))?,
        "slice" => unary(rng, &[r + 2, c], &[r, c], move |g, x| Ok(g.slice(x, 0, 1, r)?))?,
        "split" => unary(rng, &[r, c + k], &[r, k], move |g, x| Ok(g.split(x, 1, &[c, k])?[1]))?,
        "sum_all" => unary(rng, &[r, c], &[], |g, x| Ok(g.sum_all(x)?))?,
        "sum_axis" => unary(rng, &[r, k, c], &[r, c], |g, x| Ok(g.sum_over_axis(x, 1)?))?,
        "mean_axis" => unary(rng, &[r, k, c], &[k, c], |g, x| Ok(g.mean_over_axis(x, 0)?))?,
        "max_axis" => unary(rng, &[r, k, c], &[r, c], |g, x| Ok(g.max_over_axis(x, 1)?))?,
        "softmax" => unary(rng, &[r, c], &[r, c], |g, x| Ok(g.softmax_rows(x)?))?,
        "layer_norm" => {
            let mut store = ParamStore::new();
            let x = store.add("x", uniform(rng, &[r, c + 1]))?;
            let gain = store.add("gain", uniform(rng, &[c + 1]))?;
            let bias = store.add("bias", uniform(rng, &[c + 1]))?;
            let w = uniform(rng, &[r, c + 1]);
            Case {
                store,
                loss: Box::new(move |g| {
                    let (xv, gv, bv) = (g.param(x), g.param(gain), g.param(bias));
                    let y = g.layer_norm(xv, gv, bv, 1e-5)?;
                    weighted(g, y, &w)
                }),
            }
        }
        "gather_rows" => {
            let idx: Vec<usize> = (0..r + 2).map(|_| rng.random_range(0..r)).collect();
            unary(rng, &[r, c], &[r + 2, c], move |g, x| Ok(g.gather_rows(x, &idx)?))?
        }
        "weighted_gather" => {
            let q = r + 1;
            let idx: Vec<usize> = (0..q * k).map(|_| rng.random_range(0..r)).collect();
            let wts: Vec<f64> = (0..q * k).map(|_| rng.random_range(0.0..1.0)).collect();
            unary(rng, &[r, c], &[q, c], move |g, x| Ok(g.weighted_gather(x, &idx, &wts, k)?))?
        }
        "cross_entropy" => {
            let mut store = ParamStore::new();
            let x = store.add("logits", uniform(rng, &[r, c]))?;
            let targets: Vec<Option<usize>> =
                (0..r).map(|i| if i == 0 { None } else { Some(rng.random_range(0..c)) }).collect();
            Case {
                store,
                loss: Box::new(move |g| {
                    let xv = g.param(x);
                    Ok(g.cross_entropy(xv, &targets)?)
                }),
            }
        }
        "linear" | "mlp" => {
            let mut store = ParamStore::new();
            let widths: Vec<usize> = if name == "linear" { vec![c] } else { vec![k + 2, c] };
            let x = store.add("x", uniform(rng, &[r, k]))?;
            let mlp = Mlp::new(&mut store, name, k, &widths, Activation::Identity, rng)?;
            let w = uniform(rng, &[r, c]);
            Case {
                store,
                loss: Box::new(move |g| {
                    let xv = g.param(x);
                    let y = mlp.forward(g, xv)?;
                    weighted(g, y, &w)
                }),
            }
        }
        _ => return Err(crate::Error::Config(format!("no gradient check for op `{name}`"))),
    })
}

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    Tensor::from_fn([n, 3], |_| rng.random_range(0.0..1.0))
}

fn sa_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let n = rng.random_range(10..20usize);
    let m = rng.random_range(3..6usize);
    let f = rng.random_range(2..4usize);
    let coords = cloud(rng, n);
    let grouping = ball_query(&fps(&coords, m, 0)?, &coords, 0.5, 4)?;
    let mut store = ParamStore::new();
    let feats = store.add("feats", uniform(rng, &[n, f]))?;
    let mlp = Mlp::new(&mut store, "sa", f + 3, &[5, 4], Activation::Relu, rng)?;
    let w = uniform(rng, &[m, 4]);
    Ok(Case {
        store,
        loss: Box::new(move |g| {
            let x = g.param(feats);
            let out = set_abstraction(g, Some(x), &coords, &grouping, &mlp, 0)?;
            weighted(g, out.feats, &w)
        }),
    })
}

fn re_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let m = rng.random_range(5..10usize);
    let d = rng.random_range(2..5usize);
    let coords = cloud(rng, m);
    let mut store = ParamStore::new();
    let feats = store.add("h", uniform(rng, &[m, d]))?;
    let cfg = ReConfig {
        feature_mlp: vec![4],
        feature_radius: 0.6,
        feature_k: 3,
        resolution_mlp: vec![5, 4],
        gamma_hidden: None,
    };
    let re = ReModule::new(&mut store, "re", d, cfg, rng)?;
    let grouping = re.grouping(&coords)?;
    let w = uniform(rng, &[ReModule::output_seeds(m), 4]);
    Ok(Case {
        store,
        loss: Box::new(move |g| {
            let h = FeatureMap { seed_coords: coords.clone(), feats: g.param(feats), frame_index: 0 };
            let (out, _) = re.forward(g, &h, &grouping)?;
            weighted(g, out.feats, &w)
        }),
    })
}

fn stsa_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let t = rng.random_range(1..4usize);
    let m = rng.random_range(2..5usize);
    let (din, d) = (3, 4);
    let window = rng.random_range(1..=t);
    let mut store = ParamStore::new();
    let frames: Vec<_> = (0..t)
        .map(|i| store.add(format!("frame{i}"), uniform(rng, &[m, din])))
        .collect::<std::result::Result<_, _>>()?;
    let params = StsaParams::new(&mut store, "stsa", StsaConfig::new(din, d, window, 1), rng)?;
    let w: Vec<Tensor<f64>> = (0..t).map(|_| uniform(rng, &[m, d])).collect();
    Ok(Case {
        store,
        loss: Box::new(move |g| {
            let feats: Vec<Var> = frames.iter().map(|&f| g.param(f)).collect();
            let patches = patch_division(g, &feats, &params)?;
            let (out, _) = stsa_forward(g, &patches, &params)?;
            let mut total = None;
            for (v, w) in tokens_to_frames(g, out, &patches)?.into_iter().zip(&w) {
                let s = weighted(g, v.expect("stride 1 covers every frame"), w)?;
                total = Some(match total {
                    Some(acc) => g.add(acc, s)?,
                    None => s,
                });
            }
            Ok(total.expect("at least one frame"))
        }),
    })
}

fn tiny_sequence(rng: &mut ChaCha8Rng, frames: usize, n: usize, classes: u16, label: Option<u16>) -> Result<PointCloudSequence> {
    let fs = (0..frames)
        .map(|_| {
            let coords = Tensor::from_fn([n, 3], |_| rng.random_range(0.0f32..1.0));
            let feats = Tensor::from_fn([n, 1], |_| rng.random_range(-1.0f32..1.0));
            let labels = (0..n).map(|_| label.unwrap_or_else(|| rng.random_range(0..classes))).collect();
            PointCloudFrame::new(coords, feats, Some(labels))
        })
        .collect::<Result<Vec<_>>>()?;
    PointCloudSequence::new(fs, classes as usize)
}

fn tiny_stages() -> Vec<EncoderStage> {
    vec![
        EncoderStage { points: 10, radius: 0.5, k: 4, mlp: vec![6] },
        EncoderStage { points: 6, radius: 0.8, k: 3, mlp: vec![8] },
    ]
}

/// Redraws weights from U(±2/√fan_in) and vectors from U(±1). Default
/// scaling leaves deep tiny networks with activations (and attention
/// gradients) too small for finite differences to resolve.
fn rescale(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        let bound = if shape.len() == 2 { 2.0 / (shape[0] as f64).sqrt() } else { 1.0 };
        p.value = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
    }
}

fn seg_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let seq = tiny_sequence(rng, 3, 16, 3, None)?;
    let cfg = SegNetConfig {
        stages: tiny_stages(),
        re: ReConfig {
            feature_mlp: vec![6],
            feature_radius: 0.8,
            feature_k: 2,
            resolution_mlp: vec![6],
            gamma_hidden: None,
        },
        stsa_dim: 6,
        window: 2,
        stride: 1,
        re_fp_mlp: vec![4],
        fp_mlps: vec![vec![4], vec![4]],
        num_classes: 3,
        use_re: true,
        use_stsa: true,
    };
    let mut store = ParamStore::new();
    let net = SegNet::new(&mut store, &cfg, 1, rng)?;
    rescale(&mut store, rng);
    let geom = net.prepare(&seq)?;
    let labels: Vec<u16> = seq.frames.iter().flat_map(|f| f.labels.clone().unwrap()).collect();
    Ok(Case {
        store,
        loss: Box::new(move |g| {
            let out = net.forward(g, &seq, &geom)?;
            cross_entropy_loss(g, out.logits, &labels, None)
        }),
    })
}

fn cls_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let label = rng.random_range(0..3u16);
    let seq = tiny_sequence(rng, 3, 16, 3, Some(label))?;
    let cfg = ClsNetConfig {
        stages: tiny_stages(),
        temporal: Temporal::Stsa { window: 2, stride: 1 },
        head_hidden: vec![4],
        num_classes: 3,
    };
    let mut store = ParamStore::new();
    let net = ClsNet::new(&mut store, &cfg, 1, rng)?;
    rescale(&mut store, rng);
    let geom = net.prepare(&seq)?;
    Ok(Case {
        store,
        loss: Box::new(move |g| {
            let out = net.forward(g, &seq, &geom)?;
            cross_entropy_loss(g, out.logits, &[label], None)
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_module_passes_on_two_instances() {
        for m in MODULES {
            let r = run_module(m, 2, 3).unwrap();
            for c in &r.cases {
                assert!(c.max_rel_error < TOLERANCE, "{m}/{} #{}: {} ({})", c.name, c.instance, c.max_rel_error, c.worst_param);
            }
        }
    }

    #[test]
    fn unknown_module_is_rejected() {
        assert!(run_module("bogus", 1, 0).is_err());
    }
}

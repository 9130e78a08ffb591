//! Training, evaluation and ablation on synthetic data.
//!
//! A training step computes per-sequence gradients in parallel and sums them
//! in sequence order, so results do not depend on the number of threads.
//! `PST_THREADS` caps the worker pool.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Task};
use crate::data::{gen_cls_scene, gen_seg_scene, member_seed};
use crate::error::{Error, Result};
use crate::networks::{cross_entropy_loss, metrics, ClsNet, EncoderGeometry, Metrics, SegGeometry, SegNet};
use crate::optim::{adam_step, AdamState};
use crate::point_ops::PointCloudSequence;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// Environment variable limiting worker threads.
pub const THREADS_ENV: &str = "PST_THREADS";

pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` inside a pool sized by [`thread_count`].
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Clone, Debug)]
pub enum Model {
    Seg(SegNet),
    Cls(ClsNet),
}

#[derive(Clone, Debug)]
pub enum Geometry {
    Seg(SegGeometry),
    Cls(EncoderGeometry),
}

/// Label of a classification sequence, stored on every point.
pub fn sequence_label(seq: &PointCloudSequence) -> Result<u16> {
    seq.frames[0]
        .labels
        .as_ref()
        .and_then(|l| l.first().copied())
        .ok_or_else(|| Error::contract("classification sequence carries no label"))
}

fn point_labels(seq: &PointCloudSequence) -> Result<Vec<u16>> {
    let mut out = Vec::new();
    for (t, f) in seq.frames.iter().enumerate() {
        let l = f.labels.as_ref().ok_or_else(|| Error::contract(format!("frame {t} has no labels")))?;
        out.extend_from_slice(l);
    }
    Ok(out)
}

impl Model {
    pub fn build<F: Real>(cfg: &RunConfig, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(match cfg.task {
            Task::Seg => Model::Seg(SegNet::new(store, &cfg.seg_net()?, cfg.feat_width, rng)?),
            Task::Cls => Model::Cls(ClsNet::new(store, &cfg.cls_net(), cfg.feat_width, rng)?),
        })
    }

    pub fn prepare(&self, seq: &PointCloudSequence) -> Result<Geometry> {
        Ok(match self {
            Model::Seg(n) => Geometry::Seg(n.prepare(seq)?),
            Model::Cls(n) => Geometry::Cls(n.prepare(seq)?),
        })
    }

    /// Raw logits `[rows, C]` on the graph.
    pub fn logits<F: Real>(&self, g: &mut Graph<'_, F>, seq: &PointCloudSequence, geom: &Geometry) -> Result<Var> {
        match (self, geom) {
            (Model::Seg(n), Geometry::Seg(geo)) => Ok(n.forward(g, seq, geo)?.logits),
            (Model::Cls(n), Geometry::Cls(geo)) => Ok(n.forward(g, seq, geo)?.logits),
            _ => Err(Error::contract("geometry does not match the model")),
        }
    }

    /// Ground truth aligned with the rows of [`Model::logits`].
    pub fn targets(&self, seq: &PointCloudSequence) -> Result<Vec<u16>> {
        match self {
            Model::Seg(_) => point_labels(seq),
            Model::Cls(_) => Ok(vec![sequence_label(seq)?]),
        }
    }

    pub fn loss<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        seq: &PointCloudSequence,
        geom: &Geometry,
        ignore: Option<u16>,
    ) -> Result<Var> {
        let logits = self.logits(g, seq, geom)?;
        cross_entropy_loss(g, logits, &self.targets(seq)?, ignore)
    }

    /// Arg-max prediction per logit row.
    pub fn predict<F: Real>(&self, store: &ParamStore<F>, seq: &PointCloudSequence, geom: &Geometry) -> Result<Vec<u16>> {
        let mut g = Graph::new(store);
        let logits = self.logits(&mut g, seq, geom)?;
        Ok(g.value(logits).rows().map(|r| crate::networks::argmax(r) as u16).collect())
    }
}

/// Synthetic train and test sets for `cfg`.
pub fn generate_data(cfg: &RunConfig) -> Result<(Vec<PointCloudSequence>, Vec<PointCloudSequence>)> {
    let total = cfg.train_sequences + cfg.test_sequences;
    let all = with_pool(|| {
        (0..total)
            .into_par_iter()
            .map(|i| {
                let spec = cfg.scene_spec(member_seed(cfg.data_seed, i))?;
                match cfg.task {
                    Task::Seg => gen_seg_scene(&spec),
                    Task::Cls => Ok(gen_cls_scene(&spec, i % cfg.num_classes)?.0),
                }
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let mut train = all;
    let test = train.split_off(cfg.train_sequences);
    Ok((train, test))
}

pub fn prepare_all(model: &Model, data: &[PointCloudSequence]) -> Result<Vec<Geometry>> {
    with_pool(|| data.par_iter().map(|s| model.prepare(s)).collect::<Result<Vec<_>>>())?
}

/// A trained model and its training curve.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore<f32>,
    /// Mean batch loss at each step, before the update.
    pub losses: Vec<f64>,
    pub wall_time_s: f64,
}

/// Initialises a model from `seed` and trains it on `data`.
pub fn train(cfg: &RunConfig, seed: u64, data: &[PointCloudSequence]) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let model = Model::build(cfg, &mut store, &mut rng)?;
    let geoms = prepare_all(&model, data)?;
    let mut adam = AdamState::new(&store, cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let batch = cfg.batch.min(data.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let results = with_pool(|| {
            picked
                .par_iter()
                .map(|&i| item_gradients(&model, &store, &data[i], &geoms[i], cfg.ignore_class))
                .collect::<Result<Vec<_>>>()
        })??;
        store.zero_grad();
        let scale = 1.0 / batch as f32;
        let mut loss = 0.0;
        for (l, grads) in &results {
            loss += l;
            for (p, g) in store.iter_mut().zip(grads) {
                if let Some(g) = g {
                    for (acc, &x) in p.grad.data_mut().iter_mut().zip(g.data()) {
                        *acc += scale * x;
                    }
                }
            }
        }
        losses.push(loss / batch as f64);
        adam_step(&mut store, &mut adam)?;
    }
    Ok(TrainOutcome { model, store, losses, wall_time_s: start.elapsed().as_secs_f64() })
}

type ItemGrads = (f64, Vec<Option<Tensor<f32>>>);

fn item_gradients(
    model: &Model,
    store: &ParamStore<f32>,
    seq: &PointCloudSequence,
    geom: &Geometry,
    ignore: Option<u16>,
) -> Result<ItemGrads> {
    let mut g = Graph::new(store);
    let loss = model.loss(&mut g, seq, geom, ignore)?;
    let value = g.value(loss).item()? as f64;
    let grads = g.backward(loss)?;
    Ok((value, store.ids().map(|id| grads.param(id).cloned()).collect()))
}

/// Confusion-matrix metrics over all rows of all sequences; rows whose truth
/// is `ignore` are left out.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    data: &[PointCloudSequence],
    num_classes: usize,
    ignore: Option<u16>,
) -> Result<Metrics> {
    let geoms = prepare_all(model, data)?;
    let per_seq = with_pool(|| {
        data.par_iter()
            .zip(&geoms)
            .map(|(s, g)| Ok((model.predict(store, s, g)?, model.targets(s)?)))
            .collect::<Result<Vec<_>>>()
    })??;
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for (p, t) in per_seq {
        for (p, t) in p.into_iter().zip(t) {
            if Some(t) != ignore {
                pred.push(p);
                truth.push(t);
            }
        }
    }
    metrics(&pred, &truth, num_classes)
}

/// Deterministic metrics file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub macc: f64,
    pub oacc: f64,
    pub steps: usize,
}

impl MetricsReport {
    pub fn new(cfg: &RunConfig, seed: u64, m: &Metrics) -> Self {
        Self {
            config_hash: cfg.hash(),
            seed,
            per_class_iou: m.per_class_iou.clone(),
            miou: m.miou,
            macc: m.macc,
            oacc: m.oacc,
            steps: cfg.steps,
        }
    }
}

/// Run details that are not expected to repeat bit-for-bit (timing).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub task: String,
    pub preset: Option<String>,
    pub seed: u64,
    pub config_hash: String,
    pub lr: f64,
    pub batch: usize,
    pub points: usize,
    pub frames: usize,
    pub steps: usize,
    pub threads: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub wall_time_s: f64,
    pub losses: Vec<f64>,
}

/// Result of [`run`]: the trained model plus its reports.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    /// On the test split, or the training split when there is none.
    pub metrics: Metrics,
    pub report: MetricsReport,
    pub manifest: RunManifest,
}

/// Generates data, trains and evaluates.
pub fn run(cfg: &RunConfig, seed: u64, preset: Option<&str>) -> Result<RunResult> {
    let (train_set, test_set) = generate_data(cfg)?;
    let outcome = train(cfg, seed, &train_set)?;
    let eval_set = if test_set.is_empty() { &train_set } else { &test_set };
    let metrics = evaluate(&outcome.model, &outcome.store, eval_set, cfg.num_classes, cfg.ignore_class)?;
    let report = MetricsReport::new(cfg, seed, &metrics);
    let manifest = RunManifest {
        task: cfg.task.to_string(),
        preset: preset.map(str::to_string),
        seed,
        config_hash: cfg.hash(),
        lr: cfg.lr,
        batch: cfg.batch,
        points: cfg.scene.points,
        frames: cfg.frames,
        steps: cfg.steps,
        threads: thread_count(),
        initial_loss: outcome.losses.first().copied(),
        final_loss: outcome.losses.last().copied(),
        wall_time_s: outcome.wall_time_s,
        losses: outcome.losses.clone(),
    };
    Ok(RunResult { outcome, metrics, report, manifest })
}

/// Score compared in ablations: mIoU for segmentation, accuracy for
/// classification.
pub fn headline(task: Task, m: &Metrics) -> f64 {
    match task {
        Task::Seg => m.miou,
        Task::Cls => m.oacc,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub use_re: bool,
    pub use_stsa: bool,
    pub scores: Vec<f64>,
    pub median: f64,
    /// Median minus the median of the row with both flags off.
    pub delta_vs_base: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub task: String,
    pub metric: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, use_re: bool, use_stsa: bool) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.use_re == use_re && r.use_stsa == use_stsa)
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Every on/off combination of the requested flags, trained once per seed.
/// Flags not requested keep their value from `base`.
pub fn ablate(base: &RunConfig, vary_re: bool, vary_stsa: bool, seeds: &[u64]) -> Result<AblationReport> {
    if vary_re && base.task == Task::Cls {
        return Err(Error::Config("the classification network has no resolution embedding".into()));
    }
    let re_opts: &[bool] = if vary_re { &[false, true] } else { std::slice::from_ref(&base.use_re) };
    let stsa_opts: &[bool] = if vary_stsa { &[false, true] } else { std::slice::from_ref(&base.use_stsa) };
    let mut rows = Vec::new();
    for &use_stsa in stsa_opts {
        for &use_re in re_opts {
            let cfg = RunConfig { use_re, use_stsa, ..base.clone() };
            let scores = seeds
                .iter()
                .map(|&s| Ok(headline(cfg.task, &run(&cfg, s, None)?.metrics)))
                .collect::<Result<Vec<_>>>()?;
            rows.push(AblationRow { use_re, use_stsa, median: median(&scores), scores, delta_vs_base: 0.0 });
        }
    }
    let base_median = rows[0].median;
    for r in &mut rows {
        r.delta_vs_base = r.median - base_median;
    }
    Ok(AblationReport {
        task: base.task.to_string(),
        metric: match base.task {
            Task::Seg => "miou".into(),
            Task::Cls => "accuracy".into(),
        },
        seeds: seeds.to_vec(),
        rows,
    })
}

//! UTF-8 `key = value` run configuration and named hyper-parameter presets.
//!
//! Lines are `key = value`; `#` starts a comment. Lists are comma separated
//! and lists of lists (one MLP per stage) separate stages with `;`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{ClassRule, SceneSpec};
use crate::error::{Error, Result};
use crate::networks::{ClsNetConfig, EncoderStage, SegNetConfig, Temporal};
use crate::re::ReConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Seg,
    Cls,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seg" => Ok(Task::Seg),
            "cls" => Ok(Task::Cls),
            _ => Err(Error::Config(format!("unknown task `{s}` (expected seg or cls)"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Seg => "seg",
            Task::Cls => "cls",
        })
    }
}

/// Parses `key = value` text into a map. Duplicate keys are an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", no + 1)));
        }
    }
    Ok(map)
}

fn scalar<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| scalar(key, x.trim())).collect()
}

fn nested(key: &str, v: &str) -> Result<Vec<Vec<usize>>> {
    v.split(';').map(|s| list(key, s)).collect()
}

fn bool_value(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

fn join_nested(xs: &[Vec<usize>]) -> String {
    xs.iter().map(|x| join(x)).collect::<Vec<_>>().join("; ")
}

/// Synthetic data settings shared by training and `gen-data`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    /// Points per frame.
    pub points: usize,
    pub objects: usize,
    /// Fraction of each frame's points that belong to objects.
    pub object_share: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub noise: f64,
    pub extent: f64,
    pub object_radius: f64,
}

impl SceneConfig {
    pub fn scene_spec(&self, frames: usize, num_classes: usize, seed: u64) -> Result<SceneSpec> {
        let object_total = (self.points as f64 * self.object_share).round() as usize;
        let per_object = object_total / self.objects.max(1);
        if per_object == 0 || object_total >= self.points {
            return Err(Error::Config("object_share leaves no object or no static points".into()));
        }
        let spec = SceneSpec {
            num_static_points: self.points - per_object * self.objects,
            num_objects: self.objects,
            object_point_counts: vec![per_object; self.objects],
            velocity_range: (self.speed_min, self.speed_max),
            noise_sigma: self.noise,
            frames,
            num_classes,
            class_rule: ClassRule::Cyclic,
            extent: self.extent,
            object_radius: self.object_radius,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Everything needed to build, train and evaluate a model.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub frames: usize,
    pub num_classes: usize,
    pub feat_width: usize,
    pub ignore_class: Option<u16>,
    pub train_sequences: usize,
    /// `0` evaluates on the training set.
    pub test_sequences: usize,
    pub data_seed: u64,
    pub scene: SceneConfig,
    pub sa_points: Vec<usize>,
    pub sa_radius: Vec<f64>,
    pub sa_k: Vec<usize>,
    pub sa_mlp: Vec<Vec<usize>>,
    pub re_mlp: Vec<usize>,
    pub re_radius: f64,
    pub re_k: usize,
    pub re_resolution_mlp: Vec<usize>,
    pub stsa_dim: usize,
    pub window: usize,
    pub stride: usize,
    pub fp_re_mlp: Vec<usize>,
    pub fp_mlp: Vec<Vec<usize>>,
    pub head_hidden: Vec<usize>,
    pub use_re: bool,
    pub use_stsa: bool,
}

impl RunConfig {
    /// Desk-scale defaults for `task`.
    pub fn desk(task: Task) -> Self {
        match task {
            Task::Seg => Self {
                task,
                lr: 0.001,
                batch: 2,
                steps: 500,
                frames: 3,
                num_classes: 4,
                feat_width: 1,
                ignore_class: None,
                train_sequences: 4,
                test_sequences: 0,
                data_seed: 0,
                scene: SceneConfig {
                    points: 512,
                    objects: 3,
                    object_share: 0.375,
                    speed_min: 0.02,
                    speed_max: 0.08,
                    noise: 0.005,
                    extent: 2.0,
                    object_radius: 0.35,
                },
                sa_points: vec![256, 64],
                sa_radius: vec![0.4, 0.8],
                sa_k: vec![16, 16],
                sa_mlp: vec![vec![32, 64], vec![64, 128]],
                re_mlp: vec![128],
                re_radius: 1.2,
                re_k: 16,
                re_resolution_mlp: vec![128],
                stsa_dim: 128,
                window: 3,
                stride: 1,
                fp_re_mlp: vec![128],
                fp_mlp: vec![vec![128], vec![128, 64]],
                head_hidden: vec![],
                use_re: true,
                use_stsa: true,
            },
            Task::Cls => Self {
                task,
                lr: 0.001,
                batch: 16,
                steps: 400,
                frames: 8,
                num_classes: 4,
                feat_width: 1,
                ignore_class: None,
                train_sequences: 160,
                test_sequences: 40,
                data_seed: 0,
                scene: SceneConfig {
                    points: 256,
                    objects: 1,
                    object_share: 0.5,
                    speed_min: 0.1,
                    speed_max: 0.15,
                    noise: 0.01,
                    extent: 1.0,
                    object_radius: 0.3,
                },
                sa_points: vec![64, 16],
                sa_radius: vec![0.4, 0.8],
                sa_k: vec![16, 8],
                sa_mlp: vec![vec![16, 32], vec![32, 64]],
                re_mlp: vec![128],
                re_radius: 1.0,
                re_k: 8,
                re_resolution_mlp: vec![128],
                stsa_dim: 128,
                window: 2,
                stride: 1,
                fp_re_mlp: vec![128],
                fp_mlp: vec![vec![128], vec![128]],
                head_hidden: vec![64],
                use_re: false,
                use_stsa: true,
            },
        }
    }

    /// Applies `key = value` pairs; unknown keys are an error.
    pub fn apply(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in map {
            let v = v.as_str();
            match k.as_str() {
                "task" => self.task = v.parse()?,
                "lr" => self.lr = scalar(k, v)?,
                "batch" => self.batch = scalar(k, v)?,
                "steps" => self.steps = scalar(k, v)?,
                "frames" => self.frames = scalar(k, v)?,
                "num_classes" => self.num_classes = scalar(k, v)?,
                "feat_width" => self.feat_width = scalar(k, v)?,
                "ignore_class" => self.ignore_class = if v == "none" { None } else { Some(scalar(k, v)?) },
                "train_sequences" => self.train_sequences = scalar(k, v)?,
                "test_sequences" => self.test_sequences = scalar(k, v)?,
                "data_seed" => self.data_seed = scalar(k, v)?,
                "points" => self.scene.points = scalar(k, v)?,
                "objects" => self.scene.objects = scalar(k, v)?,
                "object_share" => self.scene.object_share = scalar(k, v)?,
                "speed_min" => self.scene.speed_min = scalar(k, v)?,
                "speed_max" => self.scene.speed_max = scalar(k, v)?,
                "noise" => self.scene.noise = scalar(k, v)?,
                "extent" => self.scene.extent = scalar(k, v)?,
                "object_radius" => self.scene.object_radius = scalar(k, v)?,
                "sa_points" => self.sa_points = list(k, v)?,
                "sa_radius" => self.sa_radius = list(k, v)?,
                "sa_k" => self.sa_k = list(k, v)?,
                "sa_mlp" => self.sa_mlp = nested(k, v)?,
                "re_mlp" => self.re_mlp = list(k, v)?,
                "re_radius" => self.re_radius = scalar(k, v)?,
                "re_k" => self.re_k = scalar(k, v)?,
                "re_resolution_mlp" => self.re_resolution_mlp = list(k, v)?,
                "stsa_dim" => self.stsa_dim = scalar(k, v)?,
                "window" => self.window = scalar(k, v)?,
                "stride" => self.stride = scalar(k, v)?,
                "fp_re_mlp" => self.fp_re_mlp = list(k, v)?,
                "fp_mlp" => self.fp_mlp = nested(k, v)?,
                "head_hidden" => self.head_hidden = list(k, v)?,
                "use_re" => self.use_re = bool_value(k, v)?,
                "use_stsa" => self.use_stsa = bool_value(k, v)?,
                _ => return Err(Error::Config(format!("unknown key `{k}`"))),
            }
        }
        Ok(())
    }

    /// Task defaults, then `preset` (if any), then the keys in `text`.
    pub fn load(text: &str, preset: Option<&str>) -> Result<Self> {
        let map = parse_kv(text)?;
        let task = match map.get("task") {
            Some(t) => t.parse()?,
            None => Task::Seg,
        };
        let mut cfg = Self::desk(task);
        if let Some(name) = preset {
            let frames = map.get("frames").map(|v| scalar::<usize>("frames", v)).transpose()?;
            cfg.apply_preset(&Preset::resolve(name, frames)?);
        }
        cfg.apply(&map)?;
        if map.contains_key("sa_points") {
            cfg.fit_stage_lists(&map);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_preset(&mut self, p: &Preset) {
        self.lr = p.lr;
        self.batch = p.batch;
        self.scene.points = p.points;
        self.frames = p.frames;
        if let Some(enc) = &p.encoder {
            self.sa_points = enc.clone();
            self.fit_stage_lists(&BTreeMap::new());
        }
    }

    /// Stretches or trims per-stage lists to the number of encoder stages,
    /// leaving alone any list named in `explicit`. Encoder lists repeat their
    /// last entry; decoder lists (coarsest first) repeat their first.
    fn fit_stage_lists(&mut self, explicit: &BTreeMap<String, String>) {
        let n = self.sa_points.len();
        let fit = |key: &str| !explicit.contains_key(key);
        fn tail<T: Clone>(v: &mut Vec<T>, n: usize) {
            if let Some(last) = v.last().cloned() {
                v.resize(n, last);
            }
        }
        if fit("sa_radius") {
            tail(&mut self.sa_radius, n);
        }
        if fit("sa_k") {
            tail(&mut self.sa_k, n);
        }
        if fit("sa_mlp") {
            tail(&mut self.sa_mlp, n);
        }
        if fit("fp_mlp") && !self.fp_mlp.is_empty() {
            let len = self.fp_mlp.len();
            if len > n {
                self.fp_mlp.drain(..len - n);
            }
            while self.fp_mlp.len() < n {
                self.fp_mlp.insert(0, self.fp_mlp[0].clone());
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sa_points.len();
        if self.sa_radius.len() != n || self.sa_k.len() != n || self.sa_mlp.len() != n {
            return Err(Error::Config("sa_points, sa_radius, sa_k and sa_mlp need one entry per stage".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.batch == 0 || self.frames == 0 {
            return Err(Error::Config("lr must be finite and batch, frames positive".into()));
        }
        if self.train_sequences == 0 {
            return Err(Error::Config("train_sequences must be positive".into()));
        }
        if self.feat_width != 1 {
            return Err(Error::Config("synthetic data carries exactly one point feature".into()));
        }
        match self.task {
            Task::Seg => self.seg_net()?.validate(),
            Task::Cls => self.cls_net().validate(),
        }
    }

    pub fn stages(&self) -> Vec<EncoderStage> {
        (0..self.sa_points.len())
            .map(|i| EncoderStage {
                points: self.sa_points[i],
                radius: self.sa_radius[i],
                k: self.sa_k[i],
                mlp: self.sa_mlp[i].clone(),
            })
            .collect()
    }

    pub fn seg_net(&self) -> Result<SegNetConfig> {
        Ok(SegNetConfig {
            stages: self.stages(),
            re: ReConfig {
                feature_mlp: self.re_mlp.clone(),
                feature_radius: self.re_radius,
                feature_k: self.re_k,
                resolution_mlp: self.re_resolution_mlp.clone(),
                gamma_hidden: None,
            },
            stsa_dim: self.stsa_dim,
            window: self.window,
            stride: self.stride,
            re_fp_mlp: self.fp_re_mlp.clone(),
            fp_mlps: self.fp_mlp.clone(),
            num_classes: self.num_classes,
            use_re: self.use_re,
            use_stsa: self.use_stsa,
        })
    }

    /// Classification network; `use_stsa = false` swaps attention for mean
    /// pooling over time.
    pub fn cls_net(&self) -> ClsNetConfig {
        ClsNetConfig {
            stages: self.stages(),
            temporal: if self.use_stsa {
                Temporal::Stsa { window: self.window, stride: self.stride }
            } else {
                Temporal::MeanPool
            },
            head_hidden: self.head_hidden.clone(),
            num_classes: self.num_classes,
        }
    }

    pub fn scene_spec(&self, seed: u64) -> Result<SceneSpec> {
        self.scene.scene_spec(self.frames, self.num_classes, seed)
    }

    /// Canonical text form; `load(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let s = &self.scene;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("task", self.task.to_string());
        kv("lr", self.lr.to_string());
        kv("batch", self.batch.to_string());
        kv("steps", self.steps.to_string());
        kv("frames", self.frames.to_string());
        kv("num_classes", self.num_classes.to_string());
        kv("feat_width", self.feat_width.to_string());
        kv("ignore_class", self.ignore_class.map_or("none".into(), |c| c.to_string()));
        kv("train_sequences", self.train_sequences.to_string());
        kv("test_sequences", self.test_sequences.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("points", s.points.to_string());
        kv("objects", s.objects.to_string());
        kv("object_share", s.object_share.to_string());
        kv("speed_min", s.speed_min.to_string());
        kv("speed_max", s.speed_max.to_string());
        kv("noise", s.noise.to_string());
        kv("extent", s.extent.to_string());
        kv("object_radius", s.object_radius.to_string());
        kv("sa_points", join(&self.sa_points));
        kv("sa_radius", join(&self.sa_radius));
        kv("sa_k", join(&self.sa_k));
        kv("sa_mlp", join_nested(&self.sa_mlp));
        kv("re_mlp", join(&self.re_mlp));
        kv("re_radius", self.re_radius.to_string());
        kv("re_k", self.re_k.to_string());
        kv("re_resolution_mlp", join(&self.re_resolution_mlp));
        kv("stsa_dim", self.stsa_dim.to_string());
        kv("window", self.window.to_string());
        kv("stride", self.stride.to_string());
        kv("fp_re_mlp", join(&self.fp_re_mlp));
        kv("fp_mlp", join_nested(&self.fp_mlp));
        kv("head_hidden", join(&self.head_hidden));
        kv("use_re", self.use_re.to_string());
        kv("use_stsa", self.use_stsa.to_string());
        out
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Named hyper-parameters from the reference experiments.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: String,
    pub lr: f64,
    pub batch: usize,
    pub points: usize,
    pub frames: usize,
    /// Seeds per encoder stage, when the preset fixes the encoder.
    pub encoder: Option<Vec<usize>>,
}

/// Seeds per stage of the full-size segmentation encoder.
pub const FULL_ENCODER: [usize; 4] = [2048, 512, 128, 64];

/// Action-recognition rows: (frames, batch, points).
pub const MSR_ROWS: [(usize, usize, usize); 4] = [(4, 16, 2048), (8, 8, 8192), (12, 8, 8192), (16, 8, 10240)];

impl Preset {
    /// `msr` has one row per sequence length; `frames` picks the row
    /// (default: the shortest).
    pub fn resolve(name: &str, frames: Option<usize>) -> Result<Self> {
        let p = |lr, batch, points, frames, encoder: Option<Vec<usize>>| Preset {
            name: name.to_string(),
            lr,
            batch,
            points,
            frames,
            encoder,
        };
        match name {
            "synthia" => Ok(p(0.0016, 2, 16384, 3, Some(FULL_ENCODER.to_vec()))),
            "kitti" => Ok(p(0.012, 2, 16384, 3, Some(FULL_ENCODER.to_vec()))),
            "msr" => {
                let t = frames.unwrap_or(MSR_ROWS[0].0);
                let &(t, batch, points) = MSR_ROWS
                    .iter()
                    .find(|r| r.0 == t)
                    .ok_or_else(|| Error::Config(format!("msr preset has no {t}-frame row (4, 8, 12 or 16)")))?;
                Ok(p(0.001, batch, points, t, None))
            }
            "desk" => {
                let d = RunConfig::desk(Task::Seg);
                Ok(p(d.lr, d.batch, d.scene.points, d.frames, None))
            }
            _ => Err(Error::Config(format!("unknown preset `{name}` (synthia, kitti, msr, desk)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_lists_and_rejects_junk() {
        let m = parse_kv("# c\n a = 1, 2 # tail\n\nb=x").unwrap();
        assert_eq!(m["a"], "1, 2");
        assert_eq!(m["b"], "x");
        assert!(parse_kv("a = 1\na = 2").is_err());
        assert!(parse_kv("novalue").is_err());
        assert!(RunConfig::load("bogus = 1", None).is_err());
        assert!(RunConfig::load("lr = fast", None).is_err());
    }

    #[test]
    fn text_round_trip() {
        for task in [Task::Seg, Task::Cls] {
            let mut c = RunConfig::desk(task);
            c.lr = 0.1 + 0.2;
            c.ignore_class = Some(3);
            let back = RunConfig::load(&c.to_text(), None).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn file_overrides_preset() {
        let c = RunConfig::load("lr = 0.5", Some("kitti")).unwrap();
        assert_eq!((c.lr, c.batch, c.scene.points), (0.5, 2, 16384));
        assert_eq!(c.sa_points, FULL_ENCODER);
        let c = RunConfig::load("task = cls\nframes = 12", Some("msr")).unwrap();
        assert_eq!((c.batch, c.scene.points, c.frames), (8, 8192, 12));
        assert!(RunConfig::load("frames = 5", Some("msr")).is_err());
        assert!(Preset::resolve("imagenet", None).is_err());
    }

    #[test]
    fn file_encoder_overrides_preset_encoder() {
        let cfg = RunConfig::load("sa_points = 32, 8\nsa_k = 8, 4", Some("kitti")).unwrap();
        assert_eq!(cfg.sa_points, vec![32, 8]);
        assert_eq!(cfg.sa_k, vec![8, 4]);
        assert_eq!(cfg.sa_radius.len(), 2);
        assert_eq!(cfg.fp_mlp, RunConfig::desk(Task::Seg).fp_mlp);
        let deep = RunConfig::load("sa_points = 64, 32, 16", None).unwrap();
        assert_eq!(deep.sa_mlp.len(), 3);
        assert_eq!(deep.fp_mlp.len(), 3);
    }
}

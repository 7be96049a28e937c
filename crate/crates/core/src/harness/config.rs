//! Experiment configuration as `key=value` lines with dotted keys.
//!
//! ```text
//! # comment
//! seed=3
//! data.source=synthetic
//! train.lr=0.03
//! train.hidden=256,128
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::AugmentSpec;
use crate::encoder::TrainConfig;
use crate::error::{ClabError, Result};
use crate::harness::dataset::{DataSource, DatasetSpec, SynthSpec};
use crate::metrics::MetricConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// Fraction of samples held out for evaluation.
    pub holdout: f64,
    pub max_iters: usize,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
    /// L2 penalty on the classifier weights.
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            holdout: 0.2,
            max_iters: 10_000,
            tol: 1e-6,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DatasetSpec,
    pub augment: AugmentSpec,
    pub train: TrainConfig,
    pub metric: MetricConfig,
    /// Anchors used for the view metrics; 0 means the whole dataset.
    pub metric_samples: usize,
    pub probe: ProbeConfig,
    pub ablate_views: Vec<usize>,
    pub ablate_batch: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            data: DatasetSpec::default(),
            augment: AugmentSpec::default(),
            train: TrainConfig::default(),
            metric: MetricConfig::default(),
            metric_samples: 256,
            probe: ProbeConfig::default(),
            ablate_views: vec![2, 3, 4],
            ablate_batch: vec![32, 64, 128, 256, 512, 1024],
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| ClabError::Config(format!("{key}: cannot parse {value:?}")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ClabError::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| ClabError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ClabError::io(path, e))?;
        Self::parse(&text)
    }

    fn synth_mut(&mut self) -> &mut SynthSpec {
        if !matches!(self.data.source, DataSource::Synthetic(_)) {
            self.data.source = DataSource::Synthetic(SynthSpec::default());
        }
        match &mut self.data.source {
            DataSource::Synthetic(s) => s,
            DataSource::Cifar10 { .. } => unreachable!(),
        }
    }

    fn cifar_mut(&mut self) -> (&mut PathBuf, &mut Option<usize>) {
        if !matches!(self.data.source, DataSource::Cifar10 { .. }) {
            self.data.source = DataSource::Cifar10 {
                path: PathBuf::new(),
                limit: None,
            };
        }
        match &mut self.data.source {
            DataSource::Cifar10 { path, limit } => (path, limit),
            DataSource::Synthetic(_) => unreachable!(),
        }
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let a = &mut self.augment;
        let t = &mut self.train;
        let m = &mut self.metric;
        let p = &mut self.probe;
        match key {
            "seed" => self.seed = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "data.source" => match v {
                "synthetic" => {
                    self.synth_mut();
                }
                "cifar10" => {
                    self.cifar_mut();
                }
                _ => {
                    return Err(ClabError::Config(format!(
                        "data.source: unknown source {v:?}"
                    )))
                }
            },
            "data.label_fraction" => self.data.label_fraction = num(key, v)?,
            "data.classes" => self.synth_mut().classes = num(key, v)?,
            "data.per_class" => self.synth_mut().per_class = num(key, v)?,
            "data.size" => self.synth_mut().size = num(key, v)?,
            "data.channels" => self.synth_mut().channels = num(key, v)?,
            "data.noise" => self.synth_mut().noise = num(key, v)?,
            "data.path" => *self.cifar_mut().0 = PathBuf::from(v),
            "data.limit" => *self.cifar_mut().1 = Some(num(key, v)?),
            "aug.kind" => a.kind = v.parse()?,
            "aug.erase_prob" => a.erase_prob = num(key, v)?,
            "aug.area_min" => a.area_range.0 = num(key, v)?,
            "aug.area_max" => a.area_range.1 = num(key, v)?,
            "aug.aspect_min" => a.aspect_range.0 = num(key, v)?,
            "aug.aspect_max" => a.aspect_range.1 = num(key, v)?,
            "aug.cutout_size" => a.cutout_size = num(key, v)?,
            "aug.cutout_fill" => a.cutout_fill = v.parse()?,
            "aug.mixup_alpha" => a.mixup_alpha = num(key, v)?,
            "aug.crop_min" => a.crop_scale.0 = num(key, v)?,
            "aug.crop_max" => a.crop_scale.1 = num(key, v)?,
            "aug.flip_prob" => a.flip_prob = num(key, v)?,
            "train.lr" => t.lr = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.momentum" => t.momentum = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.lr_milestones" => t.lr_milestones = list(key, v)?,
            "train.key_momentum" => t.key_momentum = num(key, v)?,
            "train.tau" => t.tau = num(key, v)?,
            "train.queue_size" => t.queue_size = num(key, v)?,
            "train.views" => t.views = num(key, v)?,
            "train.hidden" => t.hidden = list(key, v)?,
            "train.embed_dim" => t.embed_dim = num(key, v)?,
            "metric.sigma" => m.sigma = num(key, v)?,
            "metric.views" => m.views = num(key, v)?,
            "metric.encoder" => m.anchor_encoding = v.parse()?,
            "metric.similarity" => m.similarity = v.parse()?,
            "metric.samples" => self.metric_samples = num(key, v)?,
            "probe.holdout" => p.holdout = num(key, v)?,
            "probe.max_iters" => p.max_iters = num(key, v)?,
            "probe.tol" => p.tol = num(key, v)?,
            "probe.l2" => p.l2 = num(key, v)?,
            "ablate.views" => self.ablate_views = list(key, v)?,
            "ablate.batch" => self.ablate_batch = list(key, v)?,
            _ => return Err(ClabError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        self.metric.validate()?;
        if !(self.probe.holdout > 0.0 && self.probe.holdout < 1.0) {
            return Err(ClabError::Config(format!(
                "probe.holdout {} outside (0, 1)",
                self.probe.holdout
            )));
        }
        if self.probe.l2 < 0.0 || self.probe.tol < 0.0 {
            return Err(ClabError::Config(
                "probe.l2 and probe.tol must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Renders every setting so that `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        match &self.data.source {
            DataSource::Synthetic(x) => {
                kv("data.source", "synthetic".into());
                kv("data.classes", x.classes.to_string());
                kv("data.per_class", x.per_class.to_string());
                kv("data.size", x.size.to_string());
                kv("data.channels", x.channels.to_string());
                kv("data.noise", x.noise.to_string());
            }
            DataSource::Cifar10 { path, limit } => {
                kv("data.source", "cifar10".into());
                kv("data.path", path.display().to_string());
                if let Some(l) = limit {
                    kv("data.limit", l.to_string());
                }
            }
        }
        kv("data.label_fraction", self.data.label_fraction.to_string());
        let a = &self.augment;
        kv("aug.kind", a.kind.to_string());
        kv("aug.erase_prob", a.erase_prob.to_string());
        kv("aug.area_min", a.area_range.0.to_string());
        kv("aug.area_max", a.area_range.1.to_string());
        kv("aug.aspect_min", a.aspect_range.0.to_string());
        kv("aug.aspect_max", a.aspect_range.1.to_string());
        kv("aug.cutout_size", a.cutout_size.to_string());
        kv("aug.cutout_fill", a.cutout_fill.to_string());
        kv("aug.mixup_alpha", a.mixup_alpha.to_string());
        kv("aug.crop_min", a.crop_scale.0.to_string());
        kv("aug.crop_max", a.crop_scale.1.to_string());
        kv("aug.flip_prob", a.flip_prob.to_string());
        let t = &self.train;
        kv("train.lr", t.lr.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.momentum", t.momentum.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.lr_milestones", join(&t.lr_milestones));
        kv("train.key_momentum", t.key_momentum.to_string());
        kv("train.tau", t.tau.to_string());
        kv("train.queue_size", t.queue_size.to_string());
        kv("train.views", t.views.to_string());
        kv("train.hidden", join(&t.hidden));
        kv("train.embed_dim", t.embed_dim.to_string());
        let m = &self.metric;
        kv("metric.sigma", m.sigma.to_string());
        kv("metric.views", m.views.to_string());
        kv("metric.encoder", m.anchor_encoding.to_string());
        kv("metric.similarity", m.similarity.to_string());
        kv("metric.samples", self.metric_samples.to_string());
        let p = &self.probe;
        kv("probe.holdout", p.holdout.to_string());
        kv("probe.max_iters", p.max_iters.to_string());
        kv("probe.tol", p.tol.to_string());
        kv("probe.l2", p.l2.to_string());
        kv("ablate.views", join(&self.ablate_views));
        kv("ablate.batch", join(&self.ablate_batch));
        s
    }
}

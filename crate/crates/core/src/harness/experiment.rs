//! Full runs (pre-train, probe, metrics) and the view/batch ablations.

use std::time::{Duration, Instant};

use crate::checkpoint::Checkpoint;
use crate::error::{ClabError, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::dataset::Dataset;
use crate::harness::probe::{linear_probe, ProbeResult};
use crate::harness::report::TableRow;
use crate::harness::streams;
use crate::harness::train::{pretrain, view_size, TrainReport};
use crate::metrics::{evaluate_views, EncoderChoice, MetricReport};
use crate::rng::RngStream;

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub train: TrainReport,
    pub metrics: MetricReport,
    pub probe: ProbeResult,
    pub wall_clock: Duration,
}

impl RunReport {
    pub fn row(&self, label: impl Into<String>) -> TableRow {
        TableRow {
            config: label.into(),
            top1: self.probe.top1,
            top5: self.probe.top5,
            l_inv: self.metrics.l_inv,
            l_div: self.metrics.l_div,
        }
    }
}

/// View metrics for `ck` on a seeded subset of `cfg.metric_samples` anchors.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    ck: &Checkpoint,
    data: &Dataset,
) -> Result<MetricReport> {
    let root = RngStream::new(cfg.seed).fork(streams::METRICS);
    let n = if cfg.metric_samples == 0 {
        data.len()
    } else {
        cfg.metric_samples.min(data.len())
    };
    let mut pick = root.fork(0).permutation(data.len());
    pick.truncate(n);
    let anchors: Vec<_> = pick.iter().map(|&i| data.images[i].clone()).collect();
    let encoder = match cfg.metric.anchor_encoding {
        EncoderChoice::Query => &ck.query,
        EncoderChoice::Key => &ck.key,
    };
    evaluate_views(
        &anchors,
        &data.images,
        encoder,
        &cfg.augment,
        &cfg.metric,
        view_size(data),
        &root.fork(1),
    )
}

/// Linear probe on the frozen query encoder of `ck`.
pub fn probe_checkpoint(
    cfg: &ExperimentConfig,
    ck: &Checkpoint,
    data: &Dataset,
) -> Result<ProbeResult> {
    let mut rng = RngStream::new(cfg.seed).fork(streams::PROBE);
    linear_probe(&ck.query, data, view_size(data), &cfg.probe, &mut rng)
}

pub fn run_experiment(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Checkpoint, RunReport)> {
    let start = Instant::now();
    let (ck, train) = pretrain(cfg, data)?;
    let probe = probe_checkpoint(cfg, &ck, data)?;
    let metrics = evaluate_checkpoint(cfg, &ck, data)?;
    Ok((
        ck,
        RunReport {
            config: cfg.clone(),
            train,
            metrics,
            probe,
            wall_clock: start.elapsed(),
        },
    ))
}

/// One run per view count; each run trains and measures with `V` views.
pub fn ablate_views(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<TableRow>> {
    cfg.ablate_views
        .iter()
        .map(|&v| {
            if v < 2 {
                return Err(ClabError::Config(format!(
                    "view count {v} must be at least 2"
                )));
            }
            let mut c = cfg.clone();
            c.train.views = v;
            c.metric.views = v;
            let (_, report) = run_experiment(&c, data)?;
            log::info!(
                "V={v}: top1 {:.2} ({:.1?})",
                report.probe.top1,
                report.wall_clock
            );
            Ok(report.row(format!("V={v}")))
        })
        .collect()
}

/// One run per batch size.
pub fn ablate_batch(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<TableRow>> {
    cfg.ablate_batch
        .iter()
        .map(|&n| {
            if n == 0 || n > data.len() {
                return Err(ClabError::Config(format!(
                    "batch size {n} outside 1..={} (dataset size)",
                    data.len()
                )));
            }
            let mut c = cfg.clone();
            c.train.batch_size = n;
            let (_, report) = run_experiment(&c, data)?;
            log::info!(
                "N={n}: top1 {:.2} ({:.1?})",
                report.probe.top1,
                report.wall_clock
            );
            Ok(report.row(format!("N={n}")))
        })
        .collect()
}

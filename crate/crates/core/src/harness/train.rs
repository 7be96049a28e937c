//! Momentum-contrast pre-training loop.

use rayon::prelude::*;

use crate::augment::make_views;
use crate::checkpoint::Checkpoint;
use crate::encoder::{backward, forward, momentum_update, sgd_step, EncoderParams, GradBuffer};
use crate::error::{ClabError, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::dataset::{label_split, Dataset};
use crate::harness::streams;
use crate::objectives::{loss_semi, LabelMask, NegativeQueue, SemiSample};
use crate::rng::RngStream;
use crate::tensor::{EmbeddingBatch, EmbeddingVector, ImageTensor};

/// Samples per parallel work unit. Fixed so gradient summation order, and
/// therefore the result, does not depend on the thread count.
const MICRO_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub batch_losses: Vec<BatchLoss>,
    pub epoch_losses: Vec<f64>,
    pub labeled: usize,
}

struct MicroResult {
    grads: GradBuffer,
    loss: f64,
    keys: Vec<EmbeddingVector>,
    masks: Vec<LabelMask>,
}

struct Queues {
    labeled: NegativeQueue,
    unlabeled: NegativeQueue,
}

impl Queues {
    fn push(&mut self, keys: Vec<EmbeddingVector>, masks: &[LabelMask]) -> Result<()> {
        let dim = self.labeled.dim();
        let mut d = (Vec::new(), Vec::new());
        let mut u = Vec::new();
        for (k, m) in keys.into_iter().zip(masks) {
            if !k.is_normalized() {
                log::warn!("skipping a degenerate key embedding");
                continue;
            }
            match m {
                LabelMask::Labeled(l) => {
                    d.0.push(k);
                    d.1.push(Some(*l));
                }
                LabelMask::Unlabeled => u.push(k),
            }
        }
        if !d.0.is_empty() {
            self.labeled.push(&EmbeddingBatch::new(dim, d.0)?, &d.1)?;
        }
        if !u.is_empty() {
            let labels = vec![None; u.len()];
            self.unlabeled
                .push(&EmbeddingBatch::new(dim, u)?, &labels)?;
        }
        Ok(())
    }
}

/// Input width of the encoder for `data` (views are resized to the image height).
pub fn input_dim(data: &Dataset) -> Result<usize> {
    let (h, _, c) = data
        .image_size()
        .ok_or_else(|| ClabError::Shape("dataset is empty".into()))?;
    Ok(h * h * c)
}

pub fn view_size(data: &Dataset) -> usize {
    data.image_size().map_or(0, |s| s.0)
}

/// Fresh run state for `cfg`: initialized query encoder, key copy, zero velocity.
pub fn init_checkpoint(cfg: &ExperimentConfig, data: &Dataset) -> Result<Checkpoint> {
    let sizes = cfg.train.layer_sizes(input_dim(data)?);
    let mut rng = RngStream::new(cfg.seed).fork(streams::INIT);
    Ok(Checkpoint::new(EncoderParams::init(&sizes, &mut rng)?))
}

/// Labeled-sample mask for `cfg`'s label fraction.
pub fn labeled_mask(cfg: &ExperimentConfig, n: usize) -> Vec<bool> {
    label_split(
        n,
        cfg.data.label_fraction,
        &mut RngStream::new(cfg.seed).fork(streams::SPLIT),
    )
}

/// Pre-trains the query encoder on `data`. With label fraction 0 no label is ever read.
pub fn pretrain(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ClabError::Shape("dataset is empty".into()));
    }
    let t = &cfg.train;
    let root = RngStream::new(cfg.seed);
    let mut ck = init_checkpoint(cfg, data)?;
    let labeled = labeled_mask(cfg, data.len());
    let masks: Vec<LabelMask> = labeled
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l {
                LabelMask::Labeled(data.labels[i])
            } else {
                LabelMask::Unlabeled
            }
        })
        .collect();
    // Both queues start from the same random keys, so label fractions 0 and 1
    // coincide until the first labeled key is pushed.
    let initial = NegativeQueue::random(t.queue_size, t.embed_dim, &mut root.fork(streams::QUEUE))?;
    let mut queues = Queues {
        labeled: initial.clone(),
        unlabeled: initial,
    };
    let shuffle = root.fork(streams::SHUFFLE);
    let views = root.fork(streams::VIEWS);
    let out = view_size(data);

    let mut report = TrainReport {
        labeled: labeled.iter().filter(|&&l| l).count(),
        ..TrainReport::default()
    };
    for epoch in 0..t.epochs {
        let order = shuffle.fork(epoch as u64).permutation(data.len());
        let epoch_views = views.fork(epoch as u64);
        let hyper = t.sgd_at(epoch);
        let mut epoch_sum = 0.0;
        let batches = order.chunks(t.batch_size);
        let n_batches = batches.len();
        for (b, batch) in batches.enumerate() {
            let parts: Vec<MicroResult> = batch
                .par_chunks(MICRO_BATCH)
                .map(|micro| {
                    let env = MicroEnv {
                        cfg,
                        data,
                        ck: &ck,
                        queues: &queues,
                        masks: &masks,
                        rng: &epoch_views,
                        out,
                        scale: 1.0 / batch.len() as f64,
                    };
                    env.run(micro)
                })
                .collect::<Result<_>>()?;
            let mut grads = GradBuffer::zeros_like(&ck.query);
            let mut loss = 0.0;
            let mut keys = Vec::with_capacity(batch.len());
            let mut key_masks = Vec::with_capacity(batch.len());
            for p in parts {
                grads.add_scaled(&p.grads, 1.0)?;
                loss += p.loss;
                keys.extend(p.keys);
                key_masks.extend(p.masks);
            }
            let loss = loss / batch.len() as f64;
            if !loss.is_finite() {
                return Err(ClabError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    value: loss,
                });
            }
            sgd_step(&mut ck.query, &grads, &mut ck.velocity, hyper)?;
            momentum_update(&mut ck.key, &ck.query, t.key_momentum)?;
            queues.push(keys, &key_masks)?;
            ck.step += 1;
            epoch_sum += loss;
            report.batch_losses.push(BatchLoss {
                epoch,
                batch: b,
                loss,
            });
        }
        let mean = epoch_sum / n_batches as f64;
        log::info!("epoch {epoch}: loss {mean:.5} (lr {})", hyper.lr);
        report.epoch_losses.push(mean);
    }
    Ok((ck, report))
}

struct MicroEnv<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Dataset,
    ck: &'a Checkpoint,
    queues: &'a Queues,
    masks: &'a [LabelMask],
    rng: &'a RngStream,
    out: usize,
    /// Multiplier turning per-sample loss gradients into batch-mean gradients.
    scale: f64,
}

impl MicroEnv<'_> {
    /// Views, encodings, losses and the summed query gradient for `samples`.
    /// View 0 of each sample is the key; the remaining views are queries.
    fn run(&self, samples: &[usize]) -> Result<MicroResult> {
        let v = self.cfg.train.views;
        let mut key_in = Vec::with_capacity(samples.len());
        let mut query_in = Vec::with_capacity(samples.len() * (v - 1));
        for &i in samples {
            let mut rng = self.rng.fork(i as u64);
            let set = make_views(
                i,
                &self.data.images[i],
                &self.data.images,
                v,
                &self.cfg.augment,
                self.out,
                &mut rng,
            )?;
            let mut it = set.views.iter().map(ImageTensor::to_f64);
            key_in.extend(it.next());
            query_in.extend(it);
        }
        let (keys, _) = forward(&self.ck.key, &key_in)?;
        let (queries, record) = forward(&self.ck.query, &query_in)?;
        let masks: Vec<LabelMask> = samples.iter().map(|&i| self.masks[i]).collect();
        let batch: Vec<SemiSample> = queries
            .rows()
            .iter()
            .enumerate()
            .map(|(r, q)| {
                let s = r / (v - 1);
                SemiSample {
                    q,
                    k_pos: keys.row(s),
                    mask: masks[s],
                }
            })
            .collect();
        let (loss, parts) = loss_semi(
            &batch,
            &self.queues.labeled,
            &self.queues.unlabeled,
            self.cfg.train.tau,
        )?;
        let upstream: Vec<Vec<f64>> = parts
            .iter()
            .map(|p| p.grad_q.values().iter().map(|g| g * self.scale).collect())
            .collect();
        let grads = backward(&self.ck.query, &record, &upstream)?;
        Ok(MicroResult {
            grads,
            loss,
            keys: keys.into_rows(),
            masks,
        })
    }
}

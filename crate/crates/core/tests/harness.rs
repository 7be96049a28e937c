use clab::checkpoint::Checkpoint;
use clab::encoder::EncoderParams;
use clab::harness::report::table_csv;
use clab::harness::train::init_checkpoint;
use clab::harness::{
    ablate_batch, ablate_views, evaluate_checkpoint, pretrain, probe_checkpoint, synth_dataset,
    Dataset, ExperimentConfig, SynthSpec,
};
use clab::rng::RngStream;

fn small_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("data.per_class", "16"),
        ("data.size", "8"),
        ("train.epochs", "2"),
        ("train.batch_size", "32"),
        ("train.hidden", "32"),
        ("train.embed_dim", "16"),
        ("train.queue_size", "64"),
        ("metric.samples", "32"),
        ("probe.max_iters", "300"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.seed = seed;
    cfg
}

fn data_for(cfg: &ExperimentConfig) -> Dataset {
    cfg.data.load(cfg.seed).unwrap()
}

fn flat(ck: &Checkpoint) -> Vec<f64> {
    ck.query.flat()
}

#[test]
fn zero_epochs_returns_initialization() {
    let mut cfg = small_config(3);
    cfg.train.epochs = 0;
    let data = data_for(&cfg);
    let (ck, report) = pretrain(&cfg, &data).unwrap();
    assert_eq!(ck, init_checkpoint(&cfg, &data).unwrap());
    assert!(report.batch_losses.is_empty());
}

#[test]
fn pretrain_is_deterministic() {
    let cfg = small_config(4);
    let data = data_for(&cfg);
    let (a, ra) = pretrain(&cfg, &data).unwrap();
    let (b, rb) = pretrain(&cfg, &data).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(ra, rb);
}

#[test]
fn unlabeled_runs_never_read_labels() {
    let cfg = small_config(5);
    let clean = data_for(&cfg);
    let mut poisoned = clean.clone();
    poisoned.labels.iter_mut().for_each(|l| *l = u32::MAX - 7);
    let (a, _) = pretrain(&cfg, &clean).unwrap();
    let (b, _) = pretrain(&cfg, &poisoned).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn full_labels_change_the_trajectory() {
    let mut cfg = small_config(6);
    let data = data_for(&cfg);
    let (self_sup, _) = pretrain(&cfg, &data).unwrap();
    cfg.data.label_fraction = 1.0;
    let (sup, _) = pretrain(&cfg, &data).unwrap();
    assert_ne!(flat(&self_sup), flat(&sup));

    // One batch only: the labeled queue still holds unlabeled random keys, so nothing is filtered.
    let mut one = small_config(6);
    one.train.epochs = 1;
    one.train.batch_size = data.len();
    let (a, _) = pretrain(&one, &data).unwrap();
    one.data.label_fraction = 1.0;
    let (b, _) = pretrain(&one, &data).unwrap();
    assert_eq!(flat(&a), flat(&b));
}

#[test]
fn loss_decreases_over_training() {
    // Batch 64 gives 16 steps per epoch on the 1024-sample set.
    for seed in 1..=3 {
        let mut cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        cfg.train.batch_size = 64;
        let data = data_for(&cfg);
        let (_, report) = pretrain(&cfg, &data).unwrap();
        let losses: Vec<f64> = report.batch_losses.iter().map(|b| b.loss).collect();
        let k = losses.len() / 10;
        let head: f64 = losses[..k].iter().sum::<f64>() / k as f64;
        let tail: f64 = losses[losses.len() - k..].iter().sum::<f64>() / k as f64;
        assert!(tail < head, "seed {seed}: first {head} last {tail}");
    }
}

#[test]
fn probe_leaves_checkpoint_untouched() {
    let cfg = small_config(7);
    let data = data_for(&cfg);
    let (ck, _) = pretrain(&cfg, &data).unwrap();
    let before = ck.to_bytes();
    let r = probe_checkpoint(&cfg, &ck, &data).unwrap();
    assert_eq!(ck.to_bytes(), before);
    assert!(r.top1 <= r.top5);
    assert!((0.0..=100.0).contains(&r.top1));
}

#[test]
fn random_encoder_probe_separates_gratings() {
    // The gratings are linearly separable, so even untrained features probe well above chance.
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = 0;
    let data = data_for(&cfg);
    let ck = init_checkpoint(&cfg, &data).unwrap();
    let r = probe_checkpoint(&cfg, &ck, &data).unwrap();
    assert!(r.top1 > 90.0, "{}", r.top1);
}

#[test]
fn two_class_probe_reports_full_top5() {
    let spec = SynthSpec {
        classes: 2,
        per_class: 20,
        size: 8,
        ..SynthSpec::default()
    };
    let data = synth_dataset(&spec, 1);
    let enc = EncoderParams::init(&[64, 16, 8], &mut RngStream::new(2)).unwrap();
    let mut cfg = small_config(1);
    cfg.probe.max_iters = 200;
    let r = probe_checkpoint(&cfg, &Checkpoint::new(enc), &data).unwrap();
    assert_eq!(r.top5, 100.0);
}

#[test]
fn nearest_centroid_separates_noisy_gratings() {
    let data = synth_dataset(
        &SynthSpec {
            noise: 0.1,
            ..SynthSpec::default()
        },
        11,
    );
    let dim = data.images[0].data().len();
    let mut centroids = vec![vec![0.0f64; dim]; 8];
    let mut counts = [0usize; 8];
    for (img, &l) in data.images.iter().zip(&data.labels) {
        for (c, &v) in centroids[l as usize].iter_mut().zip(img.data()) {
            *c += f64::from(v);
        }
        counts[l as usize] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let correct = data
        .images
        .iter()
        .zip(&data.labels)
        .filter(|(img, &l)| {
            let dist = |c: &Vec<f64>| {
                c.iter()
                    .zip(img.data())
                    .map(|(a, &b)| (a - f64::from(b)).powi(2))
                    .sum::<f64>()
            };
            let best = (0..8)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            best == l as usize
        })
        .count();
    assert!(correct as f64 / data.len() as f64 > 0.95);
}

#[test]
fn metrics_respect_bounds_after_training() {
    let cfg = small_config(8);
    let data = data_for(&cfg);
    let (ck, _) = pretrain(&cfg, &data).unwrap();
    let r = evaluate_checkpoint(&cfg, &ck, &data).unwrap();
    assert_eq!(r.anchors, 32);
    assert!(r.l_inv <= 1.0 + 1e-9 && r.l_inv >= -1.0 - 1e-9);
    assert!(r.l_div >= (-1.0f64).exp() - 1e-9 && r.l_div <= 1f64.exp() + 1e-9);
}

#[test]
fn ablations_emit_one_row_per_setting() {
    let mut cfg = small_config(9);
    cfg.train.epochs = 1;
    cfg.ablate_views = vec![2, 3];
    cfg.ablate_batch = vec![16, 32, 64];
    let data = data_for(&cfg);
    let views = ablate_views(&cfg, &data).unwrap();
    assert_eq!(views.len(), 2);
    assert_eq!(views[1].config, "V=3");
    for r in &views {
        assert!(r.l_div >= (-1.0f64).exp() - 1e-9 && r.l_div <= 1f64.exp() + 1e-9);
    }
    let batch = ablate_batch(&cfg, &data).unwrap();
    assert_eq!(batch.len(), 3);
    assert_eq!(
        table_csv(&batch),
        table_csv(&ablate_batch(&cfg, &data).unwrap())
    );

    cfg.ablate_batch = vec![data.len() + 1];
    assert!(ablate_batch(&cfg, &data).is_err());
    cfg.ablate_views = vec![1];
    assert!(ablate_views(&cfg, &data).is_err());
}

#[test]
fn multi_view_training_runs() {
    let mut cfg = small_config(10);
    cfg.train.views = 4;
    let data = data_for(&cfg);
    let (_, report) = pretrain(&cfg, &data).unwrap();
    assert!(report
        .batch_losses
        .iter()
        .all(|b| b.loss.is_finite() && b.loss >= 0.0));
}

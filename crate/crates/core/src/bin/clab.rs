use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use clab::augment::{cutmix, cutout, mixup, random_erasing, AugmentKind, AugmentSpec};
use clab::checkpoint::Checkpoint;
use clab::encoder::{backward, forward, EncoderParams};
use clab::harness::report::{
    loss_curve_csv, metric_summary_csv, per_anchor_csv, read_ppm, rect_csv, svg_line_chart,
    table_csv, write_ppm, write_text,
};
use clab::harness::{
    ablate_batch, ablate_views, evaluate_checkpoint, probe_checkpoint, run_experiment, Dataset,
    ExperimentConfig,
};
use clab::objectives::{loss_full, loss_grad_check, loss_self, NegativeQueue};
use clab::rng::RngStream;
use clab::tensor::EmbeddingVector;
use clab::{ClabError, Result};

#[derive(Parser)]
#[command(
    name = "clab",
    version,
    about = "Contrastive pre-training with view-quality metrics"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides `seed`)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Skip SVG charts
    #[arg(long, global = true)]
    no_plots: bool,
    /// Fraction of samples whose labels pre-training may use
    #[arg(long, global = true)]
    label_fraction: Option<f64>,
    /// none, erasing, cutout, cutmix or mixup
    #[arg(long, global = true, value_parser = parse_aug)]
    aug: Option<AugmentKind>,
}

fn parse_aug(s: &str) -> std::result::Result<AugmentKind, String> {
    s.parse().map_err(|e: ClabError| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Apply one augmentation to a PPM image
    Augment {
        input: PathBuf,
        /// Second image for cutmix/mixup (same size as the input)
        #[arg(long)]
        donor: Option<PathBuf>,
    },
    /// Pre-train, then probe and measure the result
    Pretrain,
    /// Linear probe of a checkpoint's query encoder
    Probe {
        /// Defaults to <out>/checkpoint.clab
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Invariance and diversity of a checkpoint's views
    Metrics {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// One run per view count
    AblateViews,
    /// One run per batch size
    AblateBatch,
    /// Compare analytic gradients with finite differences
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
}

fn resolve_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(f) = c.label_fraction {
        cfg.data.label_fraction = f;
    }
    if let Some(a) = c.aug {
        cfg.augment.kind = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out).map_err(|e| ClabError::io(&cfg.out, e))?;
    Ok(&cfg.out)
}

fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let data = cfg.data.load(cfg.seed)?;
    log::info!("{} samples, {} classes", data.len(), data.num_classes());
    Ok(data)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    let plots = !cli.common.no_plots;
    match cli.command {
        Command::Augment { input, donor } => augment(&cfg, &input, donor.as_deref()),
        Command::Pretrain => {
            let data = load_data(&cfg)?;
            let (ck, report) = run_experiment(&cfg, &data)?;
            let dir = out_dir(&cfg)?;
            ck.save(&dir.join("checkpoint.clab"))?;
            write_text(&dir.join("config.txt"), &cfg.to_text())?;
            write_text(&dir.join("loss_curve.csv"), &loss_curve_csv(&report.train))?;
            let label = format!("{} f={}", cfg.augment.kind, cfg.data.label_fraction);
            write_text(&dir.join("summary.csv"), &table_csv(&[report.row(label)]))?;
            if plots {
                let losses: Vec<f64> = report.train.batch_losses.iter().map(|b| b.loss).collect();
                write_text(
                    &dir.join("loss_curve.svg"),
                    &svg_line_chart("pre-training loss", "loss", &losses),
                )?;
            }
            println!(
                "top1 {:.2}%  top5 {:.2}%  L_inv {:.4}  L_div {:.4}  ({:.1?})",
                report.probe.top1,
                report.probe.top5,
                report.metrics.l_inv,
                report.metrics.l_div,
                report.wall_clock
            );
            Ok(())
        }
        Command::Probe { checkpoint } => {
            let ck = load_checkpoint(&cfg, checkpoint)?;
            let data = load_data(&cfg)?;
            let r = probe_checkpoint(&cfg, &ck, &data)?;
            let dir = out_dir(&cfg)?;
            write_text(
                &dir.join("probe.csv"),
                &format!("top1,top5,iters\n{},{},{}\n", r.top1, r.top5, r.iters),
            )?;
            println!(
                "top1 {:.2}%  top5 {:.2}%  ({} iterations)",
                r.top1, r.top5, r.iters
            );
            Ok(())
        }
        Command::Metrics { checkpoint } => {
            let ck = load_checkpoint(&cfg, checkpoint)?;
            let data = load_data(&cfg)?;
            let r = evaluate_checkpoint(&cfg, &ck, &data)?;
            let dir = out_dir(&cfg)?;
            write_text(
                &dir.join("metrics.csv"),
                &metric_summary_csv(&r, cfg.augment.kind.as_str()),
            )?;
            write_text(&dir.join("metrics_per_anchor.csv"), &per_anchor_csv(&r))?;
            println!(
                "L_inv {:.6}  L_div {:.6}  ({} anchors)",
                r.l_inv, r.l_div, r.anchors
            );
            Ok(())
        }
        Command::AblateViews => {
            let data = load_data(&cfg)?;
            let rows = ablate_views(&cfg, &data)?;
            let csv = table_csv(&rows);
            write_text(&out_dir(&cfg)?.join("ablate_views.csv"), &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::AblateBatch => {
            let data = load_data(&cfg)?;
            let rows = ablate_batch(&cfg, &data)?;
            let csv = table_csv(&rows);
            write_text(&out_dir(&cfg)?.join("ablate_batch.csv"), &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::Gradcheck { trials } => gradcheck(&cfg, trials),
    }
}

fn load_checkpoint(cfg: &ExperimentConfig, path: Option<PathBuf>) -> Result<Checkpoint> {
    Checkpoint::load(&path.unwrap_or_else(|| cfg.out.join("checkpoint.clab")))
}

fn augment(cfg: &ExperimentConfig, input: &Path, donor: Option<&Path>) -> Result<()> {
    let img = read_ppm(input)?;
    let spec: &AugmentSpec = &cfg.augment;
    let mut rng = RngStream::new(cfg.seed);
    let donor = match (spec.kind.needs_donor(), donor) {
        (true, Some(p)) => Some(read_ppm(p)?),
        (true, None) => return Err(ClabError::Config(format!("{} needs --donor", spec.kind))),
        (false, _) => None,
    };
    let (out, lambda, rect) = match spec.kind {
        AugmentKind::None => (img, 1.0, None),
        AugmentKind::RandomErasing => {
            let (o, r) = random_erasing(&img, spec, &mut rng);
            (o, 1.0, Some(r))
        }
        AugmentKind::CutOut => {
            let (o, r) = cutout(&img, spec, &mut rng);
            (o, 1.0, Some(r))
        }
        AugmentKind::CutMix => {
            let o = cutmix(&img, donor.as_ref().expect("checked"), spec, &mut rng)?;
            (o.image, o.lambda, Some(o.rect))
        }
        AugmentKind::MixUp => {
            let lambda = clab::augment::folded_beta(spec.mixup_alpha, &mut rng);
            (
                mixup(&img, donor.as_ref().expect("checked"), lambda)?,
                lambda,
                None,
            )
        }
    };
    let dir = out_dir(cfg)?;
    write_ppm(&dir.join("augmented.ppm"), &out)?;
    let meta = rect_csv(spec.kind.as_str(), lambda, rect);
    write_text(&dir.join("augment.csv"), &meta)?;
    print!("{meta}");
    Ok(())
}

fn gradcheck(cfg: &ExperimentConfig, trials: usize) -> Result<()> {
    let mut rng = RngStream::new(cfg.seed);
    let (mut worst_self, mut worst_full, mut worst_enc) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..trials {
        let dim = rng.below(15) + 2;
        let filled = rng.below(32) + 1;
        let mut queue = NegativeQueue::new(filled, dim)?;
        let keys: Vec<EmbeddingVector> = (0..filled)
            .map(|_| EmbeddingVector::detect(rng.unit_vector(dim)))
            .collect();
        let labels: Vec<_> = (0..filled)
            .map(|_| {
                if rng.bernoulli(0.2) {
                    None
                } else {
                    Some(rng.below(4) as u32)
                }
            })
            .collect();
        queue.push(&clab::tensor::EmbeddingBatch::new(dim, keys)?, &labels)?;
        let q = EmbeddingVector::detect(rng.unit_vector(dim));
        let k = EmbeddingVector::detect(rng.unit_vector(dim));
        let tau = rng.uniform_in(0.1, 1.0);
        let label = rng.below(4) as u32;
        worst_self = worst_self.max(loss_grad_check(&q, 1e-5, |x| {
            loss_self(x, &k, &queue, tau)
        })?);
        worst_full = worst_full.max(loss_grad_check(&q, 1e-5, |x| {
            loss_full(x, &k, &queue, label, tau)
        })?);
        worst_enc = worst_enc.max(encoder_check(&mut rng)?);
    }
    let dir = out_dir(cfg)?;
    let csv = format!("check,max_rel_err\nloss_self,{worst_self:e}\nloss_full,{worst_full:e}\nencoder,{worst_enc:e}\n");
    write_text(&dir.join("gradcheck.csv"), &csv)?;
    print!("{csv}");
    if worst_self.max(worst_full).max(worst_enc) < 1e-4 {
        Ok(())
    } else {
        Err(ClabError::Config("gradient check exceeded 1e-4".into()))
    }
}

/// Finite-difference check of the full encoder on `L = c · embedding`.
/// Instances whose pre-head norm nearly vanishes (all hidden units dead) are
/// redrawn: the normalization is singular there and differences blow up.
fn encoder_check(rng: &mut RngStream) -> Result<f64> {
    let (params, x) = loop {
        let params = EncoderParams::init(&[4, 6, 5, 3], rng)?;
        let x: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..4).map(|_| rng.normal()).collect())
            .collect();
        let (_, record) = forward(&params, &x)?;
        if (0..x.len()).all(|i| record.head_norm(i) > 0.1) {
            break (params, x);
        }
    };
    let c: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..3).map(|_| rng.normal()).collect())
        .collect();
    let loss = |p: &EncoderParams| -> Result<f64> {
        let (e, _) = forward(p, &x)?;
        Ok(e.rows()
            .iter()
            .zip(&c)
            .map(|(r, w)| r.values().iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
            .sum())
    };
    let (_, record) = forward(&params, &x)?;
    let analytic = backward(&params, &record, &c)?.flat();
    let flat = params.flat();
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for i in 0..flat.len() {
        let mut f = flat.clone();
        f[i] += 1e-5;
        probe.set_flat(&f)?;
        let lp = loss(&probe)?;
        f[i] -= 2e-5;
        probe.set_flat(&f)?;
        let lm = loss(&probe)?;
        let numeric = (lp - lm) / 2e-5;
        let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("CLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        ClabError::Config(format!("CLAB_THREADS={v:?} is not a positive integer"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| ClabError::Config(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let start = Instant::now();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => {
            log::info!("done in {:.1?}", start.elapsed());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

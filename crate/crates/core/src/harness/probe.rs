//! Linear probe: multinomial logistic regression on frozen embeddings.

use rayon::prelude::*;

use crate::augment::center_view;
use crate::encoder::{forward, EncoderParams};
use crate::error::{ClabError, Result};
use crate::harness::config::ProbeConfig;
use crate::harness::dataset::Dataset;
use crate::rng::RngStream;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    /// Held-out accuracy in percent.
    pub top1: f64,
    pub top5: f64,
    pub iters: usize,
    pub grad_norm: f64,
}

/// Normalized embeddings of the centred views of `images`, in input order.
pub fn embed(
    encoder: &EncoderParams,
    images: &[ImageTensor],
    out_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<Vec<Vec<f64>>> = images
        .par_chunks(64)
        .map(|chunk| {
            let inputs = chunk
                .iter()
                .map(|img| Ok(center_view(img, out_size)?.to_f64()))
                .collect::<Result<Vec<_>>>()?;
            let (emb, _) = forward(encoder, &inputs)?;
            Ok(emb
                .into_rows()
                .into_iter()
                .map(|e| e.into_values())
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Affine softmax classifier with weights `w[k][d]` and bias `b[k]`.
struct Softmax {
    k: usize,
    d: usize,
    /// `k × (d + 1)` row-major; the last column is the bias.
    theta: Vec<f64>,
}

impl Softmax {
    fn scores(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        for (c, s) in out.iter_mut().enumerate() {
            let row = &theta[c * (self.d + 1)..(c + 1) * (self.d + 1)];
            *s = row[self.d] + row[..self.d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Gradient of mean cross-entropy plus `l2/2·‖W‖²` at `theta`.
    fn gradient(&self, xs: &[Vec<f64>], ys: &[usize], theta: &[f64], l2: f64) -> Vec<f64> {
        let mut g = vec![0.0; theta.len()];
        let mut p = vec![0.0; self.k];
        let n = xs.len() as f64;
        for (x, &y) in xs.iter().zip(ys) {
            self.scores(x, theta, &mut p);
            let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in p.iter_mut() {
                *s = (*s - m).exp();
                z += *s;
            }
            for (c, pc) in p.iter().enumerate() {
                let r = (pc / z - if c == y { 1.0 } else { 0.0 }) / n;
                let row = &mut g[c * (self.d + 1)..(c + 1) * (self.d + 1)];
                for (gi, v) in row.iter_mut().zip(x) {
                    *gi += r * v;
                }
                row[self.d] += r;
            }
        }
        for c in 0..self.k {
            for j in 0..self.d {
                let i = c * (self.d + 1) + j;
                g[i] += l2 * theta[i];
            }
        }
        g
    }
}

/// Trains on all but a held-out `cfg.holdout` share of `features` (chosen by
/// `rng`) and reports held-out top-1/top-5 accuracy.
///
/// Optimizer: full-batch gradient descent with Nesterov momentum and step
/// `1/L`, where `L` bounds the loss curvature.
pub fn probe_features(
    features: &[Vec<f64>],
    labels: &[u32],
    cfg: &ProbeConfig,
    rng: &mut RngStream,
) -> Result<ProbeResult> {
    if features.len() != labels.len() || features.len() < 2 {
        return Err(ClabError::Shape(format!(
            "probe needs at least 2 labeled samples ({} features, {} labels)",
            features.len(),
            labels.len()
        )));
    }
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let ys: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label present"))
        .collect();
    let k = classes.len();
    let d = features[0].len();

    let n = features.len();
    let perm = rng.permutation(n);
    let n_test = ((cfg.holdout * n as f64).round() as usize).clamp(1, n - 1);
    let (test, train) = perm.split_at(n_test);
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| features[i].clone()).collect();
    let ts: Vec<usize> = train.iter().map(|&i| ys[i]).collect();

    let model = Softmax {
        k,
        d,
        theta: vec![0.0; k * (d + 1)],
    };
    let max_sq = xs
        .iter()
        .map(|x| x.iter().map(|v| v * v).sum::<f64>() + 1.0)
        .fold(0.0, f64::max);
    let lipschitz = 0.5 * max_sq + cfg.l2;
    let step = 1.0 / lipschitz;
    let beta = if cfg.l2 > 0.0 {
        let r = (lipschitz / cfg.l2).sqrt();
        (r - 1.0) / (r + 1.0)
    } else {
        0.9
    };
    let mut theta = model.theta.clone();
    let mut prev = theta.clone();
    let mut iters = 0;
    let mut grad_norm = f64::INFINITY;
    while iters < cfg.max_iters {
        let look: Vec<f64> = theta
            .iter()
            .zip(&prev)
            .map(|(t, p)| t + beta * (t - p))
            .collect();
        let g = model.gradient(&xs, &ts, &look, cfg.l2);
        grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if grad_norm < cfg.tol {
            theta = look;
            break;
        }
        prev = std::mem::replace(
            &mut theta,
            look.iter().zip(&g).map(|(t, gi)| t - step * gi).collect(),
        );
        iters += 1;
    }
    if k < 5 {
        log::warn!("{k} classes: top-5 accuracy is trivially 100%");
    }
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let mut s = vec![0.0; k];
    for &i in test {
        model.scores(&features[i], &theta, &mut s);
        let rank = s.iter().filter(|&&v| v > s[ys[i]]).count();
        top1 += usize::from(rank == 0);
        top5 += usize::from(rank < 5);
    }
    let pct = |c: usize| 100.0 * c as f64 / test.len() as f64;
    Ok(ProbeResult {
        top1: pct(top1),
        top5: pct(top5),
        iters,
        grad_norm,
    })
}

/// Freezes `encoder`, embeds `data` and fits the probe.
pub fn linear_probe(
    encoder: &EncoderParams,
    data: &Dataset,
    out_size: usize,
    cfg: &ProbeConfig,
    rng: &mut RngStream,
) -> Result<ProbeResult> {
    let features = embed(encoder, &data.images, out_size)?;
    probe_features(&features, &data.labels, cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(k: usize, per: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u32>) {
        let mut rng = RngStream::new(seed);
        let centers: Vec<Vec<f64>> = (0..k).map(|_| rng.unit_vector(6)).collect();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per {
                xs.push(center.iter().map(|v| v + 0.05 * rng.normal()).collect());
                ys.push(c as u32 * 3);
            }
        }
        (xs, ys)
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (xs, ys) = blobs(6, 40, 1);
        let r = probe_features(&xs, &ys, &ProbeConfig::default(), &mut RngStream::new(2)).unwrap();
        assert_eq!(r.top1, 100.0);
        assert!(r.top1 <= r.top5);
    }

    #[test]
    fn two_classes_give_full_top5() {
        let (xs, _) = blobs(2, 20, 3);
        let ys: Vec<u32> = (0..40).map(|i| (i % 2) as u32).collect();
        let r = probe_features(&xs, &ys, &ProbeConfig::default(), &mut RngStream::new(2)).unwrap();
        assert_eq!(r.top5, 100.0);
        assert!(r.top1 <= r.top5);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (xs, ys) = blobs(3, 5, 4);
        let ts: Vec<usize> = ys.iter().map(|&y| y as usize / 3).collect();
        let model = Softmax {
            k: 3,
            d: 6,
            theta: vec![],
        };
        let mut rng = RngStream::new(5);
        let theta: Vec<f64> = (0..21).map(|_| rng.normal()).collect();
        let l2 = 0.1;
        let loss = |th: &[f64]| {
            let mut s = vec![0.0; 3];
            let mut total = 0.0;
            for (x, &y) in xs.iter().zip(&ts) {
                model.scores(x, th, &mut s);
                let lse = s.iter().map(|v| v.exp()).sum::<f64>().ln();
                total += lse - s[y];
            }
            let reg: f64 = (0..3)
                .flat_map(|c| (0..6).map(move |j| c * 7 + j))
                .map(|i| th[i] * th[i])
                .sum();
            total / xs.len() as f64 + 0.5 * l2 * reg
        };
        let g = model.gradient(&xs, &ts, &theta, l2);
        for i in 0..theta.len() {
            let mut p = theta.clone();
            p[i] += 1e-5;
            let mut m = theta.clone();
            m[i] -= 1e-5;
            let fd = (loss(&p) - loss(&m)) / 2e-5;
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }
}

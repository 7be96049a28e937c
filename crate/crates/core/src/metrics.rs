//! View-quality metrics over encoded view sets.
//!
//! * invariance: `1/(N·V) Σᵢ Σᵥ S(qᵢᵛ, xᵢ) / S(xᵢ, xᵢ)`
//! * diversity:  `1/(N·V·(V-1)) Σᵢ Σᵥ Σ_{w≠v} exp(S(qᵢᵛ, qᵢʷ) / σ)`
//!
//! where `S` is the dot product, `xᵢ` the anchor embedding and `qᵢᵛ` its
//! augmented views. The diversity sum runs over ordered pairs.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::augment::{center_view, make_views, AugmentSpec};
use crate::encoder::{forward, EncoderParams};
use crate::error::{ClabError, Result};
use crate::rng::RngStream;
use crate::tensor::{dot_slices, EmbeddingBatch, EmbeddingVector, ImageTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderChoice {
    Query,
    Key,
}

impl FromStr for EncoderChoice {
    type Err = ClabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "query" => Ok(EncoderChoice::Query),
            "key" => Ok(EncoderChoice::Key),
            other => Err(ClabError::Config(format!(
                "unknown encoder {other:?} (expected query|key)"
            ))),
        }
    }
}

impl fmt::Display for EncoderChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderChoice::Query => "query",
            EncoderChoice::Key => "key",
        })
    }
}

/// Which embedding `S` is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    /// Unit-norm encoder output.
    Normalized,
    /// Last-layer output before normalization.
    Raw,
}

impl FromStr for Similarity {
    type Err = ClabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "normalized" => Ok(Similarity::Normalized),
            "raw" => Ok(Similarity::Raw),
            other => Err(ClabError::Config(format!(
                "unknown similarity {other:?} (expected normalized|raw)"
            ))),
        }
    }
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Similarity::Normalized => "normalized",
            Similarity::Raw => "raw",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    pub sigma: f64,
    pub views: usize,
    pub anchor_encoding: EncoderChoice,
    pub similarity: Similarity,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            views: 2,
            anchor_encoding: EncoderChoice::Query,
            similarity: Similarity::Normalized,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(ClabError::Config(format!(
                "sigma {} must be positive",
                self.sigma
            )));
        }
        if self.views < 2 {
            return Err(ClabError::Config(format!(
                "diversity needs at least 2 views, got {}",
                self.views
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub l_inv: f64,
    pub l_div: f64,
    pub per_anchor_inv: Vec<f64>,
    pub per_anchor_div: Vec<f64>,
    pub anchors: usize,
    /// Embeddings whose head norm vanished (normalized flag unset).
    pub zero_embeddings: usize,
    pub config: MetricConfig,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn check_views(views: &[Vec<EmbeddingVector>], dim: Option<usize>) -> Result<usize> {
    let v = views.first().map_or(0, Vec::len);
    if views.iter().any(|set| set.len() != v) {
        return Err(ClabError::Shape(
            "every anchor needs the same number of views".into(),
        ));
    }
    let dim = dim.or_else(|| {
        views
            .first()
            .and_then(|s| s.first())
            .map(EmbeddingVector::dim)
    });
    if let Some(d) = dim {
        if let Some(bad) = views.iter().flatten().find(|e| e.dim() != d) {
            return Err(ClabError::DimMismatch {
                left: d,
                right: bad.dim(),
            });
        }
    }
    Ok(v)
}

/// Per-anchor invariance `1/V Σᵥ S(qᵥ, x) / S(x, x)`.
pub fn invariance_per_anchor(
    anchors: &[EmbeddingVector],
    views: &[Vec<EmbeddingVector>],
) -> Result<Vec<f64>> {
    if anchors.len() != views.len() {
        return Err(ClabError::Shape(format!(
            "{} anchors but {} view sets",
            anchors.len(),
            views.len()
        )));
    }
    let v = check_views(views, anchors.first().map(EmbeddingVector::dim))?;
    if v == 0 {
        return Err(ClabError::Shape(
            "invariance needs at least one view".into(),
        ));
    }
    let self_sim: Vec<f64> = anchors
        .iter()
        .map(|x| dot_slices(x.values(), x.values()))
        .collect();
    let zero: Vec<usize> = self_sim
        .iter()
        .enumerate()
        .filter(|(_, s)| **s == 0.0)
        .map(|(i, _)| i)
        .collect();
    if !zero.is_empty() {
        return Err(ClabError::ZeroAnchors(zero));
    }
    Ok(anchors
        .iter()
        .zip(views)
        .zip(&self_sim)
        .map(|((x, set), sxx)| {
            set.iter()
                .map(|q| dot_slices(q.values(), x.values()) / sxx)
                .sum::<f64>()
                / v as f64
        })
        .collect())
}

pub fn invariance(anchors: &EmbeddingBatch, views: &[Vec<EmbeddingVector>]) -> Result<f64> {
    if anchors.is_empty() {
        return Err(ClabError::Shape("no anchors".into()));
    }
    Ok(mean(&invariance_per_anchor(anchors.rows(), views)?))
}

/// Per-anchor diversity `1/(V(V-1)) Σᵥ Σ_{w≠v} exp(S(qᵥ, q_w) / σ)`.
pub fn diversity_per_anchor(views: &[Vec<EmbeddingVector>], sigma: f64) -> Result<Vec<f64>> {
    let v = check_views(views, None)?;
    if v < 2 {
        return Err(ClabError::Config(format!(
            "diversity needs at least 2 views, got {v}"
        )));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(ClabError::Config(format!("sigma {sigma} must be positive")));
    }
    let pairs = (v * (v - 1)) as f64;
    Ok(views
        .iter()
        .map(|set| {
            let mut sum = 0.0;
            for (a, qa) in set.iter().enumerate() {
                for (b, qb) in set.iter().enumerate() {
                    if a != b {
                        sum += (dot_slices(qa.values(), qb.values()) / sigma).exp();
                    }
                }
            }
            sum / pairs
        })
        .collect())
}

pub fn diversity(views: &[Vec<EmbeddingVector>], sigma: f64) -> Result<f64> {
    if views.is_empty() {
        return Err(ClabError::Shape("no view sets".into()));
    }
    Ok(mean(&diversity_per_anchor(views, sigma)?))
}

struct AnchorEncoding {
    anchor: EmbeddingVector,
    views: Vec<EmbeddingVector>,
    zero: usize,
}

/// Encodes each image's centred anchor view and `cfg.views` augmented views
/// with `encoder`, then computes both metrics. Anchor `i` draws its views
/// from `rng.fork(i)`, so the report does not depend on thread count.
pub fn evaluate_views(
    images: &[ImageTensor],
    donors: &[ImageTensor],
    encoder: &EncoderParams,
    spec: &AugmentSpec,
    cfg: &MetricConfig,
    out_size: usize,
    rng: &RngStream,
) -> Result<MetricReport> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(ClabError::Shape("no images to evaluate".into()));
    }
    let encoded: Vec<AnchorEncoding> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let mut local = rng.fork(i as u64);
            let set = make_views(i, img, donors, cfg.views, spec, out_size, &mut local)?;
            let mut batch = Vec::with_capacity(cfg.views + 1);
            batch.push(center_view(img, out_size)?.to_f64());
            batch.extend(set.views.iter().map(ImageTensor::to_f64));
            let (emb, record) = forward(encoder, &batch)?;
            let pick = |j: usize| match cfg.similarity {
                Similarity::Normalized => emb.row(j).clone(),
                Similarity::Raw => EmbeddingVector::new(record.pre_head(j).to_vec()),
            };
            Ok(AnchorEncoding {
                anchor: pick(0),
                views: (1..=cfg.views).map(pick).collect(),
                zero: emb.rows().iter().filter(|e| !e.is_normalized()).count(),
            })
        })
        .collect::<Result<_>>()?;
    let zero_embeddings = encoded.iter().map(|e| e.zero).sum();
    if zero_embeddings > 0 {
        log::warn!("{zero_embeddings} embeddings had a vanishing head norm");
    }
    let (anchors, views): (Vec<_>, Vec<_>) =
        encoded.into_iter().map(|e| (e.anchor, e.views)).unzip();
    let per_anchor_inv = invariance_per_anchor(&anchors, &views)?;
    let per_anchor_div = diversity_per_anchor(&views, cfg.sigma)?;
    Ok(MetricReport {
        l_inv: mean(&per_anchor_inv),
        l_div: mean(&per_anchor_div),
        anchors: images.len(),
        per_anchor_inv,
        per_anchor_div,
        zero_embeddings,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentKind;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::detect(v.to_vec())
    }

    fn batch(rows: Vec<EmbeddingVector>) -> EmbeddingBatch {
        let d = rows[0].dim();
        EmbeddingBatch::new(d, rows).unwrap()
    }

    #[test]
    fn invariance_examples() {
        let anchors = batch(vec![ev(&[1.0, 0.0]), ev(&[0.0, 1.0])]);
        let same = vec![vec![ev(&[1.0, 0.0]); 3], vec![ev(&[0.0, 1.0]); 3]];
        assert_eq!(invariance(&anchors, &same).unwrap(), 1.0);

        let ortho = vec![vec![ev(&[0.0, 1.0]); 2], vec![ev(&[1.0, 0.0]); 2]];
        assert_eq!(invariance(&anchors, &ortho).unwrap(), 0.0);

        let one = batch(vec![ev(&[1.0, 0.0])]);
        let half = vec![vec![ev(&[1.0, 0.0]), ev(&[0.0, 1.0])]];
        assert_eq!(invariance(&one, &half).unwrap(), 0.5);
    }

    #[test]
    fn invariance_lists_zero_anchors() {
        let anchors = batch(vec![ev(&[1.0, 0.0]), ev(&[0.0, 0.0]), ev(&[0.0, 0.0])]);
        let views = vec![vec![ev(&[1.0, 0.0])]; 3];
        match invariance(&anchors, &views) {
            Err(ClabError::ZeroAnchors(ids)) => assert_eq!(ids, vec![1, 2]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn diversity_examples() {
        let same = vec![vec![ev(&[0.6, 0.8]); 4]];
        assert!((diversity(&same, 1.0).unwrap() - 1f64.exp()).abs() < 1e-15);
        assert!((diversity(&same, 2.0).unwrap() - 0.5f64.exp()).abs() < 1e-15);
        assert!((diversity(&same, 2.0).unwrap() - 1.64872).abs() < 1e-5);
        let ortho = vec![vec![ev(&[1.0, 0.0]), ev(&[0.0, 1.0])]];
        assert_eq!(diversity(&ortho, 1.0).unwrap(), 1.0);
        assert!(diversity(&[vec![ev(&[1.0, 0.0])]], 1.0).is_err());
    }

    #[test]
    fn diversity_counts_ordered_pairs() {
        // Three views with distinct pairwise dots: every unordered pair is counted twice.
        let views = vec![vec![ev(&[1.0, 0.0]), ev(&[0.0, 1.0]), ev(&[0.6, 0.8])]];
        let expect = (2.0 * (0f64.exp() + 0.6f64.exp() + 0.8f64.exp())) / 6.0;
        assert!((diversity(&views, 1.0).unwrap() - expect).abs() < 1e-15);
    }

    fn image(seed: u64) -> ImageTensor {
        let mut rng = RngStream::new(seed);
        ImageTensor::from_fn(10, 10, 1, |_, _, _| rng.uniform() as f32).unwrap()
    }

    #[test]
    fn evaluate_identity_views_give_unit_invariance() {
        let images: Vec<_> = (0..5).map(image).collect();
        let enc = EncoderParams::init(&[100, 16, 8], &mut RngStream::new(1)).unwrap();
        let spec = AugmentSpec {
            kind: AugmentKind::None,
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            ..AugmentSpec::default()
        };
        let cfg = MetricConfig {
            views: 3,
            ..MetricConfig::default()
        };
        let r = evaluate_views(&images, &[], &enc, &spec, &cfg, 10, &RngStream::new(2)).unwrap();
        assert!((r.l_inv - 1.0).abs() < 1e-9);
        assert!((r.l_div - 1f64.exp()).abs() < 1e-9);
        assert_eq!(r.l_inv, mean(&r.per_anchor_inv));
        assert_eq!(r.l_div, mean(&r.per_anchor_div));
    }

    #[test]
    fn evaluate_is_reproducible() {
        let images: Vec<_> = (0..6).map(image).collect();
        let enc = EncoderParams::init(&[64, 16, 8], &mut RngStream::new(1)).unwrap();
        let spec = AugmentSpec::new(AugmentKind::MixUp);
        let cfg = MetricConfig::default();
        let a = evaluate_views(&images, &images, &enc, &spec, &cfg, 8, &RngStream::new(5)).unwrap();
        let b = evaluate_views(&images, &images, &enc, &spec, &cfg, 8, &RngStream::new(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.anchors, 6);
    }

    #[test]
    fn zero_encoder_is_reported_as_error() {
        let images: Vec<_> = (0..2).map(image).collect();
        let enc = EncoderParams::zeros(&[64, 4]).unwrap();
        let err = evaluate_views(
            &images,
            &[],
            &enc,
            &AugmentSpec::default(),
            &MetricConfig::default(),
            8,
            &RngStream::new(0),
        );
        assert!(matches!(err, Err(ClabError::ZeroAnchors(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn unit_sets(
            seed: u64,
            n: usize,
            v: usize,
            dim: usize,
        ) -> (Vec<EmbeddingVector>, Vec<Vec<EmbeddingVector>>) {
            let mut rng = RngStream::new(seed);
            let anchors = (0..n).map(|_| ev(&rng.unit_vector(dim))).collect();
            let views = (0..n)
                .map(|_| (0..v).map(|_| ev(&rng.unit_vector(dim))).collect())
                .collect();
            (anchors, views)
        }

        proptest! {
            #[test]
            fn bounds_hold_for_unit_embeddings(seed in any::<u64>(), n in 1usize..6, v in 2usize..5, dim in 1usize..6, sigma in 0.1f64..5.0) {
                let (anchors, views) = unit_sets(seed, n, v, dim);
                let inv = mean(&invariance_per_anchor(&anchors, &views).unwrap());
                let div = diversity(&views, sigma).unwrap();
                prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&inv));
                prop_assert!(div >= (-1.0 / sigma).exp() - 1e-9);
                prop_assert!(div <= (1.0 / sigma).exp() + 1e-9);
            }

            #[test]
            fn diversity_ignores_view_order(seed in any::<u64>(), v in 2usize..6) {
                let (_, views) = unit_sets(seed, 3, v, 4);
                let mut rev = views.clone();
                rev.iter_mut().for_each(|s| s.reverse());
                let a = diversity(&views, 1.0).unwrap();
                let b = diversity(&rev, 1.0).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }

            #[test]
            fn diversity_non_increasing_in_sigma_for_nonnegative_dots(seed in any::<u64>(), s1 in 0.1f64..3.0, ds in 0.0f64..3.0) {
                // Positive-orthant vectors have pairwise dots >= 0.
                let mut rng = RngStream::new(seed);
                let views: Vec<Vec<EmbeddingVector>> = (0..3)
                    .map(|_| (0..3).map(|_| ev(&rng.unit_vector(4).into_iter().map(f64::abs).collect::<Vec<_>>())).collect())
                    .collect();
                prop_assert!(diversity(&views, s1 + ds).unwrap() <= diversity(&views, s1).unwrap() + 1e-15);
            }
        }
    }
}

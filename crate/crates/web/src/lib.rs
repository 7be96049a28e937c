//! Browser bindings for three interactive views of the `clab` library:
//! augmentation previews, InfoNCE loss against temperature, and the view
//! metrics for synthetic embeddings.

use clab::augment::{
    cutmix, cutout, folded_beta, mixup, random_erasing, AugmentKind, AugmentSpec, Rect,
};
use clab::harness::dataset::{DataSource, DatasetSpec, SynthSpec};
use clab::metrics::{diversity, invariance};
use clab::objectives::{loss_self, NegativeQueue};
use clab::rng::RngStream;
use clab::tensor::{l2_normalize, EmbeddingBatch, EmbeddingVector, ImageTensor};
use clab::{ClabError, Result};
use wasm_bindgen::prelude::*;

const PREVIEW_CLASSES: usize = 8;

/// Anchor, donor and augmented image laid out left to right as RGBA.
#[wasm_bindgen]
pub struct AugmentPreview {
    rgba: Vec<u8>,
    width: usize,
    height: usize,
    lambda: f64,
    rect: Option<Rect>,
}

#[wasm_bindgen]
impl AugmentPreview {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// `top,left,height,width` of the touched rectangle, or empty.
    pub fn rect(&self) -> String {
        self.rect
            .map(|r| format!("{},{},{},{}", r.top, r.left, r.height, r.width))
            .unwrap_or_default()
    }
}

fn to_js(e: ClabError) -> JsError {
    JsError::new(&e.to_string())
}

fn preview_images(size: usize, seed: u64) -> Result<(ImageTensor, ImageTensor)> {
    let spec = DatasetSpec {
        source: DataSource::Synthetic(SynthSpec {
            classes: PREVIEW_CLASSES,
            per_class: 1,
            size,
            channels: 3,
            noise: 0.1,
        }),
        label_fraction: 0.0,
    };
    spec.validate()?;
    let mut d = spec.load(seed)?;
    let donor = d.images.swap_remove(PREVIEW_CLASSES / 2);
    Ok((d.images.swap_remove(0), donor))
}

pub fn build_preview(
    kind: &str,
    seed: u64,
    size: usize,
    erase_prob: f64,
) -> Result<AugmentPreview> {
    let kind: AugmentKind = kind.parse()?;
    let (anchor, donor) = preview_images(size, seed)?;
    let mut spec = AugmentSpec::new(kind);
    spec.erase_prob = erase_prob;
    spec.validate()?;
    let mut rng = RngStream::new(seed).fork(1);
    let (out, lambda, rect) = match kind {
        AugmentKind::None => (anchor.clone(), 1.0, None),
        AugmentKind::RandomErasing => {
            let (img, r) = random_erasing(&anchor, &spec, &mut rng);
            (img, 1.0, (!r.is_empty()).then_some(r))
        }
        AugmentKind::CutOut => {
            let (img, r) = cutout(&anchor, &spec, &mut rng);
            (img, 1.0, (!r.is_empty()).then_some(r))
        }
        AugmentKind::CutMix => {
            let m = cutmix(&anchor, &donor, &spec, &mut rng)?;
            (m.image, m.lambda, Some(m.rect))
        }
        AugmentKind::MixUp => {
            let l = folded_beta(spec.mixup_alpha, &mut rng);
            (mixup(&anchor, &donor, l)?, l, None)
        }
    };
    let width = 3 * size;
    let mut rgba = vec![255u8; width * size * 4];
    for (slot, img) in [&anchor, &donor, &out].into_iter().enumerate() {
        for r in 0..size {
            for c in 0..size {
                let px = (r * width + slot * size + c) * 4;
                for k in 0..3 {
                    rgba[px + k] = (img.get(r, c, k) * 255.0).round() as u8;
                }
            }
        }
    }
    Ok(AugmentPreview {
        rgba,
        width,
        height: size,
        lambda,
        rect,
    })
}

/// Renders anchor, donor and one augmentation of the anchor.
#[wasm_bindgen]
pub fn augment_preview(
    kind: &str,
    seed: u64,
    size: usize,
    erase_prob: f64,
) -> std::result::Result<AugmentPreview, JsError> {
    build_preview(kind, seed, size, erase_prob).map_err(to_js)
}

fn on_circle(cos: f64) -> EmbeddingVector {
    let c = cos.clamp(-1.0, 1.0);
    EmbeddingVector::new(vec![c, (1.0 - c * c).sqrt()])
}

pub fn loss_curve(pos_cos: f64, neg_cos: &[f64], taus: &[f64]) -> Result<Vec<f64>> {
    let q = EmbeddingVector::new(vec![1.0, 0.0]);
    let k = on_circle(pos_cos);
    let negs: Vec<EmbeddingVector> = neg_cos.iter().map(|&c| on_circle(c)).collect();
    let mut queue = NegativeQueue::new(negs.len().max(1), 2)?;
    let labels = vec![None; negs.len()];
    queue.push(&EmbeddingBatch::new(2, negs)?, &labels)?;
    taus.iter()
        .map(|&t| Ok(loss_self(&q, &k, &queue, t)?.loss))
        .collect()
}

/// InfoNCE loss for a query at angle 0 with the positive and negatives given
/// by their cosine to the query, one value per temperature.
#[wasm_bindgen]
pub fn infonce_vs_tau(
    pos_cos: f64,
    neg_cos: Vec<f64>,
    taus: Vec<f64>,
) -> std::result::Result<Vec<f64>, JsError> {
    loss_curve(pos_cos, &neg_cos, &taus).map_err(to_js)
}

pub fn jitter_metrics(
    spread: f64,
    views: usize,
    sigma: f64,
    dim: usize,
    seed: u64,
) -> Result<[f64; 2]> {
    if views < 2 {
        return Err(ClabError::Config("at least two views are needed".into()));
    }
    let mut rng = RngStream::new(seed);
    let anchors: Vec<EmbeddingVector> = (0..32)
        .map(|_| EmbeddingVector::new(rng.unit_vector(dim)))
        .collect();
    let view_sets: Vec<Vec<EmbeddingVector>> = anchors
        .iter()
        .map(|a| {
            (0..views)
                .map(|_| {
                    let v = a
                        .values()
                        .iter()
                        .map(|x| x + spread * rng.normal())
                        .collect();
                    l2_normalize(&EmbeddingVector::new(v))
                })
                .collect()
        })
        .collect();
    let inv = invariance(&EmbeddingBatch::new(dim, anchors)?, &view_sets)?;
    Ok([inv, diversity(&view_sets, sigma)?])
}

/// `[L_inv, L_div]` for 32 random unit anchors whose views are the anchor
/// plus Gaussian noise of scale `spread`, renormalized.
#[wasm_bindgen]
pub fn view_metrics(
    spread: f64,
    views: usize,
    sigma: f64,
    dim: usize,
    seed: u64,
) -> std::result::Result<Vec<f64>, JsError> {
    jitter_metrics(spread, views, sigma, dim, seed)
        .map(Vec::from)
        .map_err(to_js)
}

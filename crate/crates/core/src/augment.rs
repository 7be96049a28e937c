//! View construction: a crop+flip base pipeline followed by one of the four
//! masking/mixing augmentations (Random Erasing, CutOut, CutMix, MixUp).
//!
//! Every randomized operation has a deterministic `*_at`/`*_with` twin that
//! takes the random draws explicitly. The randomized entry points draw their
//! parameters from the supplied [`RngStream`] and delegate.

use std::fmt;
use std::str::FromStr;

use crate::error::{ClabError, Result};
use crate::rng::RngStream;
use crate::tensor::ImageTensor;

/// Random Erasing gives up after this many rejected rectangles.
const ERASE_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugmentKind {
    None,
    RandomErasing,
    CutOut,
    CutMix,
    MixUp,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 5] = [
        AugmentKind::None,
        AugmentKind::RandomErasing,
        AugmentKind::CutOut,
        AugmentKind::CutMix,
        AugmentKind::MixUp,
    ];

    pub fn needs_donor(self) -> bool {
        matches!(self, AugmentKind::CutMix | AugmentKind::MixUp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentKind::None => "none",
            AugmentKind::RandomErasing => "erasing",
            AugmentKind::CutOut => "cutout",
            AugmentKind::CutMix => "cutmix",
            AugmentKind::MixUp => "mixup",
        }
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugmentKind {
    type Err = ClabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(AugmentKind::None),
            "erasing" | "random_erasing" | "randomerasing" => Ok(AugmentKind::RandomErasing),
            "cutout" => Ok(AugmentKind::CutOut),
            "cutmix" => Ok(AugmentKind::CutMix),
            "mixup" => Ok(AugmentKind::MixUp),
            other => Err(ClabError::Config(format!(
                "unknown augmentation {other:?} (expected none|erasing|cutout|cutmix|mixup)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutoutFill {
    Zero,
    Mean,
}

impl FromStr for CutoutFill {
    type Err = ClabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "zero" => Ok(CutoutFill::Zero),
            "mean" => Ok(CutoutFill::Mean),
            other => Err(ClabError::Config(format!(
                "unknown cutout fill {other:?} (expected zero|mean)"
            ))),
        }
    }
}

impl fmt::Display for CutoutFill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CutoutFill::Zero => "zero",
            CutoutFill::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    /// Probability that Random Erasing fires at all.
    pub erase_prob: f64,
    /// Erased area as a fraction of the image, sampled uniformly.
    pub area_range: (f64, f64),
    /// Erased aspect ratio (h/w), sampled log-uniformly.
    pub aspect_range: (f64, f64),
    /// CutOut square side as a fraction of `min(H, W)`.
    pub cutout_size: f64,
    pub cutout_fill: CutoutFill,
    /// `Beta(alpha, alpha)` parameter for MixUp and CutMix.
    pub mixup_alpha: f64,
    /// Base crop area as a fraction of the source, sampled uniformly.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            kind: AugmentKind::None,
            erase_prob: 0.5,
            area_range: (0.02, 0.33),
            aspect_range: (0.3, 3.33),
            cutout_size: 0.5,
            cutout_fill: CutoutFill::Zero,
            mixup_alpha: 1.0,
            crop_scale: (0.5, 1.0),
            flip_prob: 0.5,
        }
    }
}

impl AugmentSpec {
    pub fn new(kind: AugmentKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ClabError::Config(msg));
        if !(0.0..=1.0).contains(&self.erase_prob) {
            return bad(format!(
                "erase probability {} outside [0, 1]",
                self.erase_prob
            ));
        }
        let (lo, hi) = self.area_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad(format!(
                "area range ({lo}, {hi}) must satisfy 0 < low <= high < 1"
            ));
        }
        let (alo, ahi) = self.aspect_range;
        if !(alo > 0.0 && alo <= ahi) {
            return bad(format!(
                "aspect range ({alo}, {ahi}) must satisfy 0 < low <= high"
            ));
        }
        if !(0.0..=1.0).contains(&self.cutout_size) {
            return bad(format!("cutout size {} outside [0, 1]", self.cutout_size));
        }
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return bad(format!("mixup alpha {} must be positive", self.mixup_alpha));
        }
        let (clo, chi) = self.crop_scale;
        if !(clo > 0.0 && clo <= chi && chi <= 1.0) {
            return bad(format!(
                "crop scale ({clo}, {chi}) must satisfy 0 < low <= high <= 1"
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!(
                "flip probability {} outside [0, 1]",
                self.flip_prob
            ));
        }
        Ok(())
    }
}

/// Axis-aligned pixel rectangle `[top, top+height) x [left, left+width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub const EMPTY: Rect = Rect {
        top: 0,
        left: 0,
        height: 0,
        width: 0,
    };

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top
            && row < self.top + self.height
            && col >= self.left
            && col < self.left + self.width
    }

    /// Rectangle of nominal size `height x width` centred on `(row, col)`,
    /// clipped to a `bound_h x bound_w` image.
    pub fn centered_clipped(
        row: usize,
        col: usize,
        height: usize,
        width: usize,
        bound_h: usize,
        bound_w: usize,
    ) -> Rect {
        let clip = |center: usize, len: usize, bound: usize| {
            let start = center as isize - (len / 2) as isize;
            let end = start + len as isize;
            let s = start.clamp(0, bound as isize) as usize;
            let e = end.clamp(0, bound as isize) as usize;
            (s, e - s)
        };
        let (top, h) = clip(row, height, bound_h);
        let (left, w) = clip(col, width, bound_w);
        if h == 0 || w == 0 {
            return Rect::EMPTY;
        }
        Rect {
            top,
            left,
            height: h,
            width: w,
        }
    }
}

/// `V` augmented views of one anchor plus what was done to each.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub anchor_index: usize,
    pub views: Vec<ImageTensor>,
    /// Anchor weight per view; 1 when no mixing happened.
    pub lambdas: Vec<f64>,
    /// Rectangles each view's augmentation touched (empty for none/MixUp).
    pub mask_rects: Vec<Vec<Rect>>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Crops `window` out of `img`, bilinearly resizes it to `out x out`, and
/// optionally mirrors it horizontally.
pub fn crop_resize(img: &ImageTensor, window: Rect, out: usize, flip: bool) -> Result<ImageTensor> {
    if window.is_empty()
        || window.top + window.height > img.height()
        || window.left + window.width > img.width()
    {
        return Err(ClabError::InvalidImage(format!(
            "crop window {window:?} outside {}x{} image",
            img.height(),
            img.width()
        )));
    }
    if out == 0 {
        return Err(ClabError::InvalidImage("output size 0".into()));
    }
    let ch = img.channels();
    let src = img.data();
    let sy = window.height as f64 / out as f64;
    let sx = window.width as f64 / out as f64;
    // Source sample positions along each axis: (low index, high index, weight of high).
    let axis = |scale: f64, start: usize, len: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (start + lo, start + hi, pos - lo as f64)
            })
            .collect()
    };
    let rows = axis(sy, window.top, window.height);
    let cols = axis(sx, window.left, window.width);
    let mut data = vec![0.0f32; out * out * ch];
    for (i, &(r0, r1, wy)) in rows.iter().enumerate() {
        for (j, &(c0, c1, wx)) in cols.iter().enumerate() {
            let dst_col = if flip { out - 1 - j } else { j };
            for k in 0..ch {
                let p = |r: usize, c: usize| f64::from(src[(r * img.width() + c) * ch + k]);
                let top = p(r0, c0) * (1.0 - wx) + p(r0, c1) * wx;
                let bottom = p(r1, c0) * (1.0 - wx) + p(r1, c1) * wx;
                let v = top * (1.0 - wy) + bottom * wy;
                data[(i * out + dst_col) * ch + k] = (v as f32).clamp(0.0, 1.0);
            }
        }
    }
    Ok(ImageTensor::from_parts_unchecked(out, out, ch, data))
}

fn check_out_size(img: &ImageTensor, out_size: usize) -> Result<()> {
    if out_size == 0 || out_size > img.height().min(img.width()) {
        return Err(ClabError::InvalidImage(format!(
            "output size {out_size} does not fit a {}x{} image",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// The unaugmented anchor view: the largest centred square, resized to
/// `out_size`.
pub fn center_view(img: &ImageTensor, out_size: usize) -> Result<ImageTensor> {
    check_out_size(img, out_size)?;
    let side = img.height().min(img.width());
    let window = Rect {
        top: (img.height() - side) / 2,
        left: (img.width() - side) / 2,
        height: side,
        width: side,
    };
    crop_resize(img, window, out_size, false)
}

/// Draws the crop window and flip decision of a base view.
pub fn sample_base_window(
    img: &ImageTensor,
    spec: &AugmentSpec,
    rng: &mut RngStream,
) -> (Rect, bool) {
    let (h, w) = (img.height(), img.width());
    let scale = rng
        .uniform_in(spec.crop_scale.0, spec.crop_scale.1)
        .min(1.0);
    let side = scale.sqrt();
    let ch = ((h as f64 * side).round() as usize).clamp(1, h);
    let cw = ((w as f64 * side).round() as usize).clamp(1, w);
    let top = rng.below(h - ch + 1);
    let left = rng.below(w - cw + 1);
    let flip = rng.bernoulli(spec.flip_prob);
    (
        Rect {
            top,
            left,
            height: ch,
            width: cw,
        },
        flip,
    )
}

/// Random-area crop resized to `out_size x out_size`, then a random
/// horizontal flip. Crop area and flip probability come from `spec`.
pub fn base_view(
    img: &ImageTensor,
    out_size: usize,
    spec: &AugmentSpec,
    rng: &mut RngStream,
) -> Result<ImageTensor> {
    check_out_size(img, out_size)?;
    let (window, flip) = sample_base_window(img, spec, rng);
    crop_resize(img, window, out_size, flip)
}

/// Fills `rect` of `img` via `fill(channel)`.
fn fill_rect(img: &ImageTensor, rect: Rect, mut fill: impl FnMut(usize) -> f32) -> ImageTensor {
    let mut data = img.data().to_vec();
    let ch = img.channels();
    for r in rect.top..rect.top + rect.height {
        for c in rect.left..rect.left + rect.width {
            for k in 0..ch {
                data[(r * img.width() + c) * ch + k] = fill(k).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::from_parts_unchecked(img.height(), img.width(), ch, data)
}

/// Draws a Random Erasing rectangle, or `None` if no candidate fit within
/// the attempt budget.
pub fn sample_erase_rect(
    height: usize,
    width: usize,
    spec: &AugmentSpec,
    rng: &mut RngStream,
) -> Option<Rect> {
    let total = (height * width) as f64;
    let (log_lo, log_hi) = (spec.aspect_range.0.ln(), spec.aspect_range.1.ln());
    for _ in 0..ERASE_ATTEMPTS {
        let area = rng.uniform_in(spec.area_range.0, spec.area_range.1) * total;
        let aspect = rng.uniform_in(log_lo, log_hi).exp();
        let h = (area * aspect).sqrt().round() as usize;
        let w = (area / aspect).sqrt().round() as usize;
        if h == 0 || w == 0 || h >= height || w >= width {
            continue;
        }
        let top = rng.below(height - h + 1);
        let left = rng.below(width - w + 1);
        return Some(Rect {
            top,
            left,
            height: h,
            width: w,
        });
    }
    None
}

/// With probability `spec.erase_prob`, overwrites a random rectangle with
/// i.i.d. uniform noise. Returns the (possibly empty) rectangle touched.
pub fn random_erasing(
    img: &ImageTensor,
    spec: &AugmentSpec,
    rng: &mut RngStream,
) -> (ImageTensor, Rect) {
    if !rng.bernoulli(spec.erase_prob) {
        return (img.clone(), Rect::EMPTY);
    }
    match sample_erase_rect(img.height(), img.width(), spec, rng) {
        Some(rect) => (fill_rect(img, rect, |_| rng.uniform() as f32), rect),
        None => (img.clone(), Rect::EMPTY),
    }
}

/// CutOut with an explicit centre.
pub fn cutout_at(
    img: &ImageTensor,
    spec: &AugmentSpec,
    center_row: usize,
    center_col: usize,
) -> (ImageTensor, Rect) {
    let side = (spec.cutout_size * img.height().min(img.width()) as f64).round() as usize;
    let rect = Rect::centered_clipped(
        center_row,
        center_col,
        side,
        side,
        img.height(),
        img.width(),
    );
    if rect.is_empty() {
        return (img.clone(), Rect::EMPTY);
    }
    let out = match spec.cutout_fill {
        CutoutFill::Zero => fill_rect(img, rect, |_| 0.0),
        CutoutFill::Mean => {
            let means = img.channel_means();
            fill_rect(img, rect, |k| means[k])
        }
    };
    (out, rect)
}

/// Masks one square of side `cutout_size * min(H, W)` centred uniformly at
/// random, clipped to the image.
pub fn cutout(img: &ImageTensor, spec: &AugmentSpec, rng: &mut RngStream) -> (ImageTensor, Rect) {
    let row = rng.below(img.height());
    let col = rng.below(img.width());
    cutout_at(img, spec, row, col)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CutMixOutput {
    pub image: ImageTensor,
    /// Fraction of the output still taken from the anchor.
    pub lambda: f64,
    pub rect: Rect,
}

fn check_same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if !a.same_shape(b) {
        return Err(ClabError::Shape(format!(
            "anchor {}x{}x{} vs donor {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// CutMix with the folded coefficient `lambda0 ∈ [0.5, 1]` and patch centre given.
pub fn cutmix_with(
    anchor: &ImageTensor,
    donor: &ImageTensor,
    lambda0: f64,
    center_row: usize,
    center_col: usize,
) -> Result<CutMixOutput> {
    check_same_shape(anchor, donor)?;
    let (h, w) = (anchor.height(), anchor.width());
    let cut = (1.0 - lambda0).clamp(0.0, 1.0).sqrt();
    // Flooring keeps the unclipped patch at most (1 - lambda0) of the image.
    let ph = (h as f64 * cut).floor() as usize;
    let pw = (w as f64 * cut).floor() as usize;
    let rect = Rect::centered_clipped(center_row, center_col, ph, pw, h, w);
    let lambda = 1.0 - rect.area() as f64 / (h * w) as f64;
    let mut data = anchor.data().to_vec();
    let ch = anchor.channels();
    for r in rect.top..rect.top + rect.height {
        let start = (r * w + rect.left) * ch;
        let end = start + rect.width * ch;
        data[start..end].copy_from_slice(&donor.data()[start..end]);
    }
    Ok(CutMixOutput {
        image: ImageTensor::from_parts_unchecked(h, w, ch, data),
        lambda,
        rect,
    })
}

/// Draws `Beta(alpha, alpha)` and folds it onto `[0.5, 1]`.
pub fn folded_beta(alpha: f64, rng: &mut RngStream) -> f64 {
    let l = rng.beta_symmetric(alpha);
    l.max(1.0 - l)
}

/// Pastes the co-located donor patch onto the anchor. The returned `lambda`
/// is recomputed from the clipped patch area, so `1 - lambda` is exactly the
/// pasted fraction of the image.
pub fn cutmix(
    anchor: &ImageTensor,
    donor: &ImageTensor,
    spec: &AugmentSpec,
    rng: &mut RngStream,
) -> Result<CutMixOutput> {
    check_same_shape(anchor, donor)?;
    let lambda0 = folded_beta(spec.mixup_alpha, rng);
    let row = rng.below(anchor.height());
    let col = rng.below(anchor.width());
    cutmix_with(anchor, donor, lambda0, row, col)
}

/// Per-pixel convex combination `lambda * anchor + (1 - lambda) * donor`.
pub fn mixup(anchor: &ImageTensor, donor: &ImageTensor, lambda: f64) -> Result<ImageTensor> {
    check_same_shape(anchor, donor)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ClabError::Config(format!(
            "mixup coefficient {lambda} outside [0, 1]"
        )));
    }
    let data = anchor
        .data()
        .iter()
        .zip(donor.data())
        .map(|(&a, &b)| {
            ((lambda * f64::from(a) + (1.0 - lambda) * f64::from(b)) as f32).clamp(0.0, 1.0)
        })
        .collect();
    Ok(ImageTensor::from_parts_unchecked(
        anchor.height(),
        anchor.width(),
        anchor.channels(),
        data,
    ))
}

/// Builds `v` views of `anchor`: each is a base view followed by the
/// augmentation named in `spec`. Mixing augmentations draw a donor from
/// `donors` per view and pass it through its own base view first.
pub fn make_views(
    anchor_index: usize,
    anchor: &ImageTensor,
    donors: &[ImageTensor],
    v: usize,
    spec: &AugmentSpec,
    out_size: usize,
    rng: &mut RngStream,
) -> Result<ViewSet> {
    if v == 0 {
        return Err(ClabError::Config("at least one view is required".into()));
    }
    if spec.kind.needs_donor() && donors.is_empty() {
        return Err(ClabError::Config(format!(
            "{} needs a non-empty donor pool",
            spec.kind
        )));
    }
    let mut set = ViewSet {
        anchor_index,
        views: Vec::with_capacity(v),
        lambdas: Vec::with_capacity(v),
        mask_rects: Vec::with_capacity(v),
    };
    for _ in 0..v {
        let base = base_view(anchor, out_size, spec, rng)?;
        let (view, lambda, rects) = match spec.kind {
            AugmentKind::None => (base, 1.0, vec![]),
            AugmentKind::RandomErasing => {
                let (img, rect) = random_erasing(&base, spec, rng);
                (img, 1.0, non_empty(rect))
            }
            AugmentKind::CutOut => {
                let (img, rect) = cutout(&base, spec, rng);
                (img, 1.0, non_empty(rect))
            }
            AugmentKind::CutMix => {
                let donor = &donors[rng.below(donors.len())];
                let donor = base_view(donor, out_size, spec, rng)?;
                let out = cutmix(&base, &donor, spec, rng)?;
                (out.image, out.lambda, non_empty(out.rect))
            }
            AugmentKind::MixUp => {
                let donor = &donors[rng.below(donors.len())];
                let donor = base_view(donor, out_size, spec, rng)?;
                let lambda = folded_beta(spec.mixup_alpha, rng);
                (mixup(&base, &donor, lambda)?, lambda, vec![])
            }
        };
        set.views.push(view);
        set.lambdas.push(lambda);
        set.mask_rects.push(rects);
    }
    Ok(set)
}

fn non_empty(rect: Rect) -> Vec<Rect> {
    if rect.is_empty() {
        vec![]
    } else {
        vec![rect]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize, ch: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, ch, |r, c, k| {
            ((r * 7 + c * 3 + k * 5) % 17) as f32 / 16.0
        })
        .unwrap()
    }

    fn outside_equal(a: &ImageTensor, b: &ImageTensor, rect: Rect) -> bool {
        (0..a.height()).all(|r| {
            (0..a.width()).all(|c| {
                rect.contains(r, c)
                    || (0..a.channels())
                        .all(|k| a.get(r, c, k).to_bits() == b.get(r, c, k).to_bits())
            })
        })
    }

    #[test]
    fn base_view_of_constant_is_constant() {
        let img = ImageTensor::filled(20, 20, 3, 0.37).unwrap();
        let mut rng = RngStream::new(3);
        for _ in 0..20 {
            let v = base_view(&img, 12, &AugmentSpec::default(), &mut rng).unwrap();
            assert_eq!((v.height(), v.width()), (12, 12));
            assert!(v.data().iter().all(|&x| (x - 0.37).abs() < 1e-6));
        }
    }

    #[test]
    fn base_view_identity_configuration() {
        let img = gradient(16, 16, 3);
        let spec = AugmentSpec {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            ..AugmentSpec::default()
        };
        let v = base_view(&img, 16, &spec, &mut RngStream::new(0)).unwrap();
        assert_eq!(v, img);
        assert_eq!(center_view(&img, 16).unwrap(), img);
    }

    #[test]
    fn base_view_window_is_reproducible() {
        let img = gradient(24, 24, 1);
        let spec = AugmentSpec::default();
        let a = sample_base_window(&img, &spec, &mut RngStream::new(11));
        let b = sample_base_window(&img, &spec, &mut RngStream::new(11));
        assert_eq!(a, b);
    }

    #[test]
    fn base_view_rejects_oversized_output() {
        let img = gradient(8, 10, 1);
        assert!(base_view(&img, 9, &AugmentSpec::default(), &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = gradient(4, 4, 1);
        let full = Rect {
            top: 0,
            left: 0,
            height: 4,
            width: 4,
        };
        let f = crop_resize(&img, full, 4, true).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(f.get(r, c, 0), img.get(r, 3 - c, 0));
            }
        }
    }

    #[test]
    fn erasing_disabled_is_identity() {
        let img = gradient(16, 16, 3);
        let spec = AugmentSpec {
            erase_prob: 0.0,
            ..AugmentSpec::new(AugmentKind::RandomErasing)
        };
        let mut rng = RngStream::new(5);
        for _ in 0..50 {
            let (out, rect) = random_erasing(&img, &spec, &mut rng);
            assert_eq!(out, img);
            assert!(rect.is_empty());
        }
    }

    #[test]
    fn erasing_only_touches_its_rect() {
        let img = gradient(16, 16, 3);
        let spec = AugmentSpec {
            erase_prob: 1.0,
            ..AugmentSpec::new(AugmentKind::RandomErasing)
        };
        let mut rng = RngStream::new(5);
        for _ in 0..100 {
            let (out, rect) = random_erasing(&img, &spec, &mut rng);
            assert!(outside_equal(&img, &out, rect));
        }
    }

    #[test]
    fn erasing_fill_is_uniform() {
        // Monte Carlo: mean of >= 10,000 erased values of U[0,1] lies near 1/2.
        let img = ImageTensor::filled(32, 32, 1, 0.0).unwrap();
        let spec = AugmentSpec {
            erase_prob: 1.0,
            ..AugmentSpec::new(AugmentKind::RandomErasing)
        };
        let mut rng = RngStream::new(77);
        let (mut sum, mut count) = (0.0f64, 0usize);
        while count < 10_000 {
            let (out, rect) = random_erasing(&img, &spec, &mut rng);
            for r in rect.top..rect.top + rect.height {
                for c in rect.left..rect.left + rect.width {
                    sum += f64::from(out.get(r, c, 0));
                    count += 1;
                }
            }
        }
        let mean = sum / count as f64;
        assert!((0.45..=0.55).contains(&mean), "mean {mean}");
    }

    #[test]
    fn cutout_examples() {
        let img = gradient(16, 16, 3);
        let full = AugmentSpec {
            cutout_size: 1.0,
            ..AugmentSpec::new(AugmentKind::CutOut)
        };
        let (out, rect) = cutout_at(&img, &full, 8, 8);
        assert_eq!(rect.area(), 256);
        assert!(out.data().iter().all(|&v| v == 0.0));

        let odd = gradient(7, 7, 1);
        let (out, _) = cutout_at(&odd, &full, 3, 3);
        assert!(out.data().iter().all(|&v| v == 0.0));

        let none = AugmentSpec {
            cutout_size: 0.0,
            ..AugmentSpec::new(AugmentKind::CutOut)
        };
        let (out, rect) = cutout(&img, &none, &mut RngStream::new(1));
        assert_eq!(out, img);
        assert!(rect.is_empty());

        let constant = ImageTensor::filled(10, 10, 3, 0.25).unwrap();
        let mean = AugmentSpec {
            cutout_fill: CutoutFill::Mean,
            ..AugmentSpec::new(AugmentKind::CutOut)
        };
        let (out, rect) = cutout(&constant, &mean, &mut RngStream::new(2));
        assert!(!rect.is_empty());
        assert_eq!(out, constant);
    }

    #[test]
    fn cutout_clips_at_corner() {
        let img = gradient(10, 10, 1);
        let (_, rect) = cutout_at(&img, &AugmentSpec::new(AugmentKind::CutOut), 0, 0);
        assert_eq!(
            rect,
            Rect {
                top: 0,
                left: 0,
                height: 3,
                width: 3
            }
        );
    }

    #[test]
    fn cutmix_empty_patch_keeps_anchor() {
        let a = gradient(12, 12, 3);
        let b = ImageTensor::filled(12, 12, 3, 1.0).unwrap();
        let out = cutmix_with(&a, &b, 1.0, 6, 6).unwrap();
        assert_eq!(out.image, a);
        assert_eq!(out.lambda, 1.0);
    }

    #[test]
    fn cutmix_lambda_bounds_and_partition() {
        let a = gradient(13, 9, 3);
        let b = ImageTensor::filled(13, 9, 3, 1.0).unwrap();
        let spec = AugmentSpec::new(AugmentKind::CutMix);
        let mut rng = RngStream::new(8);
        for _ in 0..1000 {
            let out = cutmix(&a, &b, &spec, &mut rng).unwrap();
            assert!((0.5..=1.0).contains(&out.lambda), "{}", out.lambda);
            assert!(outside_equal(&a, &out.image, out.rect));
            for r in out.rect.top..out.rect.top + out.rect.height {
                for c in out.rect.left..out.rect.left + out.rect.width {
                    assert_eq!(out.image.get(r, c, 1), 1.0);
                }
            }
        }
    }

    #[test]
    fn cutmix_rejects_shape_mismatch() {
        let a = gradient(8, 8, 1);
        let b = gradient(8, 9, 1);
        assert!(cutmix(
            &a,
            &b,
            &AugmentSpec::new(AugmentKind::CutMix),
            &mut RngStream::new(0)
        )
        .is_err());
    }

    #[test]
    fn mixup_examples() {
        let a = gradient(6, 6, 3);
        let b = ImageTensor::from_fn(6, 6, 3, |r, c, _| ((r + c) % 2) as f32).unwrap();
        assert_eq!(mixup(&a, &b, 1.0).unwrap(), a);
        assert_eq!(mixup(&a, &b, 0.0).unwrap(), b);
        let ones = ImageTensor::filled(4, 4, 1, 1.0).unwrap();
        let zeros = ImageTensor::filled(4, 4, 1, 0.0).unwrap();
        let m = mixup(&ones, &zeros, 0.3).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.3).abs() < 1e-7));
        assert!(mixup(&a, &b, 1.5).is_err());
        assert!(mixup(&a, &gradient(6, 6, 1), 0.5).is_err());
    }

    #[test]
    fn make_views_without_augmentation() {
        let img = gradient(16, 16, 1);
        let set = make_views(
            3,
            &img,
            &[],
            4,
            &AugmentSpec::default(),
            12,
            &mut RngStream::new(4),
        )
        .unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(set.anchor_index, 3);
        assert!(set.lambdas.iter().all(|&l| l == 1.0));
        assert!(set.mask_rects.iter().all(Vec::is_empty));
    }

    #[test]
    fn make_views_default_two_views_all_kinds_deterministic() {
        let img = gradient(16, 16, 3);
        let donors = vec![
            gradient(16, 16, 3),
            ImageTensor::filled(16, 16, 3, 0.9).unwrap(),
        ];
        for kind in AugmentKind::ALL {
            let spec = AugmentSpec::new(kind);
            let a = make_views(0, &img, &donors, 2, &spec, 12, &mut RngStream::new(21)).unwrap();
            let b = make_views(0, &img, &donors, 2, &spec, 12, &mut RngStream::new(21)).unwrap();
            assert_eq!(a, b, "{kind}");
            assert_eq!(a.len(), 2);
            for (view, lambda) in a.views.iter().zip(&a.lambdas) {
                assert_eq!((view.height(), view.width(), view.channels()), (12, 12, 3));
                assert!((0.5..=1.0).contains(lambda));
                if !kind.needs_donor() {
                    assert_eq!(*lambda, 1.0);
                }
            }
        }
    }

    #[test]
    fn make_views_requires_donors_for_mixing() {
        let img = gradient(16, 16, 1);
        for kind in [AugmentKind::CutMix, AugmentKind::MixUp] {
            assert!(make_views(
                0,
                &img,
                &[],
                2,
                &AugmentSpec::new(kind),
                8,
                &mut RngStream::new(0)
            )
            .is_err());
        }
        assert!(make_views(
            0,
            &img,
            &[],
            0,
            &AugmentSpec::default(),
            8,
            &mut RngStream::new(0)
        )
        .is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(AugmentSpec::default().validate().is_ok());
        let bad = AugmentSpec {
            area_range: (0.5, 0.2),
            ..AugmentSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentSpec {
            erase_prob: 1.2,
            ..AugmentSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn image(h: usize, w: usize, ch: usize, seed: u64) -> ImageTensor {
            let mut rng = RngStream::new(seed);
            ImageTensor::from_fn(h, w, ch, |_, _, _| rng.uniform() as f32).unwrap()
        }

        proptest! {
            #[test]
            fn mixup_is_linear(seed in any::<u64>(), lambda in 0.0f64..=1.0) {
                let a = image(5, 6, 3, seed);
                let b = image(5, 6, 3, seed ^ 1);
                let ab = mixup(&a, &b, lambda).unwrap();
                let ba = mixup(&b, &a, lambda).unwrap();
                for i in 0..a.data().len() {
                    let lhs = ab.data()[i] + ba.data()[i];
                    let rhs = a.data()[i] + b.data()[i];
                    prop_assert!((lhs - rhs).abs() <= 1e-6);
                }
            }

            #[test]
            fn cutmix_area_identity(seed in any::<u64>(), h in 2usize..20, w in 2usize..20) {
                let a = image(h, w, 1, seed);
                let b = image(h, w, 1, seed ^ 2);
                let out = cutmix(&a, &b, &AugmentSpec::new(AugmentKind::CutMix), &mut RngStream::new(seed)).unwrap();
                let frac = out.rect.area() as f64 / (h * w) as f64;
                prop_assert!((1.0 - out.lambda - frac).abs() <= f64::EPSILON);
            }
        }
    }
}

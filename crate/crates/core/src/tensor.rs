//! Dense containers shared by every stage of the pipeline: images, embeddings,
//! and the dot-product similarity.

use crate::error::{ClabError, Result};

/// Norms at or below this are treated as zero by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// An `height x width x channels` image stored row-major with interleaved
/// channels. Every value lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(ClabError::InvalidImage(format!(
                "empty image {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(ClabError::InvalidImage(format!(
                "{channels} channels (expected 1 or 3)"
            )));
        }
        if data.len() != height * width * channels {
            return Err(ClabError::InvalidImage(format!(
                "data length {} != {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(ClabError::InvalidImage(format!(
                "value {} at index {pos} outside [0, 1]",
                data[pos]
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// An image with every channel value equal to `value` (clamped to `[0, 1]`).
    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value.clamp(0.0, 1.0); height * width * channels],
        )
    }

    /// Builds an image from `f(row, col, channel)`; results are clamped to `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    // Callers inside the crate guarantee the invariants.
    pub(crate) fn from_parts_unchecked(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[self.index(row, col, channel)]
    }

    /// Per-channel mean over all pixels.
    pub fn channel_means(&self) -> Vec<f32> {
        let mut sums = vec![0.0f64; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += f64::from(*v);
            }
        }
        let n = (self.height * self.width) as f64;
        sums.into_iter().map(|s| (s / n) as f32).collect()
    }

    /// Flattened pixel values widened to f64, the encoder's input layout.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// A dense embedding. `normalized` is set only when the vector is known to
/// have unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    normalized: bool,
}

impl EmbeddingVector {
    /// Wraps raw coordinates; the normalized flag is left unset.
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    /// Wraps coordinates and sets the normalized flag if the norm is within
    /// `1e-9` of one.
    pub fn detect(values: Vec<f64>) -> Self {
        let normalized = (norm(&values) - 1.0).abs() < 1e-9;
        Self { values, normalized }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

impl From<Vec<f64>> for EmbeddingVector {
    fn from(values: Vec<f64>) -> Self {
        Self::new(values)
    }
}

/// A batch of embeddings sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    dim: usize,
    rows: Vec<EmbeddingVector>,
}

impl EmbeddingBatch {
    pub fn new(dim: usize, rows: Vec<EmbeddingVector>) -> Result<Self> {
        if let Some(bad) = rows.iter().find(|r| r.dim() != dim) {
            return Err(ClabError::DimMismatch {
                left: dim,
                right: bad.dim(),
            });
        }
        Ok(Self { dim, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[EmbeddingVector] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &EmbeddingVector {
        &self.rows[i]
    }

    pub fn into_rows(self) -> Vec<EmbeddingVector> {
        self.rows
    }

    pub fn all_normalized(&self) -> bool {
        self.rows.iter().all(EmbeddingVector::is_normalized)
    }
}

/// `Σ aᵢbᵢ`.
pub fn dot(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(ClabError::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(dot_slices(a.values(), b.values()))
}

#[inline]
pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(v: &[f64]) -> f64 {
    dot_slices(v, v).sqrt()
}

/// Scales `v` to unit length. Vectors with norm `<= NORM_EPS` map to the zero
/// vector with the normalized flag unset.
pub fn l2_normalize(v: &EmbeddingVector) -> EmbeddingVector {
    let n = v.norm();
    if n <= NORM_EPS {
        return EmbeddingVector {
            values: vec![0.0; v.dim()],
            normalized: false,
        };
    }
    EmbeddingVector {
        values: v.values.iter().map(|x| x / n).collect(),
        normalized: true,
    }
}

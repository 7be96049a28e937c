//! `CLAB1` checkpoint files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "CLAB1"
//! block(query encoder)
//! block(key encoder)
//! block(SGD velocity)
//! u64 step counter
//!
//! block := u32 layer_count, then per layer:
//!          u32 out_dim, u32 in_dim,
//!          f64[out_dim * in_dim] weights (row-major), f64[out_dim] bias
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::encoder::{EncoderParams, GradBuffer, Layer};
use crate::error::{ClabError, Result};

pub const MAGIC: &[u8; 5] = b"CLAB1";

/// Everything needed to resume or evaluate a pre-training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub query: EncoderParams,
    pub key: EncoderParams,
    pub velocity: GradBuffer,
    pub step: u64,
}

impl Checkpoint {
    /// Fresh run state: the key encoder starts as a copy of the query.
    pub fn new(query: EncoderParams) -> Self {
        Self {
            key: query.clone(),
            velocity: GradBuffer::zeros_like(&query),
            query,
            step: 0,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        write_block(&mut out, self.query.layers());
        write_block(&mut out, self.key.layers());
        write_block(&mut out, self.velocity.layers());
        out.extend_from_slice(&self.step.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(ClabError::format("checkpoint", "missing CLAB1 magic"));
        }
        let query = EncoderParams::from_layers(read_block(&mut r)?)?;
        let key = EncoderParams::from_layers(read_block(&mut r)?)?;
        let velocity_layers = read_block(&mut r)?;
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        if r.pos != bytes.len() {
            return Err(ClabError::format(
                "checkpoint",
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        let velocity = GradBuffer::from_layers(velocity_layers);
        let shapes = |l: &[Layer]| l.iter().map(|x| (x.in_dim, x.out_dim)).collect::<Vec<_>>();
        if shapes(key.layers()) != shapes(query.layers())
            || shapes(velocity.layers()) != shapes(query.layers())
        {
            return Err(ClabError::format(
                "checkpoint",
                "query, key and velocity shapes differ",
            ));
        }
        Ok(Self {
            query,
            key,
            velocity,
            step,
        })
    }

    /// Writes via a temporary sibling and a rename so readers never see a
    /// partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| ClabError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| ClabError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| ClabError::io(&tmp, e))?;
    f.sync_all().map_err(|e| ClabError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| ClabError::io(path, e))
}

fn write_block(out: &mut Vec<u8>, layers: &[Layer]) {
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in layers {
        out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
        out.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
        for v in l.weights.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                ClabError::format("checkpoint", format!("truncated at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| ClabError::format("checkpoint", "layer too large"))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn read_block(r: &mut Reader<'_>) -> Result<Vec<Layer>> {
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let out_dim = r.u32()?;
        let in_dim = r.u32()?;
        let weights = r.f64s(out_dim * in_dim)?;
        let bias = r.f64s(out_dim)?;
        layers.push(Layer {
            in_dim,
            out_dim,
            weights,
            bias,
        });
    }
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn sample() -> Checkpoint {
        let q = EncoderParams::init(&[6, 5, 3], &mut RngStream::new(1)).unwrap();
        let mut c = Checkpoint::new(q);
        c.key.layers_mut()[1].bias[0] = 0.25;
        c.step = 17;
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..5], b"CLAB1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 2);
        // first layer dims: out 5, in 6
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 6);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.clab");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(!path.with_extension("tmp").exists());
    }
}

//! Flat binary weight container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "TVBI" | version u32 | layer count u32 | (fan_in u32, fan_out u32) per layer
//! per layer: fan_in·fan_out weights f64, then fan_out biases f64
//! optional posterior section, per layer: μ, σ, shape, rate, π̃ (fan_in·fan_out f64 each)
//! ```

use std::io::{Read, Write};

use crate::error::{format, Result};

use super::{LayerWeights, Weights};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"TVBI";
const VERSION: u32 = 1;

/// Per-weight variational parameters of one layer, as stored on disk.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PosteriorArrays {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub shape: Vec<f64>,
    pub rate: Vec<f64>,
    pub pi: Vec<f64>,
}

/// Contents of a weight or posterior checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsFile {
    pub weights: Weights,
    pub posterior: Option<Vec<PosteriorArrays>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl WeightsFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.weights.layers.len() as u32);
        for l in &self.weights.layers {
            put_u32(&mut out, l.fan_in as u32);
            put_u32(&mut out, l.fan_out as u32);
        }
        for l in &self.weights.layers {
            put_f64s(&mut out, &l.w);
            put_f64s(&mut out, &l.b);
        }
        if let Some(post) = &self.posterior {
            for p in post {
                for arr in [&p.mu, &p.sigma, &p.shape, &p.rate, &p.pi] {
                    put_f64s(&mut out, arr);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != WEIGHTS_MAGIC {
            return format("bad magic, expected TVBI");
        }
        let version = cur.u32()?;
        if version != VERSION {
            return format(format!("unsupported weights version {version}"));
        }
        let n_layers = cur.u32()? as usize;
        if n_layers == 0 {
            return format("weights file declares zero layers");
        }
        let mut dims = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            let k = cur.u32()? as usize;
            let m = cur.u32()? as usize;
            if k == 0 || m == 0 {
                return format("layer with zero dimension");
            }
            dims.push((k, m));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for &(k, m) in &dims {
            let w = cur.f64s(k * m)?;
            let b = cur.f64s(m)?;
            layers.push(LayerWeights { fan_in: k, fan_out: m, w, b });
        }
        let posterior = if cur.remaining() == 0 {
            None
        } else {
            let mut post = Vec::with_capacity(n_layers);
            for &(k, m) in &dims {
                let n = k * m;
                post.push(PosteriorArrays {
                    mu: cur.f64s(n)?,
                    sigma: cur.f64s(n)?,
                    shape: cur.f64s(n)?,
                    rate: cur.f64s(n)?,
                    pi: cur.f64s(n)?,
                });
            }
            if cur.remaining() != 0 {
                return format(format!("{} trailing bytes after posterior section", cur.remaining()));
            }
            Some(post)
        };
        Ok(Self { weights: Weights { layers }, posterior })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return format(format!("truncated container: need {n} bytes at offset {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| crate::Error::Format("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn write_weights<W: Write>(out: &mut W, file: &WeightsFile) -> Result<()> {
    out.write_all(&file.to_bytes())?;
    Ok(())
}

pub fn read_weights<R: Read>(input: &mut R) -> Result<WeightsFile> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    WeightsFile::from_bytes(&bytes)
}

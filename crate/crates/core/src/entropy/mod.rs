//! Rate estimation and range coding of quantized latents.
//!
//! A prior turns into a [`CodingPlan`]: a set of integer CDF tables, which
//! table codes each element, and an integer shift subtracted from each symbol
//! before table lookup. Chunks are coded by the active [`ChunkBackend`],
//! the built-in reference coder unless another one is installed.

pub mod backend;
mod factorized;
mod gaussian;
pub mod range_coder;
pub mod tables;

use std::sync::Arc;

pub use backend::{active_backend, install_backend, reset_backend, ChunkBackend, FlatTables, ReferenceBackend};
pub use factorized::{FactorizedPrior, MAX_HALF_WIDTH, TAIL_MASS};
pub use gaussian::{gaussian_table, level_scale, scale_level, GaussianConditional, MEAN_LEVELS, SCALE_LEVELS, SCALE_MAX};
pub use tables::{quantize_pmf, CdfTable};

#[derive(Debug, thiserror::Error)]
pub enum EntropyError {
    #[error("corrupt chunk: {0}")]
    Corrupt(String),
    #[error("invalid cdf table: {0}")]
    Table(String),
    #[error("prior covers {prior} symbols, got {got}")]
    Length { prior: usize, got: usize },
    #[error("chunk declares {declared} symbols, expected {expected}")]
    Count { declared: usize, expected: usize },
    #[error("chunk header truncated: need {needed} bytes, have {available}")]
    Header { needed: usize, available: usize },
    #[error("backend {name}: {msg}")]
    Backend { name: String, msg: String },
}

/// Tables plus per-element table index and symbol shift.
#[derive(Clone, Debug)]
pub struct CodingPlan {
    pub tables: Vec<Arc<CdfTable>>,
    pub index: Vec<u32>,
    pub shift: Vec<i32>,
}

/// A distribution over an integer tensor that can both estimate its rate and
/// produce coding tables.
pub trait EntropyPrior {
    /// Number of elements the prior covers.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `-sum log2 p(symbol)` under the continuous model, floored per element.
    fn bits(&self, symbols: &[i32]) -> f64;

    fn plan(&self) -> CodingPlan;
}

/// A range-coded chunk. Serialized as `[u32 symbols][u32 payload bytes][payload]`,
/// little-endian.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BitChunk {
    pub n_symbols: u32,
    pub payload: Vec<u8>,
}

impl BitChunk {
    pub const HEADER_BYTES: usize = 8;

    /// Payload length in bits.
    pub fn bit_len(&self) -> usize {
        self.payload.len() * 8
    }

    /// Serialized size in bytes.
    pub fn byte_len(&self) -> usize {
        Self::HEADER_BYTES + self.payload.len()
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.n_symbols.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(self.byte_len());
        self.write_to(&mut v);
        v
    }

    /// Parses one chunk from the front of `bytes`, returning it and the number
    /// of bytes consumed.
    pub fn parse(bytes: &[u8]) -> Result<(Self, usize), EntropyError> {
        if bytes.len() < Self::HEADER_BYTES {
            return Err(EntropyError::Header {
                needed: Self::HEADER_BYTES,
                available: bytes.len(),
            });
        }
        let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let end = Self::HEADER_BYTES + len;
        if bytes.len() < end {
            return Err(EntropyError::Header {
                needed: end,
                available: bytes.len(),
            });
        }
        Ok((
            BitChunk {
                n_symbols: n,
                payload: bytes[Self::HEADER_BYTES..end].to_vec(),
            },
            end,
        ))
    }
}

/// Estimated bits of `symbols` under `prior`.
pub fn estimate_rate(symbols: &[i32], prior: &dyn EntropyPrior) -> Result<f64, EntropyError> {
    if symbols.len() != prior.len() {
        return Err(EntropyError::Length {
            prior: prior.len(),
            got: symbols.len(),
        });
    }
    Ok(prior.bits(symbols))
}

fn relative(symbols: &[i32], plan: &CodingPlan) -> Vec<i32> {
    symbols
        .iter()
        .zip(&plan.shift)
        .map(|(&s, &d)| (s as i64 - d as i64).clamp(i32::MIN as i64, i32::MAX as i64) as i32)
        .collect()
}

/// Range-codes `symbols` with the active backend.
pub fn range_encode(symbols: &[i32], prior: &dyn EntropyPrior) -> Result<BitChunk, EntropyError> {
    range_encode_with(active_backend().as_ref(), symbols, prior)
}

pub fn range_decode(chunk: &BitChunk, prior: &dyn EntropyPrior, n: usize) -> Result<Vec<i32>, EntropyError> {
    range_decode_with(active_backend().as_ref(), chunk, prior, n)
}

pub fn range_encode_with(
    backend: &dyn ChunkBackend,
    symbols: &[i32],
    prior: &dyn EntropyPrior,
) -> Result<BitChunk, EntropyError> {
    if symbols.len() != prior.len() {
        return Err(EntropyError::Length {
            prior: prior.len(),
            got: symbols.len(),
        });
    }
    if symbols.is_empty() {
        return Ok(BitChunk::default());
    }
    let plan = prior.plan();
    let rel = relative(symbols, &plan);
    let flat = FlatTables::from_tables(&plan.tables);
    let payload = backend.encode(&rel, &plan.index, &flat)?;
    Ok(BitChunk {
        n_symbols: symbols.len() as u32,
        payload,
    })
}

pub fn range_decode_with(
    backend: &dyn ChunkBackend,
    chunk: &BitChunk,
    prior: &dyn EntropyPrior,
    n: usize,
) -> Result<Vec<i32>, EntropyError> {
    if chunk.n_symbols as usize != n {
        return Err(EntropyError::Count {
            declared: chunk.n_symbols as usize,
            expected: n,
        });
    }
    if n != prior.len() {
        return Err(EntropyError::Length { prior: prior.len(), got: n });
    }
    if n == 0 {
        if !chunk.payload.is_empty() {
            return Err(EntropyError::Corrupt("payload present for an empty chunk".into()));
        }
        return Ok(Vec::new());
    }
    let plan = prior.plan();
    let flat = FlatTables::from_tables(&plan.tables);
    let rel = backend.decode(&chunk.payload, &plan.index, &flat)?;
    Ok(rel
        .iter()
        .zip(&plan.shift)
        .map(|(&r, &d)| (r as i64 + d as i64).clamp(i32::MIN as i64, i32::MAX as i64) as i32)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_layout_is_count_length_payload() {
        let c = BitChunk {
            n_symbols: 3,
            payload: vec![9, 8, 7],
        };
        let b = c.to_bytes();
        assert_eq!(b, vec![3, 0, 0, 0, 3, 0, 0, 0, 9, 8, 7]);
        let (back, used) = BitChunk::parse(&b).unwrap();
        assert_eq!((back, used), (c, 11));
        assert!(BitChunk::parse(&b[..10]).is_err());
        assert!(BitChunk::parse(&b[..7]).is_err());
    }

    #[test]
    fn empty_input_gives_empty_chunk() {
        let p = GaussianConditional::zero_mean(vec![]).unwrap();
        let c = range_encode(&[], &p).unwrap();
        assert_eq!(c.payload.len(), 0);
        assert_eq!(c.to_bytes(), vec![0u8; 8]);
        assert!(range_decode(&c, &p, 0).unwrap().is_empty());
    }

    #[test]
    fn rate_is_additive_over_concatenation() {
        let a = GaussianConditional::new(vec![0.3, -1.0], vec![0.5, 2.0]).unwrap();
        let b = GaussianConditional::new(vec![4.0], vec![1.2]).unwrap();
        let ab = GaussianConditional::new(vec![0.3, -1.0, 4.0], vec![0.5, 2.0, 1.2]).unwrap();
        let sum = estimate_rate(&[0, 2], &a).unwrap() + estimate_rate(&[5], &b).unwrap();
        assert!((estimate_rate(&[0, 2, 5], &ab).unwrap() - sum).abs() < 1e-12);
        assert!(estimate_rate(&[0], &ab).is_err());
    }

    #[test]
    fn shifted_means_roundtrip() {
        let mean: Vec<f64> = (0..200).map(|i| i as f64 * 0.37 - 30.0).collect();
        let scale: Vec<f64> = (0..200).map(|i| 0.1 + (i % 9) as f64).collect();
        let sym: Vec<i32> = mean.iter().enumerate().map(|(i, m)| m.round() as i32 + (i as i32 % 5) - 2).collect();
        let p = GaussianConditional::new(mean, scale).unwrap();
        let c = range_encode(&sym, &p).unwrap();
        assert_eq!(range_decode(&c, &p, sym.len()).unwrap(), sym);
        assert!(matches!(range_decode(&c, &p, 3), Err(EntropyError::Count { .. })));
    }
}

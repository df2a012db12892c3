//! Integer CDF tables at 16-bit precision.

use super::range_coder::TOTAL;
use super::EntropyError;

/// Cumulative frequencies for `len()` symbols. Entries `0..len()-1` code the
/// values `offset, offset + 1, ...`; the last entry is the escape symbol for
/// values outside that range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cdf: Vec<u32>,
    offset: i32,
}

impl CdfTable {
    /// Validates and wraps a cumulative table (`len + 1` entries from 0 to
    /// `TOTAL`, strictly increasing).
    pub fn from_cdf(cdf: Vec<u32>, offset: i32) -> Result<Self, EntropyError> {
        validate_cdf(&cdf)?;
        Ok(CdfTable { cdf, offset })
    }

    /// Quantizes probabilities (escape mass last) into a table.
    pub fn from_probs(probs: &[f64], offset: i32) -> Result<Self, EntropyError> {
        let freqs = quantize_pmf(probs)?;
        let mut cdf = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cdf.push(0);
        for f in freqs {
            acc += f;
            cdf.push(acc);
        }
        Self::from_cdf(cdf, offset)
    }

    /// Number of symbols including the escape.
    pub fn len(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn offset(&self) -> i32 {
        self.offset
    }

    /// Probability mass model of symbol index `i`, in units of `1/TOTAL`.
    pub fn freq(&self, i: usize) -> u32 {
        self.cdf[i + 1] - self.cdf[i]
    }
}

pub(crate) fn validate_cdf(cdf: &[u32]) -> Result<(), EntropyError> {
    if cdf.len() < 3 {
        return Err(EntropyError::Table(format!(
            "need at least one symbol plus escape, got {} entries",
            cdf.len()
        )));
    }
    if cdf[0] != 0 {
        return Err(EntropyError::Table(format!("cdf starts at {}", cdf[0])));
    }
    if *cdf.last().unwrap() != TOTAL {
        return Err(EntropyError::Table(format!(
            "cdf ends at {}, expected {TOTAL}",
            cdf.last().unwrap()
        )));
    }
    if cdf.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EntropyError::Table("cdf is not strictly increasing".into()));
    }
    Ok(())
}

/// Integer frequencies summing to `TOTAL`, each at least 1: bin `i` gets
/// `1 + floor(p_i / sum(p) * (TOTAL - n))` and the rounding remainder goes to
/// the first most probable bin.
pub fn quantize_pmf(probs: &[f64]) -> Result<Vec<u32>, EntropyError> {
    let n = probs.len();
    if n < 2 || n > TOTAL as usize / 2 {
        return Err(EntropyError::Table(format!("cannot quantize {n} bins")));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(EntropyError::Table("probabilities must be finite and non-negative".into()));
    }
    let sum: f64 = probs.iter().sum();
    let spare = (TOTAL as usize - n) as f64;
    let mut freqs: Vec<u32> = if sum > 0.0 {
        probs.iter().map(|p| 1 + (p / sum * spare).floor() as u32).collect()
    } else {
        vec![1; n]
    };
    let used: u32 = freqs.iter().sum();
    let mut best = 0;
    for i in 1..n {
        if freqs[i] > freqs[best] {
            best = i;
        }
    }
    freqs[best] += TOTAL - used;
    Ok(freqs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_tables() {
        assert!(CdfTable::from_cdf(vec![0, 10, TOTAL], 0).is_ok());
        assert!(CdfTable::from_cdf(vec![0, 10, 10, TOTAL], 0).is_err());
        assert!(CdfTable::from_cdf(vec![0, 10, 1 << 15], 0).is_err());
        assert!(CdfTable::from_cdf(vec![1, 10, TOTAL], 0).is_err());
        assert!(CdfTable::from_cdf(vec![0, TOTAL], 0).is_err());
    }

    #[test]
    fn quantize_uniform_and_degenerate() {
        let f = quantize_pmf(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(f, vec![16384; 4]);
        // 3 bins: 1 + floor(65533 / 3) = 21845 each, remainder 1 to bin 0
        assert_eq!(quantize_pmf(&[1.0, 1.0, 1.0]).unwrap(), vec![21846, 21845, 21845]);
        let d = quantize_pmf(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(d, vec![1, TOTAL - 2, 1]);
    }

    proptest! {
        #[test]
        fn quantized_pmf_is_valid(probs in proptest::collection::vec(0.0f64..1.0, 2..300)) {
            let f = quantize_pmf(&probs).unwrap();
            prop_assert_eq!(f.iter().sum::<u32>(), TOTAL);
            prop_assert!(f.iter().all(|&x| x >= 1));
        }
    }
}

//! Chunk coding over flat table buffers, and the pluggable backend slot.
//!
//! The reference coder here is the bit-exact contract for any accelerated
//! implementation. A backend sees only flat integer buffers: table-relative
//! symbols, one table index per symbol, and the concatenated CDFs. The
//! [`ForeignBackend`] adapter calls such an implementation through a C ABI.

use std::sync::{Arc, OnceLock, RwLock};

use super::range_coder::{Decoder, Encoder, PRECISION, TOTAL};
use super::tables::{validate_cdf, CdfTable};
use super::EntropyError;

/// Raw 16-bit word appended after the last symbol of every non-empty chunk.
pub const SENTINEL: u32 = 0xA55A;
const LEN_BITS: u32 = 6;
const MAX_ESCAPE_BITS: u32 = 40;

/// Concatenated CDF tables. Table `t` occupies
/// `cdfs[cdf_offsets[t] .. cdf_offsets[t] + cdf_lengths[t] + 1]`, has
/// `cdf_lengths[t]` symbols (escape last) and codes values starting at
/// `sym_offsets[t]`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlatTables {
    pub cdfs: Vec<u32>,
    pub cdf_offsets: Vec<u32>,
    pub cdf_lengths: Vec<u32>,
    pub sym_offsets: Vec<i32>,
}

impl FlatTables {
    pub fn from_tables(tables: &[Arc<CdfTable>]) -> Self {
        let mut f = FlatTables::default();
        for t in tables {
            f.cdf_offsets.push(f.cdfs.len() as u32);
            f.cdf_lengths.push(t.len() as u32);
            f.sym_offsets.push(t.offset());
            f.cdfs.extend_from_slice(t.cdf());
        }
        f
    }

    pub fn n_tables(&self) -> usize {
        self.cdf_offsets.len()
    }

    /// Checks buffer consistency and that every table is a valid 16-bit CDF.
    pub fn validate(&self) -> Result<(), EntropyError> {
        let n = self.cdf_offsets.len();
        if self.cdf_lengths.len() != n || self.sym_offsets.len() != n {
            return Err(EntropyError::Table("flat table arrays differ in length".into()));
        }
        for t in 0..n {
            let (o, l) = (self.cdf_offsets[t] as usize, self.cdf_lengths[t] as usize);
            let cdf = self
                .cdfs
                .get(o..o + l + 1)
                .ok_or_else(|| EntropyError::Table(format!("table {t} runs past the cdf buffer")))?;
            validate_cdf(cdf)?;
        }
        Ok(())
    }

    #[inline]
    fn table(&self, t: usize) -> (&[u32], i32) {
        let (o, l) = (self.cdf_offsets[t] as usize, self.cdf_lengths[t] as usize);
        (&self.cdfs[o..o + l + 1], self.sym_offsets[t])
    }
}

fn check_indexes(indexes: &[u32], tables: &FlatTables) -> Result<(), EntropyError> {
    let n = tables.n_tables() as u32;
    if let Some(bad) = indexes.iter().find(|&&i| i >= n) {
        return Err(EntropyError::Table(format!("table index {bad} out of {n}")));
    }
    Ok(())
}

fn encode_wide(enc: &mut Encoder, v: u64, nbits: u32) {
    let mut left = nbits;
    while left > 0 {
        let take = left.min(16);
        left -= take;
        enc.encode_bits(((v >> left) & ((1 << take) - 1)) as u32, take);
    }
}

fn decode_wide(dec: &mut Decoder, nbits: u32) -> Option<u64> {
    let mut v = 0u64;
    let mut left = nbits;
    while left > 0 {
        let take = left.min(16);
        left -= take;
        v = (v << take) | dec.decode_bits(take)? as u64;
    }
    Some(v)
}

/// Reference chunk encoder. An empty symbol list gives an empty payload.
pub fn reference_encode(symbols: &[i32], indexes: &[u32], tables: &FlatTables) -> Result<Vec<u8>, EntropyError> {
    if symbols.len() != indexes.len() {
        return Err(EntropyError::Length {
            prior: indexes.len(),
            got: symbols.len(),
        });
    }
    if symbols.is_empty() {
        return Ok(Vec::new());
    }
    tables.validate()?;
    check_indexes(indexes, tables)?;
    let mut enc = Encoder::new();
    for (&s, &t) in symbols.iter().zip(indexes) {
        let (cdf, offset) = tables.table(t as usize);
        let esc = cdf.len() - 2;
        let rel = s as i64 - offset as i64;
        if rel >= 0 && (rel as usize) < esc {
            let i = rel as usize;
            enc.encode(cdf[i], cdf[i + 1] - cdf[i], PRECISION);
            continue;
        }
        enc.encode(cdf[esc], cdf[esc + 1] - cdf[esc], PRECISION);
        let (side, d) = if rel < 0 {
            (0, (-rel - 1) as u64)
        } else {
            (1, (rel - esc as i64) as u64)
        };
        enc.encode_bits(side, 1);
        let nb = 64 - d.leading_zeros();
        enc.encode_bits(nb, LEN_BITS);
        encode_wide(&mut enc, d, nb);
    }
    enc.encode_bits(SENTINEL, 16);
    Ok(enc.finish())
}

/// Reference chunk decoder; rejects payloads that do not decode to exactly
/// `indexes.len()` symbols followed by the sentinel and end of data.
pub fn reference_decode(payload: &[u8], indexes: &[u32], tables: &FlatTables) -> Result<Vec<i32>, EntropyError> {
    if indexes.is_empty() {
        if payload.is_empty() {
            return Ok(Vec::new());
        }
        return Err(EntropyError::Corrupt("payload present for an empty chunk".into()));
    }
    tables.validate()?;
    check_indexes(indexes, tables)?;
    let corrupt = |at: usize, what: &str| EntropyError::Corrupt(format!("symbol {at}: {what}"));
    let mut dec = Decoder::new(payload);
    let mut out = Vec::with_capacity(indexes.len());
    for (k, &t) in indexes.iter().enumerate() {
        let (cdf, offset) = tables.table(t as usize);
        let esc = cdf.len() - 2;
        let v = dec.decode_freq(PRECISION);
        if v >= TOTAL {
            return Err(corrupt(k, "target outside the table"));
        }
        let i = cdf.partition_point(|&c| c <= v) - 1;
        dec.consume(cdf[i], cdf[i + 1] - cdf[i]);
        let rel = if i < esc {
            i as i64
        } else {
            let side = dec.decode_bits(1).ok_or_else(|| corrupt(k, "bad escape side"))?;
            let nb = dec.decode_bits(LEN_BITS).ok_or_else(|| corrupt(k, "bad escape length"))?;
            if nb > MAX_ESCAPE_BITS {
                return Err(corrupt(k, "escape length too large"));
            }
            let d = decode_wide(&mut dec, nb).ok_or_else(|| corrupt(k, "bad escape bits"))? as i64;
            if side == 0 {
                -d - 1
            } else {
                esc as i64 + d
            }
        };
        let value = offset as i64 + rel;
        let value = i32::try_from(value).map_err(|_| corrupt(k, "escaped value overflows i32"))?;
        out.push(value);
        if dec.overrun() > 0 {
            return Err(corrupt(k, "payload ended early"));
        }
    }
    if dec.decode_bits(16) != Some(SENTINEL) {
        return Err(EntropyError::Corrupt("end-of-chunk sentinel mismatch".into()));
    }
    if dec.overrun() > 0 || dec.consumed() != payload.len() {
        return Err(EntropyError::Corrupt(format!(
            "decoder consumed {} of {} payload bytes",
            dec.consumed(),
            payload.len()
        )));
    }
    Ok(out)
}

/// A chunk coder that produces the same bytes as the reference.
pub trait ChunkBackend: Send + Sync {
    fn name(&self) -> &str;
    fn encode(&self, symbols: &[i32], indexes: &[u32], tables: &FlatTables) -> Result<Vec<u8>, EntropyError>;
    fn decode(&self, payload: &[u8], indexes: &[u32], tables: &FlatTables) -> Result<Vec<i32>, EntropyError>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ReferenceBackend;

impl ChunkBackend for ReferenceBackend {
    fn name(&self) -> &str {
        "reference"
    }

    fn encode(&self, symbols: &[i32], indexes: &[u32], tables: &FlatTables) -> Result<Vec<u8>, EntropyError> {
        reference_encode(symbols, indexes, tables)
    }

    fn decode(&self, payload: &[u8], indexes: &[u32], tables: &FlatTables) -> Result<Vec<i32>, EntropyError> {
        reference_decode(payload, indexes, tables)
    }
}

fn slot() -> &'static RwLock<Arc<dyn ChunkBackend>> {
    static SLOT: OnceLock<RwLock<Arc<dyn ChunkBackend>>> = OnceLock::new();
    SLOT.get_or_init(|| RwLock::new(Arc::new(ReferenceBackend)))
}

/// Routes [`super::range_encode`]/[`super::range_decode`] through `backend`.
/// Returns the previously active backend.
pub fn install_backend(backend: Arc<dyn ChunkBackend>) -> Arc<dyn ChunkBackend> {
    let mut g = slot().write().unwrap_or_else(|e| e.into_inner());
    std::mem::replace(&mut *g, backend)
}

/// Restores the reference coder.
pub fn reset_backend() {
    install_backend(Arc::new(ReferenceBackend));
}

/// The backend in use; the reference coder unless one was installed.
pub fn active_backend() -> Arc<dyn ChunkBackend> {
    slot().read().unwrap_or_else(|e| e.into_inner()).clone()
}

/// Borrowed [`FlatTables`] for the C boundary.
#[repr(C)]
#[derive(Debug)]
pub struct FlatTablesC {
    pub cdfs: *const u32,
    pub cdfs_len: usize,
    pub cdf_offsets: *const u32,
    pub cdf_lengths: *const u32,
    pub sym_offsets: *const i32,
    pub n_tables: usize,
}

impl FlatTablesC {
    pub fn borrow(t: &FlatTables) -> Self {
        FlatTablesC {
            cdfs: t.cdfs.as_ptr(),
            cdfs_len: t.cdfs.len(),
            cdf_offsets: t.cdf_offsets.as_ptr(),
            cdf_lengths: t.cdf_lengths.as_ptr(),
            sym_offsets: t.sym_offsets.as_ptr(),
            n_tables: t.n_tables(),
        }
    }

    /// # Safety
    /// Every pointer must be valid for its stated length.
    pub unsafe fn to_owned(&self) -> FlatTables {
        let s = |p: *const u32, n: usize| if n == 0 { Vec::new() } else { std::slice::from_raw_parts(p, n).to_vec() };
        FlatTables {
            cdfs: s(self.cdfs, self.cdfs_len),
            cdf_offsets: s(self.cdf_offsets, self.n_tables),
            cdf_lengths: s(self.cdf_lengths, self.n_tables),
            sym_offsets: if self.n_tables == 0 {
                Vec::new()
            } else {
                std::slice::from_raw_parts(self.sym_offsets, self.n_tables).to_vec()
            },
        }
    }
}

pub const STATUS_OK: i32 = 0;
pub const STATUS_CORRUPT: i32 = 1;
pub const STATUS_CAPACITY: i32 = 2;
pub const STATUS_TABLE: i32 = 3;

/// Writes at most `out_cap` payload bytes and stores the length in `out_len`.
pub type EncodeFn = unsafe extern "C" fn(
    symbols: *const i32,
    indexes: *const u32,
    n: usize,
    tables: *const FlatTablesC,
    out: *mut u8,
    out_cap: usize,
    out_len: *mut usize,
) -> i32;

/// Writes exactly `n` symbols to `out`.
pub type DecodeFn = unsafe extern "C" fn(
    payload: *const u8,
    payload_len: usize,
    indexes: *const u32,
    n: usize,
    tables: *const FlatTablesC,
    out: *mut i32,
) -> i32;

/// Payload capacity handed to a foreign encoder for `n` symbols.
pub fn payload_capacity(n: usize) -> usize {
    12 * n + 16
}

/// A chunk coder reached through C function pointers.
#[derive(Clone, Debug)]
pub struct ForeignBackend {
    pub name: String,
    pub encode: EncodeFn,
    pub decode: DecodeFn,
}

fn status_error(name: &str, code: i32) -> EntropyError {
    match code {
        STATUS_CORRUPT => EntropyError::Corrupt(format!("{name} rejected the payload")),
        STATUS_TABLE => EntropyError::Table(format!("{name} rejected the tables")),
        _ => EntropyError::Backend {
            name: name.to_string(),
            msg: format!("status {code}"),
        },
    }
}

impl ChunkBackend for ForeignBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn encode(&self, symbols: &[i32], indexes: &[u32], tables: &FlatTables) -> Result<Vec<u8>, EntropyError> {
        if symbols.len() != indexes.len() {
            return Err(EntropyError::Length {
                prior: indexes.len(),
                got: symbols.len(),
            });
        }
        let ct = FlatTablesC::borrow(tables);
        let mut out = vec![0u8; payload_capacity(symbols.len())];
        let mut len = 0usize;
        // SAFETY: all buffers outlive the call and lengths match the pointers.
        let code = unsafe {
            (self.encode)(
                symbols.as_ptr(),
                indexes.as_ptr(),
                symbols.len(),
                &ct,
                out.as_mut_ptr(),
                out.len(),
                &mut len,
            )
        };
        if code != STATUS_OK {
            return Err(status_error(&self.name, code));
        }
        out.truncate(len);
        Ok(out)
    }

    fn decode(&self, payload: &[u8], indexes: &[u32], tables: &FlatTables) -> Result<Vec<i32>, EntropyError> {
        let ct = FlatTablesC::borrow(tables);
        let mut out = vec![0i32; indexes.len()];
        // SAFETY: as above; `out` holds exactly `indexes.len()` slots.
        let code = unsafe {
            (self.decode)(
                payload.as_ptr(),
                payload.len(),
                indexes.as_ptr(),
                indexes.len(),
                &ct,
                out.as_mut_ptr(),
            )
        };
        if code != STATUS_OK {
            return Err(status_error(&self.name, code));
        }
        Ok(out)
    }
}

fn error_status(e: &EntropyError) -> i32 {
    match e {
        EntropyError::Table(_) => STATUS_TABLE,
        _ => STATUS_CORRUPT,
    }
}

/// The reference encoder behind the C ABI.
///
/// # Safety
/// Pointers must be valid for the lengths given; `out` for `out_cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn anfvc_reference_encode(
    symbols: *const i32,
    indexes: *const u32,
    n: usize,
    tables: *const FlatTablesC,
    out: *mut u8,
    out_cap: usize,
    out_len: *mut usize,
) -> i32 {
    let (syms, idx) = if n == 0 {
        (&[][..], &[][..])
    } else {
        (std::slice::from_raw_parts(symbols, n), std::slice::from_raw_parts(indexes, n))
    };
    let t = (*tables).to_owned();
    match reference_encode(syms, idx, &t) {
        Ok(bytes) => {
            if bytes.len() > out_cap {
                return STATUS_CAPACITY;
            }
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), out, bytes.len());
            *out_len = bytes.len();
            STATUS_OK
        }
        Err(e) => error_status(&e),
    }
}

/// The reference decoder behind the C ABI.
///
/// # Safety
/// Pointers must be valid for the lengths given; `out` for `n` symbols.
#[no_mangle]
pub unsafe extern "C" fn anfvc_reference_decode(
    payload: *const u8,
    payload_len: usize,
    indexes: *const u32,
    n: usize,
    tables: *const FlatTablesC,
    out: *mut i32,
) -> i32 {
    let p = if payload_len == 0 { &[][..] } else { std::slice::from_raw_parts(payload, payload_len) };
    let idx = if n == 0 { &[][..] } else { std::slice::from_raw_parts(indexes, n) };
    let t = (*tables).to_owned();
    match reference_decode(p, idx, &t) {
        Ok(syms) => {
            std::ptr::copy_nonoverlapping(syms.as_ptr(), out, n);
            STATUS_OK
        }
        Err(e) => error_status(&e),
    }
}

/// The reference coder wrapped as a [`ForeignBackend`], exercising the C path.
pub fn reference_via_ffi() -> ForeignBackend {
    ForeignBackend {
        name: "reference-ffi".into(),
        encode: anfvc_reference_encode,
        decode: anfvc_reference_decode,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tables(rng: &mut ChaCha8Rng, n: usize) -> FlatTables {
        let tables: Vec<Arc<CdfTable>> = (0..n)
            .map(|_| {
                let len = rng.gen_range(2..40);
                let probs: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0f64).powi(3)).collect();
                Arc::new(CdfTable::from_probs(&probs, rng.gen_range(-20..5)).unwrap())
            })
            .collect();
        FlatTables::from_tables(&tables)
    }

    #[test]
    fn escapes_roundtrip_including_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_tables(&mut rng, 3);
        let symbols = vec![i32::MIN, i32::MAX, -1000, 0, 3, 999_999, -21, 60];
        let idx: Vec<u32> = (0..symbols.len() as u32).map(|i| i % 3).collect();
        let bytes = reference_encode(&symbols, &idx, &t).unwrap();
        assert_eq!(reference_decode(&bytes, &idx, &t).unwrap(), symbols);
    }

    #[test]
    fn corruption_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_tables(&mut rng, 4);
        let idx: Vec<u32> = (0..2000).map(|_| rng.gen_range(0..4)).collect();
        let symbols: Vec<i32> = (0..2000).map(|_| rng.gen_range(-25..30)).collect();
        let bytes = reference_encode(&symbols, &idx, &t).unwrap();
        assert!(reference_decode(&bytes[..bytes.len() - 1], &idx, &t).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(reference_decode(&longer, &idx, &t).is_err());
        // a flip either fails to decode or lands in flush slack that does not
        // change the decoded symbols
        let mut detected = 0;
        for k in 0..50 {
            let mut bad = bytes.clone();
            let pos = (k * 37) % (bad.len() - 4);
            bad[pos] ^= 1 << (k % 8);
            match reference_decode(&bad, &idx, &t) {
                Err(_) => detected += 1,
                Ok(s) => assert_eq!(s, symbols, "flip at {pos} decoded to garbage"),
            }
        }
        assert_eq!(detected, 50);
    }

    #[test]
    fn ffi_path_matches_reference_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ffi = reference_via_ffi();
        for case in 0..50 {
            let t = random_tables(&mut rng, 1 + case % 5);
            let n = rng.gen_range(0..500);
            let idx: Vec<u32> = (0..n).map(|_| rng.gen_range(0..t.n_tables() as u32)).collect();
            let symbols: Vec<i32> = (0..n).map(|_| rng.gen_range(-40..60)).collect();
            let a = ReferenceBackend.encode(&symbols, &idx, &t).unwrap();
            let b = ffi.encode(&symbols, &idx, &t).unwrap();
            assert_eq!(a, b);
            assert_eq!(ffi.decode(&b, &idx, &t).unwrap(), symbols);
        }
    }

    #[test]
    fn bad_tables_rejected_at_the_boundary() {
        let t = FlatTables {
            cdfs: vec![0, 100, 1 << 15],
            cdf_offsets: vec![0],
            cdf_lengths: vec![2],
            sym_offsets: vec![0],
        };
        assert!(matches!(reference_validate(&t), Err(EntropyError::Table(_))));
        assert!(matches!(reference_via_ffi().encode(&[0], &[0], &t), Err(EntropyError::Table(_))));
    }

    fn reference_validate(t: &FlatTables) -> Result<(), EntropyError> {
        t.validate()
    }
}

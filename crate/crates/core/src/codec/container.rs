//! Sequence container. All integers little-endian.
//!
//! ```text
//! header  "ANFV" u16 version u32 width u32 height u32 frames u32 gop
//!         u8 mode u8 lambda_p_index f64 lambda_i [u8; 32] model hash
//! record  u8 frame type, u8 chunk count, chunks
//! chunk   u32 symbols, u32 payload bytes, payload
//! ```

use crate::entropy::BitChunk;
use crate::model::InterMode;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ANFV";
pub const VERSION: u16 = 1;
const HEADER_BYTES: usize = 4 + 2 + 4 * 4 + 2 + 8 + 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameType {
    Intra,
    Inter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceHeader {
    pub width: u32,
    pub height: u32,
    pub frames: u32,
    pub gop_size: u32,
    pub mode: InterMode,
    pub lambda_p_index: u8,
    pub lambda_i: f64,
    pub model_hash: [u8; 32],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameRecord {
    pub frame_type: FrameType,
    pub chunks: Vec<BitChunk>,
}

impl FrameRecord {
    /// Serialized size in bits, including its own framing.
    pub fn bits(&self) -> usize {
        8 * (2 + self.chunks.iter().map(BitChunk::byte_len).sum::<usize>())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBitstream {
    pub header: SequenceHeader,
    pub records: Vec<FrameRecord>,
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() - self.pos < n {
            return Err(Error::Bitstream(format!(
                "truncated at byte {}: need {n} more, have {}",
                self.pos,
                self.b.len() - self.pos
            )));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl SequenceBitstream {
    pub const HEADER_BYTES: usize = HEADER_BYTES;

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_BYTES + self.payload_bits() / 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [h.width, h.height, h.frames, h.gop_size] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(match h.mode {
            InterMode::Conditional => 0,
            InterMode::Residual => 1,
        });
        out.push(h.lambda_p_index);
        out.extend_from_slice(&h.lambda_i.to_le_bytes());
        out.extend_from_slice(&h.model_hash);
        for r in &self.records {
            out.push(match r.frame_type {
                FrameType::Intra => 0,
                FrameType::Inter => 1,
            });
            out.push(r.chunks.len() as u8);
            for c in &r.chunks {
                c.write_to(&mut out);
            }
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Bitstream("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Bitstream(format!("unsupported version {version}")));
        }
        let (width, height, frames, gop_size) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let mode = match r.u8()? {
            0 => InterMode::Conditional,
            1 => InterMode::Residual,
            m => return Err(Error::Bitstream(format!("unknown mode {m}"))),
        };
        let lambda_p_index = r.u8()?;
        let lambda_i = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let model_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        if width == 0 || height == 0 || width % 2 != 0 || height % 2 != 0 {
            return Err(Error::Bitstream(format!("invalid frame size {width}x{height}")));
        }
        if gop_size == 0 || lambda_p_index > 3 {
            return Err(Error::Bitstream("invalid gop size or lambda index".into()));
        }
        let mut records = Vec::new();
        for t in 0..frames {
            let frame_type = match r.u8()? {
                0 => FrameType::Intra,
                1 => FrameType::Inter,
                v => return Err(Error::Bitstream(format!("frame {t}: unknown type {v}"))),
            };
            let n = r.u8()?;
            let mut chunks = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let (c, used) = BitChunk::parse(&bytes[r.pos..])?;
                r.pos += used;
                chunks.push(c);
            }
            records.push(FrameRecord { frame_type, chunks });
        }
        if r.pos != bytes.len() {
            return Err(Error::Bitstream(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(SequenceBitstream {
            header: SequenceHeader {
                width,
                height,
                frames,
                gop_size,
                mode,
                lambda_p_index,
                lambda_i,
                model_hash,
            },
            records,
        })
    }

    /// Bits in frame records (everything except the fixed header).
    pub fn payload_bits(&self) -> usize {
        self.records.iter().map(FrameRecord::bits).sum()
    }

    pub fn total_bits(&self) -> usize {
        8 * HEADER_BYTES + self.payload_bits()
    }

    pub fn pixels(&self) -> usize {
        self.header.frames as usize * self.header.width as usize * self.header.height as usize
    }

    pub fn bpp(&self) -> f64 {
        self.total_bits() as f64 / self.pixels() as f64
    }

    pub fn frame_bpp(&self, t: usize) -> f64 {
        self.records[t].bits() as f64 / (self.header.width as f64 * self.header.height as f64)
    }
}

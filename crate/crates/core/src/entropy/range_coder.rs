//! Carry-less byte-oriented range coder with 32-bit state.

/// Bits of frequency precision in every table.
pub const PRECISION: u32 = 16;
/// Sum of all frequencies in a table.
pub const TOTAL: u32 = 1 << PRECISION;

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

#[derive(Debug)]
pub struct Encoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Encoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Codes the interval `[cum, cum + freq)` out of `1 << shift`.
    #[inline]
    pub fn encode(&mut self, cum: u32, freq: u32, shift: u32) {
        debug_assert!(freq > 0 && cum + freq <= 1 << shift);
        let r = self.range >> shift;
        self.low = self.low.wrapping_add(r * cum);
        self.range = r * freq;
        self.normalize();
    }

    /// Writes the low `n` bits of `value` (`n <= 16`) with uniform probability.
    #[inline]
    pub fn encode_bits(&mut self, value: u32, n: u32) {
        if n > 0 {
            self.encode(value, 1, n);
        }
    }

    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

#[derive(Debug)]
pub struct Decoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    r: u32,
    data: &'a [u8],
    pos: usize,
    overrun: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = Decoder {
            low: 0,
            range: u32::MAX,
            code: 0,
            r: 0,
            data,
            pos: 0,
            overrun: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        match self.data.get(self.pos) {
            Some(&b) => {
                self.pos += 1;
                b
            }
            None => {
                self.overrun += 1;
                0
            }
        }
    }

    /// Target frequency in `[0, 1 << shift)` for a valid stream; callers must
    /// treat larger values as corruption. Must be followed by [`Self::consume`].
    #[inline]
    pub fn decode_freq(&mut self, shift: u32) -> u32 {
        self.r = self.range >> shift;
        self.code.wrapping_sub(self.low) / self.r
    }

    #[inline]
    pub fn consume(&mut self, cum: u32, freq: u32) {
        self.low = self.low.wrapping_add(self.r * cum);
        self.range = self.r * freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Reads `n <= 16` uniform bits; `None` on an impossible value.
    #[inline]
    pub fn decode_bits(&mut self, n: u32) -> Option<u32> {
        if n == 0 {
            return Some(0);
        }
        let v = self.decode_freq(n);
        if v >= 1 << n {
            return None;
        }
        self.consume(v, 1);
        Some(v)
    }

    /// Bytes read from the payload so far, including the 4 priming bytes.
    pub fn consumed(&self) -> usize {
        self.pos + self.overrun
    }

    pub fn overrun(&self) -> usize {
        self.overrun
    }
}

//! Byte-oriented range coder.
//!
//! Carry handling follows the classic scheme: `low` holds 33 bits, the top
//! byte is cached until the next byte (or a carry) settles it, and runs of
//! 0xFF stay pending. Two deviations keep the stream overhead minimal, which
//! matters because payloads here are often just a few hundred bits:
//!
//! * no leading dummy byte: before the first renormalization `low + range`
//!   never exceeds 2^32, so a carry cannot occur before the first byte is
//!   cached and the priming byte of the textbook encoder carries no
//!   information;
//! * the flush rounds `low` up to the next multiple of 2^24 (always inside
//!   the final interval because renormalization keeps `range >= 2^24`), which
//!   pins every bit below the top byte to zero. The decoder zero-pads past
//!   the end of the buffer, so only the settled bytes are ever written: an
//!   empty stream is 1 byte and a typical flush costs about 2 bytes.
//!
//! Frequencies are exact integers and renormalized arithmetic is integer-only,
//! so encode and decode agree on every platform.

const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    /// Bytes pending output: the cached byte plus any run of 0xFF after it.
    /// Zero until the first byte is cached.
    pending: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, cache: 0, pending: 0, out: Vec::new() }
    }

    /// Narrow the interval to `[cum, cum + freq) / total`. Requires
    /// `cum + freq <= total`, `freq >= 1`, `total <= 2^16`.
    pub fn encode(&mut self, cum: u32, freq: u32, total: u32) {
        debug_assert!(freq >= 1 && cum + freq <= total);
        debug_assert!(total <= 1 << 16);
        let r = self.range / total;
        self.low += cum as u64 * r as u64;
        self.range = freq * r;
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    fn shift_low(&mut self) {
        let carry = (self.low >> 32) as u8;
        if (self.low as u32) < 0xFF00_0000 || carry == 1 {
            if self.pending > 0 {
                self.out.push(self.cache.wrapping_add(carry));
                for _ in 1..self.pending {
                    self.out.push(0xFFu8.wrapping_add(carry));
                }
            } else {
                // nothing cached yet: a carry is impossible because the
                // whole-stream interval sits below 2^32
                debug_assert_eq!(carry, 0);
            }
            self.cache = (self.low >> 24) as u8;
            self.pending = 1;
        } else if self.pending == 0 {
            // first byte of the stream is 0xFF; cache it like any other.
            // No carry can ever reach it (see above), so a 0xFF head of the
            // pending run is safe here and only here.
            self.cache = 0xFF;
            self.pending = 1;
        } else {
            self.pending += 1;
        }
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Settle the final interval and return the stream.
    pub fn finish(mut self) -> Vec<u8> {
        // round up to a multiple of 2^24; stays inside [low, low+range)
        let aligned = (self.low + (TOP as u64 - 1)) & !(TOP as u64 - 1);
        self.low = aligned;
        self.shift_low();
        self.shift_low();
        self.out
    }

    /// Bytes written so far (settled only; pending bytes not included).
    pub fn len_so_far(&self) -> usize {
        self.out.len()
    }
}

pub struct RangeDecoder<'a> {
    buf: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
    /// Bytes logically consumed past the end of the buffer.
    overrun: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        let mut d = RangeDecoder { buf, pos: 0, code: 0, range: u32::MAX, overrun: 0 };
        for _ in 0..4 {
            let b = d.next_byte();
            d.code = d.code << 8 | b as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        if self.pos < self.buf.len() {
            let b = self.buf[self.pos];
            self.pos += 1;
            b
        } else {
            self.pos += 1;
            self.overrun += 1;
            0
        }
    }

    /// Where in `[0, total)` the current code falls.
    pub fn decode_target(&mut self, total: u32) -> u32 {
        let r = self.range / total;
        (self.code / r).min(total - 1)
    }

    /// Consume the symbol whose interval is `[cum, cum + freq)`.
    pub fn advance(&mut self, cum: u32, freq: u32, total: u32) {
        let r = self.range / total;
        self.code -= cum * r;
        self.range = freq * r;
        while self.range < TOP {
            let b = self.next_byte();
            self.code = self.code << 8 | b as u32;
            self.range <<= 8;
        }
    }

    /// A structurally valid stream never reads more than a handful of padding
    /// bytes past its end; more than that means the payload was cut short.
    pub fn excessive_overrun(&self) -> bool {
        self.overrun > 8
    }
}

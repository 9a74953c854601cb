//! Extended Hamming (72,64) single-error-correct, double-error-detect code.
//!
//! Hamming positions 1..=71 hold parity at powers of two and the 64 data bits
//! elsewhere in increasing order; the eighth check bit is overall parity.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SecdedWord {
    pub data: u64,
    /// Bits 0..7 are the Hamming parities at positions 1,2,4,..,64; bit 7 is
    /// overall parity.
    pub check: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStatus {
    Clean,
    Corrected,
    Uncorrectable,
}

pub const CODE_BITS: usize = 72;

const DATA_POS: [u8; 64] = data_positions();

const fn data_positions() -> [u8; 64] {
    let mut out = [0u8; 64];
    let mut pos = 1u8;
    let mut i = 0;
    while i < 64 {
        if pos & (pos - 1) != 0 {
            out[i] = pos;
            i += 1;
        }
        pos += 1;
    }
    out
}

fn data_syndrome(data: u64) -> u8 {
    let mut s = 0u8;
    let mut d = data;
    while d != 0 {
        let i = d.trailing_zeros() as usize;
        s ^= DATA_POS[i];
        d &= d - 1;
    }
    s
}

pub fn secded_encode(data: u64) -> SecdedWord {
    let ham = data_syndrome(data) & 0x7f;
    let overall = ((data.count_ones() + ham.count_ones()) & 1) as u8;
    SecdedWord { data, check: ham | (overall << 7) }
}

impl SecdedWord {
    /// Flip one of the 72 stored bits: 0..64 are data, 64..72 check bits.
    pub fn flip(self, bit: usize) -> Self {
        assert!(bit < CODE_BITS, "codeword bit {bit} out of range");
        if bit < 64 {
            Self { data: self.data ^ (1 << bit), ..self }
        } else {
            Self { check: self.check ^ (1 << (bit - 64)), ..self }
        }
    }
}

pub fn secded_decode(word: SecdedWord) -> (u64, DecodeStatus) {
    let syn = data_syndrome(word.data) ^ (word.check & 0x7f);
    let overall = (word.data.count_ones() + word.check.count_ones()) & 1;
    match (syn, overall) {
        (0, 0) => (word.data, DecodeStatus::Clean),
        (_, 0) => (word.data, DecodeStatus::Uncorrectable),
        // Overall parity bit itself, or a Hamming parity bit.
        (s, _) if s & (s.wrapping_sub(1)) == 0 => (word.data, DecodeStatus::Corrected),
        (s, _) => match DATA_POS.iter().position(|&p| p == s) {
            Some(i) => (word.data ^ (1 << i), DecodeStatus::Corrected),
            None => (word.data, DecodeStatus::Uncorrectable),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_word() {
        assert_eq!(secded_encode(0), SecdedWord { data: 0, check: 0 });
    }

    #[test]
    fn positions_fill_to_71() {
        assert_eq!(DATA_POS[0], 3);
        assert_eq!(DATA_POS[63], 71);
    }

    #[test]
    fn every_single_error_is_corrected() {
        for &w in &[0u64, u64::MAX, 0x0123_4567_89ab_cdef, 0x8000_0000_0000_0001] {
            let c = secded_encode(w);
            assert_eq!(secded_decode(c), (w, DecodeStatus::Clean));
            for bit in 0..CODE_BITS {
                assert_eq!(secded_decode(c.flip(bit)), (w, DecodeStatus::Corrected), "bit {bit}");
            }
        }
    }

    #[test]
    fn all_double_errors_detected_on_one_word() {
        let c = secded_encode(0xdead_beef_0bad_f00d);
        for i in 0..CODE_BITS {
            for j in i + 1..CODE_BITS {
                assert_eq!(secded_decode(c.flip(i).flip(j)).1, DecodeStatus::Uncorrectable);
            }
        }
    }
}

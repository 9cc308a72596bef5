//! 1-bit masks, packed LSB-first: bit `j` of the row-major tensor lives in
//! byte `j / 8` at bit position `j % 8`. Padding bits in the final byte are 0.

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Eq)]
pub struct PackedMask {
    bit_count: usize,
    bytes: Vec<u8>,
}

impl std::fmt::Debug for PackedMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PackedMask({} bits, {} ones)", self.bit_count, self.count_ones())
    }
}

/// How [`PackedMask::from_bytes`] treats set padding bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Reject any set padding bit.
    Strict,
    /// Clear padding bits silently.
    Lenient,
}

pub const fn packed_len(bit_count: usize) -> usize {
    bit_count.div_ceil(8)
}

impl PackedMask {
    pub fn zeros(bit_count: usize) -> Self {
        PackedMask {
            bit_count,
            bytes: vec![0; packed_len(bit_count)],
        }
    }

    pub fn ones(bit_count: usize) -> Self {
        let mut m = PackedMask {
            bit_count,
            bytes: vec![0xff; packed_len(bit_count)],
        };
        m.clear_padding();
        m
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut bytes = vec![0u8; packed_len(bits.len())];
        for (j, &b) in bits.iter().enumerate() {
            if b {
                bytes[j / 8] |= 1 << (j % 8);
            }
        }
        PackedMask {
            bit_count: bits.len(),
            bytes,
        }
    }

    /// Wraps already-packed bytes after validating length and padding.
    pub fn from_bytes(bit_count: usize, bytes: Vec<u8>, padding: Padding) -> Result<Self> {
        if bytes.len() != packed_len(bit_count) {
            return Err(Error::format(
                "mask",
                format!(
                    "{bit_count} bits need {} bytes, got {}",
                    packed_len(bit_count),
                    bytes.len()
                ),
            ));
        }
        let mut m = PackedMask { bit_count, bytes };
        if m.padding_bits() != 0 {
            match padding {
                Padding::Strict => {
                    return Err(Error::format("mask", "nonzero padding bits in final byte"))
                }
                Padding::Lenient => m.clear_padding(),
            }
        }
        Ok(m)
    }

    /// Builds a mask from 8-bit groups produced in parallel; `bytes` must
    /// already respect the padding rule.
    pub(crate) fn from_raw_parts(bit_count: usize, bytes: Vec<u8>) -> Self {
        debug_assert_eq!(bytes.len(), packed_len(bit_count));
        let m = PackedMask { bit_count, bytes };
        debug_assert_eq!(m.padding_bits(), 0);
        m
    }

    fn padding_bits(&self) -> u8 {
        let used = self.bit_count % 8;
        match (used, self.bytes.last()) {
            (0, _) | (_, None) => 0,
            (used, Some(&last)) => last & !((1u8 << used) - 1),
        }
    }

    fn clear_padding(&mut self) {
        let used = self.bit_count % 8;
        if used != 0 {
            if let Some(last) = self.bytes.last_mut() {
                *last &= (1u8 << used) - 1;
            }
        }
    }

    pub fn bit_count(&self) -> usize {
        self.bit_count
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    #[inline]
    pub fn get(&self, j: usize) -> bool {
        debug_assert!(j < self.bit_count);
        self.bytes[j / 8] >> (j % 8) & 1 == 1
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.bit_count).map(|j| self.get(j)).collect()
    }
}

/// Packs bits LSB-first.
pub fn pack_mask(bits: &[bool]) -> PackedMask {
    PackedMask::from_bools(bits)
}

/// Unpacks `bytes` holding `bit_count` bits.
pub fn unpack_mask(bit_count: usize, bytes: &[u8], padding: Padding) -> Result<Vec<bool>> {
    Ok(PackedMask::from_bytes(bit_count, bytes.to_vec(), padding)?.to_bools())
}

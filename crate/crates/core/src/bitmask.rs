//! Fixed-length bitset used for sparsity masks.

use std::fmt;

const WORD: usize = 64;

#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct BitMask {
    words: Vec<u64>,
    len: usize,
}

impl BitMask {
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(WORD)],
            len,
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut mask = Self {
            words: vec![!0; len.div_ceil(WORD)],
            len,
        };
        mask.clear_tail();
        mask
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut mask = Self::zeros(bits.len());
        for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            mask.set(i, true);
        }
        mask
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut mask = Self::zeros(len);
        for i in indices {
            mask.set(i, true);
        }
        mask
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        self.words[i / WORD] >> (i % WORD) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        let bit = 1u64 << (i % WORD);
        if value {
            self.words[i / WORD] |= bit;
        } else {
            self.words[i / WORD] &= !bit;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Popcount over `range` of bit positions.
    pub fn count_range(&self, start: usize, end: usize) -> usize {
        (start..end).filter(|&i| self.get(i)).count()
    }

    pub fn and(&self, other: &BitMask) -> BitMask {
        self.zip(other, |a, b| a & b)
    }

    pub fn or(&self, other: &BitMask) -> BitMask {
        self.zip(other, |a, b| a | b)
    }

    pub fn and_not(&self, other: &BitMask) -> BitMask {
        self.zip(other, |a, b| a & !b)
    }

    pub fn not(&self) -> BitMask {
        let mut out = Self {
            words: self.words.iter().map(|w| !w).collect(),
            len: self.len,
        };
        out.clear_tail();
        out
    }

    pub fn or_assign(&mut self, other: &BitMask) {
        assert_eq!(self.len, other.len, "mask length mismatch");
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    /// Popcount of `self AND other` without allocating.
    pub fn count_and(&self, other: &BitMask) -> usize {
        assert_eq!(self.len, other.len, "mask length mismatch");
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn is_disjoint(&self, other: &BitMask) -> bool {
        self.count_and(other) == 0
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut word = w;
            std::iter::from_fn(move || {
                if word == 0 {
                    return None;
                }
                let tz = word.trailing_zeros() as usize;
                word &= word - 1;
                Some(wi * WORD + tz)
            })
        })
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    fn zip(&self, other: &BitMask, f: impl Fn(u64, u64) -> u64) -> BitMask {
        assert_eq!(self.len, other.len, "mask length mismatch");
        BitMask {
            words: self.words.iter().zip(&other.words).map(|(&a, &b)| f(a, b)).collect(),
            len: self.len,
        }
    }

    fn clear_tail(&mut self) {
        let rem = self.len % WORD;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }
}

impl fmt::Debug for BitMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitMask[")?;
        for i in 0..self.len.min(128) {
            write!(f, "{}", self.get(i) as u8)?;
        }
        if self.len > 128 {
            write!(f, "...({} bits)", self.len)?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ones_and_not_respect_length() {
        let m = BitMask::ones(70);
        assert_eq!(m.count_ones(), 70);
        assert_eq!(m.not().count_ones(), 0);
        assert_eq!(BitMask::zeros(70).not().count_ones(), 70);
    }

    proptest! {
        #[test]
        fn set_ops_match_bool_vectors(a in proptest::collection::vec(any::<bool>(), 0..300), seed in any::<u64>()) {
            let b: Vec<bool> = a.iter().enumerate().map(|(i, _)| (seed >> (i % 64)) & 1 == 1).collect();
            let (ma, mb) = (BitMask::from_bools(&a), BitMask::from_bools(&b));
            let and: Vec<bool> = a.iter().zip(&b).map(|(x, y)| *x && *y).collect();
            let or: Vec<bool> = a.iter().zip(&b).map(|(x, y)| *x || *y).collect();
            prop_assert_eq!(ma.and(&mb).to_bools(), and.clone());
            prop_assert_eq!(ma.or(&mb).to_bools(), or);
            prop_assert_eq!(ma.count_and(&mb), and.iter().filter(|x| **x).count());
            prop_assert_eq!(ma.count_ones(), a.iter().filter(|x| **x).count());
            let ones: Vec<usize> = ma.iter_ones().collect();
            let want: Vec<usize> = a.iter().enumerate().filter(|(_, x)| **x).map(|(i, _)| i).collect();
            prop_assert_eq!(ones, want);
        }
    }
}

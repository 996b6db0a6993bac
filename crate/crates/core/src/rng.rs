//! Counter-based random numbers: every draw is a pure function of
//! `(seed, stream, counter)`, so results do not depend on evaluation order
//! or thread count.

/// 64-bit FNV-1a, used to turn tensor names into stream ids.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    // SplitMix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let key = mix64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15)) ^ mix64(stream ^ 0xd1b5_4a32_d192_ed03);
        Self { key: mix64(key) }
    }

    pub fn for_tensor(seed: u64, tensor_name: &str) -> Self {
        Self::new(seed, fnv1a64(tensor_name.as_bytes()))
    }

    #[inline]
    pub fn u64_at(&self, counter: u64) -> u64 {
        let x = self.key ^ counter.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        mix64(mix64(x).wrapping_add(self.key))
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    #[inline]
    pub fn uniform_at(&self, counter: u64) -> f64 {
        (self.u64_at(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound) (bound > 0), via 128-bit multiply.
    #[inline]
    pub fn below_at(&self, counter: u64, bound: u64) -> u64 {
        ((self.u64_at(counter) as u128 * bound as u128) >> 64) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_pure_functions_of_key_and_counter() {
        let a = CounterRng::for_tensor(7, "layer.0.weight");
        let b = CounterRng::for_tensor(7, "layer.0.weight");
        let forward: Vec<u64> = (0..100).map(|i| a.u64_at(i)).collect();
        let backward: Vec<u64> = (0..100).rev().map(|i| b.u64_at(i)).collect();
        assert!(forward.iter().eq(backward.iter().rev()));
        assert_ne!(a, CounterRng::for_tensor(8, "layer.0.weight"));
        assert_ne!(a, CounterRng::for_tensor(7, "layer.1.weight"));
    }

    #[test]
    fn uniform_mean_and_bit_balance() {
        let rng = CounterRng::new(1, 2);
        let n = 200_000;
        let mean = (0..n).map(|i| rng.uniform_at(i)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "{mean}");
        for bit in [0, 17, 63] {
            let ones = (0..n).filter(|&i| rng.u64_at(i) >> bit & 1 == 1).count() as f64;
            assert!((ones / n as f64 - 0.5).abs() < 0.005);
        }
    }
}

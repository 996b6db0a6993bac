//! Bit-level conversions between F32 and the two 16-bit float formats.
//!
//! Widening is exact for every input, NaN payloads included. Narrowing rounds
//! to nearest, ties to even, and keeps the high payload bits of NaNs so that
//! a widen/narrow round trip reproduces the original 16 bits.

/// Widen IEEE binary16 bits to f32.
pub fn f16_to_f32(bits: u16) -> f32 {
    let sign = ((bits & 0x8000) as u32) << 16;
    let exp = ((bits >> 10) & 0x1f) as u32;
    let man = (bits & 0x03ff) as u32;

    let out = match exp {
        0 if man == 0 => sign,
        0 => {
            // subnormal: renormalize
            let shift = man.leading_zeros() - 21;
            let man = (man << shift) & 0x03ff;
            let exp = 127 - 15 + 1 - shift;
            sign | (exp << 23) | (man << 13)
        }
        0x1f => sign | 0x7f80_0000 | (man << 13),
        _ => sign | ((exp + 127 - 15) << 23) | (man << 13),
    };
    f32::from_bits(out)
}

/// Narrow f32 to IEEE binary16 bits, round to nearest even.
pub fn f32_to_f16(value: f32) -> u16 {
    let x = value.to_bits();
    let sign = ((x >> 16) & 0x8000) as u16;
    let exp = ((x >> 23) & 0xff) as i32;
    let man = x & 0x007f_ffff;

    if exp == 0xff {
        if man == 0 {
            return sign | 0x7c00;
        }
        let payload = (man >> 13) as u16;
        // a payload that truncates to zero would turn the NaN into infinity
        let payload = if payload == 0 { 0x0200 } else { payload };
        return sign | 0x7c00 | payload;
    }

    let unbiased = exp - 127;
    if unbiased > 15 {
        return sign | 0x7c00;
    }
    if unbiased >= -14 {
        // normal range
        let half_exp = (unbiased + 15) as u32;
        let mut out = (half_exp << 10) | (man >> 13);
        let rest = man & 0x1fff;
        if rest > 0x1000 || (rest == 0x1000 && out & 1 == 1) {
            out += 1; // may carry into the exponent, which is still correct
        }
        return sign | out as u16;
    }
    if unbiased < -25 {
        return sign;
    }
    // subnormal result: shift the full significand (with implicit bit)
    let full = man | 0x0080_0000;
    let shift = (-14 - unbiased) as u32 + 13;
    let mut out = full >> shift;
    let rest = full & ((1u32 << shift) - 1);
    let halfway = 1u32 << (shift - 1);
    if rest > halfway || (rest == halfway && out & 1 == 1) {
        out += 1;
    }
    sign | out as u16
}

/// Widen bfloat16 bits to f32. Always exact.
pub fn bf16_to_f32(bits: u16) -> f32 {
    f32::from_bits((bits as u32) << 16)
}

/// Narrow f32 to bfloat16 bits, round to nearest even.
pub fn f32_to_bf16(value: f32) -> u16 {
    let x = value.to_bits();
    if value.is_nan() {
        let hi = (x >> 16) as u16;
        return if hi & 0x007f == 0 { hi | 0x0040 } else { hi };
    }
    let round_bit = 0x0000_8000u32;
    let lsb = (x >> 16) & 1;
    let rest = x & 0xffff;
    let mut hi = x >> 16;
    if rest > round_bit || (rest == round_bit && lsb == 1) {
        hi += 1;
    }
    hi as u16
}

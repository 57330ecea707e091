//! IEEE 754 binary16 emulation and the fragment multiply-accumulate used by
//! the engine.
//!
//! All conversions round to nearest, ties to even. Products of two binary16
//! values are exact in binary32 (11 + 11 significand bits), so the only
//! rounding inside [`mma_fragment`] happens in the binary32 accumulation,
//! which runs in ascending `k` order.

use std::fmt;

use crate::error::{FluteError, Result};

/// Binary32 accumulator type used inside a worker.
pub type Accum = f32;

/// A binary16 bit pattern. Every `u16` is a valid `Half`.
///
/// Equality is bitwise: `+0 != -0` and identical NaN patterns compare equal.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Half(u16);

impl Half {
    pub const ZERO: Half = Half(0x0000);
    pub const NEG_ZERO: Half = Half(0x8000);
    pub const ONE: Half = Half(0x3C00);
    pub const INFINITY: Half = Half(0x7C00);
    pub const NEG_INFINITY: Half = Half(0xFC00);
    pub const MAX: Half = Half(0x7BFF);
    pub const NAN: Half = Half(0x7E00);

    pub const fn from_bits(bits: u16) -> Half {
        Half(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    pub fn from_f32(x: f32) -> Half {
        f32_to_f16(x)
    }

    pub fn to_f32(self) -> f32 {
        f16_to_f32(self)
    }

    pub const fn is_nan(self) -> bool {
        (self.0 & 0x7C00) == 0x7C00 && (self.0 & 0x03FF) != 0
    }

    pub const fn is_finite(self) -> bool {
        (self.0 & 0x7C00) != 0x7C00
    }

    pub const fn is_sign_negative(self) -> bool {
        self.0 & 0x8000 != 0
    }
}

impl fmt::Debug for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Half({:#06x} = {})", self.0, self.to_f32())
    }
}

impl fmt::Display for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f32(), f)
    }
}

impl From<Half> for f32 {
    fn from(h: Half) -> f32 {
        h.to_f32()
    }
}

/// Round a binary32 value to binary16 (round-to-nearest-even).
///
/// Overflow saturates to a signed infinity, results in the subnormal range
/// are rounded exactly, and NaN inputs become quiet NaNs that keep the top
/// payload bits.
pub fn f32_to_f16(x: f32) -> Half {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xFF) as i32;
    let man = bits & 0x007F_FFFF;

    if exp == 0xFF {
        if man == 0 {
            return Half(sign | 0x7C00);
        }
        return Half(sign | 0x7E00 | (man >> 13) as u16);
    }

    // Re-biased exponent.
    let e = exp - 127 + 15;
    if e >= 0x1F {
        return Half(sign | 0x7C00);
    }

    if e <= 0 {
        // Below half of the smallest subnormal: rounds to zero.
        if e < -10 {
            return Half(sign);
        }
        let m = man | 0x0080_0000;
        let shift = (14 - e) as u32;
        let mut h = m >> shift;
        let rem = m & ((1u32 << shift) - 1);
        let halfway = 1u32 << (shift - 1);
        if rem > halfway || (rem == halfway && (h & 1) == 1) {
            h += 1;
        }
        return Half(sign | h as u16);
    }

    let mut h = ((e as u32) << 10) | (man >> 13);
    let rem = man & 0x1FFF;
    if rem > 0x1000 || (rem == 0x1000 && (h & 1) == 1) {
        // A carry out of the mantissa bumps the exponent, up to infinity.
        h += 1;
    }
    Half(sign | h as u16)
}

/// Exact widening of a binary16 value.
pub fn f16_to_f32(h: Half) -> f32 {
    let h = h.0 as u32;
    let sign = (h & 0x8000) << 16;
    let exp = (h >> 10) & 0x1F;
    let man = h & 0x03FF;

    let bits = match exp {
        0 if man == 0 => sign,
        0 => {
            // Subnormal: man * 2^-24 is exact in binary32.
            let v = man as f32 * f32::from_bits(0x3380_0000);
            sign | v.to_bits()
        }
        0x1F => sign | 0x7F80_0000 | (man << 13),
        _ => sign | ((exp + 112) << 23) | (man << 13),
    };
    f32::from_bits(bits)
}

/// Widen a slice of halves.
pub fn widen(src: &[Half]) -> Vec<f32> {
    src.iter().map(|&h| f16_to_f32(h)).collect()
}

/// Round a slice of binary32 values to halves.
pub fn narrow(src: &[f32]) -> Vec<Half> {
    src.iter().map(|&x| f32_to_f16(x)).collect()
}

/// Shape of one multiply-accumulate fragment: `a` is `m x k`, `b` is `k x n`,
/// the accumulator is `m x n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FragmentShape {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

impl Default for FragmentShape {
    /// `[16,16] x [16,8]`, the Ampere half-precision MMA shape.
    fn default() -> Self {
        FragmentShape { m: 16, n: 8, k: 16 }
    }
}

/// `c += a * b` with binary16 operands and a binary32 accumulator.
///
/// Every product is formed in binary32 and added into `c[i][j]` in ascending
/// `k`, so the result is bitwise reproducible. All operands are row-major.
pub fn mma_fragment(shape: FragmentShape, a: &[Half], b: &[Half], c: &mut [Accum]) -> Result<()> {
    let FragmentShape { m, n, k } = shape;
    if a.len() != m * k || b.len() != k * n || c.len() != m * n {
        return Err(FluteError::Config(format!(
            "fragment operands {}/{}/{} do not match shape {m}x{n}x{k}",
            a.len(),
            b.len(),
            c.len()
        )));
    }
    let bw = widen(b);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &ah) in arow.iter().enumerate() {
            let av = f16_to_f32(ah);
            let brow = &bw[p * n..(p + 1) * n];
            for (acc, &bv) in crow.iter_mut().zip(brow) {
                *acc += av * bv;
            }
        }
    }
    Ok(())
}

//! bfloat16 storage type.
//!
//! Only conversions are provided; arithmetic happens in `f32` after
//! widening, which is exact because every bfloat16 value is an `f32`.

use std::fmt;

/// A bfloat16 value stored as its raw 16-bit pattern (sign, 8-bit exponent,
/// 7 stored mantissa bits).
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
#[repr(transparent)]
pub struct Bf16(u16);

impl Bf16 {
    pub const ZERO: Bf16 = Bf16(0x0000);
    pub const NEG_ZERO: Bf16 = Bf16(0x8000);
    pub const ONE: Bf16 = Bf16(0x3f80);
    pub const INFINITY: Bf16 = Bf16(0x7f80);

    #[inline]
    pub const fn from_bits(bits: u16) -> Self {
        Bf16(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Round-to-nearest-even conversion. NaN stays NaN (quieted, sign kept).
    #[inline]
    pub fn from_f32(x: f32) -> Self {
        let bits = x.to_bits();
        if x.is_nan() {
            return Bf16(((bits >> 16) as u16) | 0x0040);
        }
        let lsb = (bits >> 16) & 1;
        let rounded = bits.wrapping_add(0x7fff + lsb);
        Bf16((rounded >> 16) as u16)
    }

    #[inline]
    pub fn to_f32(self) -> f32 {
        f32::from_bits((self.0 as u32) << 16)
    }

    pub fn is_nan(self) -> bool {
        (self.0 & 0x7f80) == 0x7f80 && (self.0 & 0x007f) != 0
    }
}

impl From<Bf16> for f32 {
    fn from(v: Bf16) -> f32 {
        v.to_f32()
    }
}

impl fmt::Debug for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}bf16", self.to_f32())
    }
}

impl fmt::Display for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f32(), f)
    }
}

/// Round an `f32` to the nearest bfloat16 and widen it back.
#[inline]
pub fn round_trip(x: f32) -> f32 {
    Bf16::from_f32(x).to_f32()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants() {
        assert_eq!(Bf16::ONE.to_f32(), 1.0);
        assert_eq!(Bf16::ZERO.to_f32(), 0.0);
        assert!(Bf16::NEG_ZERO.to_f32().is_sign_negative());
        assert_eq!(Bf16::INFINITY.to_f32(), f32::INFINITY);
    }

    #[test]
    fn nan_propagates() {
        let n = Bf16::from_f32(f32::NAN);
        assert!(n.is_nan());
        assert!(n.to_f32().is_nan());
        // a NaN whose payload lives only in the low 16 bits must not collapse to inf
        let low_payload = f32::from_bits(0x7f80_0001);
        assert!(Bf16::from_f32(low_payload).is_nan());
    }

    #[test]
    fn overflow_rounds_to_infinity() {
        assert_eq!(Bf16::from_f32(f32::MAX).to_f32(), f32::INFINITY);
        assert_eq!(Bf16::from_f32(f32::NEG_INFINITY).to_f32(), f32::NEG_INFINITY);
    }
}

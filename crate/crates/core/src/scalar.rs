//! Floating-point scalar abstraction shared by every numeric module.

use std::cmp::Ordering;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// On-disk element type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 3,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Real scalar used for weights, activations and gradients.
///
/// Implemented for `f32` (the production precision) and `f64` (used by the
/// finite-difference checks, where f32 rounding would swamp the signal).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE: DType;

    /// Lossy conversion from `f64`; never fails for finite input.
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one element from exactly `DTYPE.width()` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    fn total_cmp(&self, other: &Self) -> Ordering;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    fn total_cmp(&self, other: &Self) -> Ordering {
        f32::total_cmp(self, other)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    fn total_cmp(&self, other: &Self) -> Ordering {
        f64::total_cmp(self, other)
    }
}

/// Order-independent sum: the terms are sorted by total order first, so any
/// permutation of the same multiset yields the same bits.
pub fn sorted_sum<T: Scalar>(terms: &mut [T]) -> T {
    terms.sort_unstable_by(|a, b| a.total_cmp(b));
    terms.iter().fold(T::zero(), |acc, &t| acc + t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_sum_ignores_order() {
        let mut a = vec![1e8f32, 1.0, -1e8, 3.5, 1e-3];
        let mut b = vec![1.0f32, 1e-3, 3.5, -1e8, 1e8];
        assert_eq!(sorted_sum(&mut a).to_bits(), sorted_sum(&mut b).to_bits());
    }

    #[test]
    fn le_round_trip() {
        let mut buf = Vec::new();
        (-0.15625f32).write_le(&mut buf);
        1.0e-300f64.write_le(&mut buf);
        assert_eq!(f32::read_le(&buf[..4]), -0.15625);
        assert_eq!(f64::read_le(&buf[4..]), 1.0e-300);
    }
}

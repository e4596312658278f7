//! Dense row-major tensors and the reverse-mode tape built on them.
//!
//! Training runs in `f32`; the same ops are available in `f64` for the
//! finite-difference gradient checker, where central differences at
//! `eps ~ 1e-5` would drown in single-precision rounding.

pub mod gradcheck;
pub mod ops;
pub mod tape;

use crate::error::{Error, Result};

/// Element type for tensors: `f32` for the engine, `f64` for gradient checks.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + Default
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn log2(self) -> Self;
    fn exp2(self) -> Self;
    fn sqrt(self) -> Self;
    /// Rounds half-way cases away from zero (Rust's `round` semantics).
    fn round_half_away(self) -> Self;
    fn max_s(self, other: Self) -> Self;
    fn min_s(self, other: Self) -> Self;
    fn is_nan_s(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn log2(self) -> Self {
                self.log2()
            }
            fn exp2(self) -> Self {
                self.exp2()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn round_half_away(self) -> Self {
                self.round()
            }
            fn max_s(self, other: Self) -> Self {
                self.max(other)
            }
            fn min_s(self, other: Self) -> Self {
                self.min(other)
            }
            fn is_nan_s(self) -> bool {
                self.is_nan()
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Dense n-dimensional array, row-major, contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::ZERO; n.max(0)] }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Scalar tensors (`numel == 1`) unwrap to their single value.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::from_f64(x.to_f64())).collect(),
        }
    }

    /// Reinterprets the buffer under a new shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::ZERO, |m, &x| m.max_s(x.abs()))
    }
}

impl Tensor<f32> {
    /// Bitwise equality, distinguishing NaN payloads and signed zeros.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// max |a-b| / max(1, |b|) over all elements.
pub fn max_rel_err<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| {
            let diff = (x.to_f64() - y.to_f64()).abs();
            diff / y.to_f64().abs().max(1.0)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_shape() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn bit_eq_sees_signed_zero() {
        let a = Tensor::from_vec(vec![1], vec![0.0f32]).unwrap();
        let b = Tensor::from_vec(vec![1], vec![-0.0f32]).unwrap();
        assert!(!a.bit_eq(&b));
        assert!(a.bit_eq(&a));
    }
}

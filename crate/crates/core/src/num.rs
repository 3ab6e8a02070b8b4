//! Scalar abstraction so the model can train in `f32` and run
//! finite-difference gradient checks in `f64`.

use ndarray::{LinalgScalar, ScalarOperand};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            4 => Some(Dtype::F32),
            8 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        (F::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub trait Real:
    LinalgScalar
    + ScalarOperand
    + num_traits::Float
    + num_traits::NumAssign
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    const DTYPE: Dtype;
    const BYTES: usize;

    /// Constant conversion; panics only on non-finite input, which never
    /// occurs for the literals it is used with.
    fn c(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn append_le(self, out: &mut Vec<u8>);
    fn from_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const BYTES: usize = 4;

    #[inline(always)]
    fn c(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn append_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const BYTES: usize = 8;

    #[inline(always)]
    fn c(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }

    fn append_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

//! Floating-point abstraction shared by the network, loss and training code.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the learning stack is generic over.
///
/// Implemented for `f32` and `f64`. `Display`/`FromStr` must round-trip
/// exactly, which both primitive floats guarantee.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + FromStr
    + Send
    + Sync
    + 'static
{
    /// Tag written into checkpoint headers.
    const NAME: &'static str;

    /// Lossy conversion from `f64`; every finite `f64` maps to some value.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// `log Σ exp(x_i)` with max-shift.
pub fn logsumexp<S: Scalar>(xs: &[S]) -> S {
    let m = xs.iter().copied().fold(S::neg_infinity(), S::max);
    if !m.is_finite() {
        return m;
    }
    let s: S = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Softmax of `xs` written into `out`.
pub fn softmax_into<S: Scalar>(xs: &[S], out: &mut [S]) {
    let m = xs.iter().copied().fold(S::neg_infinity(), S::max);
    let mut z = S::zero();
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax<S: Scalar>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

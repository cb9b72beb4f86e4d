//! Scalar abstraction for the model math.
//!
//! Everything inside the model (forward, backward, training, decoding,
//! value-shift optimization) is generic over [`Scalar`] so the same code
//! runs in fp32 for training and fp64 for finite-difference checks. The
//! ridge solver is deliberately *not* generic: it always works in f64.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating scalar the model is generic over. Implemented for `f32`/`f64`.
///
/// `cast`/`as_f64` are deliberately not named like the `num_traits`
/// conversion methods to keep call sites unambiguous.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Short name recorded in checkpoint headers.
    const NAME: &'static str;

    fn cast(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "fp32";

    fn cast(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "fp64";

    fn cast(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// silu(x) = x * sigmoid(x).
pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

/// d/dx silu(x) = sigmoid(x) * (1 + x * (1 - sigmoid(x))).
pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_symmetry() {
        let x = 1.7_f64;
        assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn silu_matches_definition() {
        // silu(2) = 2 / (1 + e^-2), checked against a calculator.
        assert!((silu(2.0_f64) - 1.7615941559557649).abs() < 1e-12);
    }

    #[test]
    fn silu_grad_matches_central_difference() {
        let h = 1e-6_f64;
        for &x in &[-3.0, -0.5, 0.0, 0.9, 2.4] {
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((silu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }
}

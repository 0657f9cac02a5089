//! Floating point abstraction shared by all of the diffusion math.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Scalar type usable by the process, the cluster bank and the denoiser.
///
/// Everything is verified in `f64`; `f32` is supported for memory-bound
/// experiments but the closed-form identities only hold to single precision.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Smallest variance any Gaussian is allowed to carry.
    const VAR_FLOOR: Self;

    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const VAR_FLOOR: Self = 1e-12;

            #[inline(always)]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline(always)]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Cosine similarity, `None` when either vector has zero norm.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> Option<T> {
    let na = norm(a);
    let nb = norm(b);
    if na == T::zero() || nb == T::zero() {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

/// Gradient of `cos(a, b)` with respect to `a`.
pub(crate) fn cosine_grad_a<T: Real>(a: &[T], b: &[T]) -> (T, Vec<T>) {
    let na = norm(a);
    let nb = norm(b);
    let cos = dot(a, b) / (na * nb);
    let grad = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| bi / (na * nb) - cos * ai / (na * na))
        .collect();
    (cos, grad)
}

pub(crate) fn normalize_f64(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub(crate) fn convert<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

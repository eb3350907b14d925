//! Numeric kernels used by processors, generic over the float width.

use num_traits::Float;

/// Level reported for a window whose RMS is zero (or below the floor).
pub const DB_FLOOR: f64 = -120.0;

pub fn mean<T: Float>(xs: &[T]) -> Option<T> {
    if xs.is_empty() {
        return None;
    }
    let n = T::from(xs.len())?;
    Some(xs.iter().fold(T::zero(), |acc, &x| acc + x) / n)
}

/// Root mean square of the window.
pub fn rms<T: Float>(xs: &[T]) -> Option<T> {
    if xs.is_empty() {
        return None;
    }
    let n = T::from(xs.len())?;
    Some((xs.iter().fold(T::zero(), |acc, &x| acc + x * x) / n).sqrt())
}

/// `20·log10(rms / reference)`, floored at [`DB_FLOOR`].
pub fn level_db<T: Float>(xs: &[T], reference: T) -> Option<T> {
    let floor = T::from(DB_FLOOR)?;
    let r = rms(xs)?;
    if r <= T::zero() {
        return Some(floor);
    }
    let twenty = T::from(20.0)?;
    Some((twenty * (r / reference).log10()).max(floor))
}

pub type Level32 = f32;
pub type Level64 = f64;

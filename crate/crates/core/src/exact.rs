use num_rational::Ratio;
use num_traits::ToPrimitive;

/// Exact rational number used for every closed-form volume and memory
/// formula. Inputs are bounded well below `i128::MAX` for realistic model
/// sizes (products of a handful of values below 2^40).
pub type Exact = Ratio<i128>;

/// Converts an exact value to `f64` (nearest representable).
pub fn to_f64(x: &Exact) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Converts a finite `f64` to an exact rational. Integral values are
/// converted without loss; other values use the continued-fraction
/// approximation of `num-rational`.
pub fn exact_from_f64(x: f64) -> Option<Exact> {
    if !x.is_finite() {
        return None;
    }
    if x.fract() == 0.0 && x.abs() < 1.0e36 {
        return Some(Exact::from_integer(x as i128));
    }
    Exact::approximate_float(x)
}

pub(crate) fn int(x: u64) -> Exact {
    Exact::from_integer(x as i128)
}

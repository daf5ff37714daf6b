//! Small numeric helpers shared across modules.

/// Log of the summed exponentials of `values`, stable under large
/// magnitudes. Empty input and all-(-inf) input both give `-inf`, the log
/// of zero mass.
pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // Either no mass at all or an infinite term; the max is the sum.
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

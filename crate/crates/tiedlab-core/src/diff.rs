//! Comparison metrics used by the equivalence oracles and gradient checks.

/// Largest absolute elementwise difference.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_abs_diff: length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Scaled difference between two buffers: the largest absolute elementwise
/// difference divided by the largest magnitude found in either buffer.
///
/// Scaling by the buffer norm rather than per element keeps the metric
/// meaningful when individual outputs cancel to near zero while the data
/// itself is O(1).
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(1e-30_f64, f64::max);
    max_abs_diff(a, b) / scale
}

/// True when the two buffers are identical bit for bit.
pub fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Per-coordinate gradient-check metric: |a - f| / max(1e-8, |a| + |f|).
pub fn grad_rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / f64::max(1e-8, analytic.abs() + fd.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_diff_scales_by_magnitude() {
        let a = [1000.0, 0.0];
        let b = [1000.0 + 1e-10, 0.0];
        assert!(rel_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn bitwise_distinguishes_signed_zero() {
        assert!(bitwise_eq(&[0.0], &[0.0]));
        assert!(!bitwise_eq(&[0.0], &[-0.0]));
    }
}

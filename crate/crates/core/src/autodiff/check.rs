/// Central-difference gradient of `f` at `x`:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for each coordinate.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let hi = f(&probe);
            probe[i] = x[i] - eps;
            let lo = f(&probe);
            probe[i] = x[i];
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

/// `|a - b| <= atol + rtol * max(|a|, |b|)`.
pub fn rel_close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= atol + rtol * a.abs().max(b.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let d = finite_diff(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((d[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_at_zero() {
        let d = finite_diff(|x| 1.0 / (1.0 + (-x[0]).exp()), &[0.0], 1e-5);
        assert!((d[0] - 0.25).abs() < 1e-6);
    }
}

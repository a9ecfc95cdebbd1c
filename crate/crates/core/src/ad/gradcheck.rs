use crate::scalar::Scalar;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_diff_gradient<T: Scalar>(mut f: impl FnMut(&[T]) -> T, x: &[T], h: T) -> Vec<T> {
    let mut probe = x.to_vec();
    let two_h = h + h;
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / two_h
        })
        .collect()
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error<T: Scalar>(a: &[T], b: &[T], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x.f64() - y.f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x.f64().powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x.f64().powi(2)).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_gradient(|x: &[f64]| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn affine_is_exact() {
        let g = finite_diff_gradient(|x: &[f64]| 2.5 * x[0] - 0.5 * x[1] + 1.0, &[0.25, -1.0], 0.5);
        assert!((g[0] - 2.5).abs() < 1e-14);
        assert!((g[1] + 0.5).abs() < 1e-14);
    }
}

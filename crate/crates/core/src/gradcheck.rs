//! Central finite differences, used as an independent check on tape gradients.

use crate::matrix::DMatrix;

/// Central-difference gradient of a scalar function at `x` with step `h`.
pub fn central_difference(x: &DMatrix, h: f64, mut f: impl FnMut(&DMatrix) -> f64) -> DMatrix {
    let mut probe = x.clone();
    let mut grad = DMatrix::zeros(x.rows(), x.cols());
    for idx in 0..x.len() {
        let orig = probe.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + h;
        let plus = f(&probe);
        probe.as_mut_slice()[idx] = orig - h;
        let minus = f(&probe);
        probe.as_mut_slice()[idx] = orig;
        grad.as_mut_slice()[idx] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Largest absolute discrepancy, relative to the largest gradient magnitude of either side.
///
/// Entries where `mask` is false are ignored.
pub fn max_relative_error_masked(analytic: &DMatrix, numeric: &DMatrix, mask: Option<&[bool]>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let mut scale = 0.0f64;
    let mut worst = 0.0f64;
    for (i, (a, n)) in analytic.as_slice().iter().zip(numeric.as_slice()).enumerate() {
        if !keep(i) {
            continue;
        }
        scale = scale.max(a.abs()).max(n.abs());
        worst = worst.max((a - n).abs());
    }
    if worst == 0.0 {
        0.0
    } else {
        worst / scale.max(1e-12)
    }
}

pub fn max_relative_error(analytic: &DMatrix, numeric: &DMatrix) -> f64 {
    max_relative_error_masked(analytic, numeric, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_of_cubic() {
        let x = DMatrix::from_vec(1, 2, vec![1.0, -2.0]).unwrap();
        let g = central_difference(&x, 1e-5, |m| m.as_slice().iter().map(|v| v * v * v).sum());
        let exact = DMatrix::from_vec(1, 2, vec![3.0, 12.0]).unwrap();
        assert!(max_relative_error(&g, &exact) < 1e-9);
    }

    #[test]
    fn mask_excludes_entries() {
        let a = DMatrix::from_vec(1, 2, vec![1.0, 5.0]).unwrap();
        let b = DMatrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(max_relative_error_masked(&a, &b, Some(&[true, false])), 0.0);
        assert!(max_relative_error(&a, &b) > 0.9);
    }
}

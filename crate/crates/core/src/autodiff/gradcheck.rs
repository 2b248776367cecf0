use super::tensor::Tensor;
use super::AutodiffError;

/// Central-difference gradient `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h` per coordinate.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor, AutodiffError>
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for (i, g) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(AutodiffError::NonFinite { index: i });
        }
        *g = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Norm-wise relative discrepancy `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_at_zero() {
        let g = finite_difference_grad(|x| x.item().sin(), &Tensor::scalar(0.0), 1e-5).unwrap();
        assert!((g.item() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_difference_grad(|_| 4.2, &Tensor::row(&[1.0, 2.0, 3.0]), 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn squared_norm() {
        let g = finite_difference_grad(
            |x| x.data().iter().map(|v| v * v).sum(),
            &Tensor::row(&[1.0, 2.0]),
            1e-5,
        )
        .unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let r = finite_difference_grad(|x| 1.0 / x.item(), &Tensor::scalar(1e-6), 1e-6);
        assert!(r.is_err());
    }

    #[test]
    fn relative_error_zero_vectors() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }
}

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient `(f(p + h eᵢ) − f(p − h eᵢ)) / 2h` per coordinate.
///
/// This is the independent oracle for every reverse-mode gradient in the crate.
pub fn finite_difference_gradient<F>(mut f: F, point: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let mut probe = point.clone();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let base = point.data()[i];
        probe.data_mut()[i] = base + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = base - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = base;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("function evaluation at coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Tensor::new(point.shape().to_vec(), grad)
}

/// Largest coordinate-wise relative error `|a−b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let g = finite_difference_gradient(|p| Ok(p.data()[0].powi(2)), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn linear_sum_gives_ones() {
        let x = Tensor::vector(vec![0.3, -2.0, 7.5, 1e3]);
        let g = finite_difference_gradient(|p| Ok(p.data().iter().sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let x = Tensor::scalar(1.0);
        assert!(finite_difference_gradient(|_| Ok(0.0), &x, 0.0).is_err());
        assert!(finite_difference_gradient(|_| Ok(f64::NAN), &x, 1e-3).is_err());
    }
}

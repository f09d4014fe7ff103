use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Central-difference gradient of a scalar function at `point`:
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` per element.
pub fn finite_diff_grad<T, F>(mut f: F, point: &Tensor<T>, h: f64) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::config(format!(
            "finite-difference step {h} must be positive"
        )));
    }
    let mut probe = point.clone();
    probe.set_requires_grad(false);
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let x = probe.data()[i];
        probe.data_mut()[i] = T::lit(x.as_f64() + h);
        let plus = f(&probe)?.as_f64();
        probe.data_mut()[i] = T::lit(x.as_f64() - h);
        let minus = f(&probe)?.as_f64();
        probe.data_mut()[i] = x;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite function value probing element {i}"
            )));
        }
        out.push(T::lit((plus - minus) / (2.0 * h)));
    }
    Tensor::new(point.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let g = finite_diff_grad(|_| Ok(7.0), &x, 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0; 3]);
    }

    #[test]
    fn l1_matches_sign_over_count() {
        let target = [0.0, 4.0, -1.0];
        let x = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 0.5]).unwrap();
        let g = finite_diff_grad(
            |t| {
                Ok(t.data()
                    .iter()
                    .zip(&target)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / 3.0)
            },
            &x,
            1e-5,
        )
        .unwrap();
        for (got, want) in g.data().iter().zip([1.0 / 3.0, -1.0 / 3.0, 1.0 / 3.0]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_step_and_non_finite_values() {
        let x = Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap();
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
        assert!(matches!(
            finite_diff_grad(|_| Ok(f64::INFINITY), &x, 1e-5),
            Err(Error::Numeric(_))
        ));
    }
}

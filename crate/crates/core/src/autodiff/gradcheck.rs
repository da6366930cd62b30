use super::{Scalar, Tensor};
use crate::error::{invalid, Result};

/// Central-difference gradient estimate of `f` at `x`.
///
/// Coordinate `i` is `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_diff<T: Scalar>(f: impl Fn(&Tensor<T>) -> T, x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    if !(eps > T::zero()) {
        return invalid(format!("finite_diff eps must be positive, got {eps}"));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    let two = T::lit(2.0);
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((hi - lo) / (two * eps));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Largest coordinate-wise relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// `floor` keeps coordinates whose true gradient is essentially zero from
/// dominating through round-off.
pub fn max_relative_error<T: Scalar>(a: &[T], b: &[T], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_diff(|t| t.item() * t.item(), &x, 1e-3).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let x = Tensor::<f64>::vector(vec![1.0, -2.0, 0.5]);
        let g = finite_diff(|_| 4.2, &x, 1e-3).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_positive_eps_rejected() {
        let x = Tensor::<f64>::scalar(1.0);
        assert!(finite_diff(|t| t.item(), &x, 0.0).is_err());
        assert!(finite_diff(|t| t.item(), &x, -1e-3).is_err());
    }
}

//! Central finite differences, the independent oracle for the tape.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
///
/// # Panics
/// If `step` is not positive.
pub fn finite_diff_grad<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, step: T) -> Tensor<T> {
    assert!(step > T::zero(), "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (step + step));
    }
    Tensor::new(x.shape(), grad).expect("same shape as x")
}

/// Agreement between an analytic and a numeric gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Worst relative error over elements whose numeric gradient is at
    /// least `small`.
    pub max_relative: f64,
    /// Worst absolute error over the remaining (near-zero) elements.
    pub max_absolute_small: f64,
    pub elements: usize,
}

impl GradCheck {
    pub const SMALL: f64 = 1e-6;
    pub const REL_TOL: f64 = 1e-4;
    pub const ABS_TOL: f64 = 1e-7;

    pub fn compare<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> GradCheck {
        assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
        let mut max_relative: f64 = 0.0;
        let mut max_absolute_small: f64 = 0.0;
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            let (a, n) = (a.as_f64(), n.as_f64());
            let err = (a - n).abs();
            if n.abs() < Self::SMALL {
                max_absolute_small = max_absolute_small.max(err);
            } else {
                max_relative = max_relative.max(err / n.abs().max(a.abs()));
            }
        }
        GradCheck {
            max_relative,
            max_absolute_small,
            elements: analytic.len(),
        }
    }

    pub fn passed(&self) -> bool {
        self.max_relative < Self::REL_TOL && self.max_absolute_small < Self::ABS_TOL
    }

    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_relative: self.max_relative.max(other.max_relative),
            max_absolute_small: self.max_absolute_small.max(other.max_absolute_small),
            elements: self.elements + other.elements,
        }
    }
}

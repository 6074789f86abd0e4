use crate::scalar::Scalar;

use super::{NumericsError, Tape, Tensor, Var};

/// Central-difference gradient of a scalar function of one tensor.
pub fn central_difference<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, eps: T) -> Tensor<T> {
    let two = T::one() + T::one();
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (two * eps);
    }
    grad
}

/// `max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-12)`; NaN if any term is.
pub fn max_relative_error<T: Scalar>(analytic: &[T], numeric: &[T]) -> T {
    let floor = T::of(1e-12);
    let mut worst = T::zero();
    for (&a, &n) in analytic.iter().zip(numeric) {
        let e = (a - n).abs() / (n.abs() + floor);
        if e.is_nan() {
            return e;
        }
        worst = worst.max(e);
    }
    worst
}

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// `f` builds a scalar-valued graph from the leaf it is handed; it is rebuilt
/// on a fresh tape for every probe.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T, NumericsError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    let analytic = tape.backward(out)?.wrt(leaf);

    let mut failure = None;
    let numeric = central_difference(
        |probe| {
            let mut t = Tape::new();
            let l = t.leaf(probe.clone());
            match f(&mut t, l) {
                Ok(o) => t.value(o).item(),
                Err(e) => {
                    failure.get_or_insert(e);
                    T::nan()
                }
            }
        },
        x,
        eps,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(max_relative_error(analytic.data(), numeric.data()))
}

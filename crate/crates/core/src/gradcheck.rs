//! Central finite-difference gradient checking.

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor on the denominator of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// `|a - c| / max(|a|, |c|, 1e-8)`
pub fn relative_error(autodiff: f64, central: f64) -> f64 {
    let denom = autodiff.abs().max(central.abs()).max(REL_ERROR_FLOOR);
    (autodiff - central).abs() / denom
}

/// Max relative error between reverse-mode and central-difference gradients
/// of a scalar function of one tensor.
pub fn grad_check<S, F>(f: F, point: &Tensor<S>, epsilon: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), epsilon)
}

/// Same as [`grad_check`] for a function of several tensors; every coordinate
/// of every tensor is perturbed.
pub fn grad_check_many<S, F>(f: F, points: &[Tensor<S>], epsilon: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor<S>]| -> Result<(Tape<S>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(ParamId(i), p.clone()))
            .collect();
        let out = f(&mut tape, &vars)?;
        if !tape.value(out).is_scalar() {
            return Err(Error::NonScalarLoss(tape.value(out).shape().to_vec()));
        }
        Ok((tape, out))
    };

    let (tape, out) = eval(points)?;
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    let mut work = points.to_vec();
    for (i, p) in points.iter().enumerate() {
        let analytic = grads.get(ParamId(i)).expect("registered param");
        for j in 0..p.len() {
            let orig = p.data()[j];
            work[i].data_mut()[j] = orig + S::of(epsilon);
            let (tp, op) = eval(&work)?;
            let plus = tp.value(op).item().as_f64();
            work[i].data_mut()[j] = orig - S::of(epsilon);
            let (tm, om) = eval(&work)?;
            let minus = tm.value(om).item().as_f64();
            work[i].data_mut()[j] = orig;
            let central = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(analytic.data()[j].as_f64(), central));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::new(vec![1, 2], vec![0.3f64, -0.7]).unwrap();
        let err = grad_check(
            |tape, x| {
                let c = tape.leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
                let _ = x;
                Ok(tape.scale(c, 1.0))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn quadratic_is_exact_to_roundoff() {
        // x^T x written as matmul of [1,n] with [n,1]
        let p = Tensor::new(vec![1, 4], vec![0.31f64, -1.2, 0.05, 2.4]).unwrap();
        let err = grad_check(
            |tape, x| {
                let xt = tape.reshape(x, &[4, 1])?;
                tape.matmul(x, xt)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}

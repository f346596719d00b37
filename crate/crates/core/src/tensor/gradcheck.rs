use super::{Tape, Tensor, Var};
use crate::error::Result;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of a scalar function of `theta` against
/// central differences `(f(θ + h e_k) − f(θ − h e_k)) / 2h` on every
/// coordinate and returns the worst relative error.
pub fn grad_check<F>(mut f: F, theta: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut param = theta.detached();
    param.requires_grad = true;

    let mut tape = Tape::new();
    let v = tape.param(&param);
    let loss = f(&mut tape, v)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .for_param(&param)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; param.numel()]);

    let mut eval = |p: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::inference();
        let v = tape.param(p);
        let out = f(&mut tape, v)?;
        tape.check_finite()?;
        tape.value(out).item()
    };

    let mut worst = 0.0f64;
    for k in 0..param.numel() {
        let orig = param.data()[k];
        param.data_mut()[k] = orig + h;
        let plus = eval(&param)?;
        param.data_mut()[k] = orig - h;
        let minus = eval(&param)?;
        param.data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic[k], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let theta = Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
        let coef = Tensor::from_f64(&[3], &[1.0, 2.0, -3.0]).unwrap();
        let err = grad_check(
            |tape, v| {
                let c = tape.constant(coef.clone());
                let p = tape.mul(v, c)?;
                Ok(tape.sum(p))
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let theta = Tensor::from_f64(&[2, 3], &[0.2, -0.4, 1.1, 0.0, 0.3, -0.9]).unwrap();
        let w = Tensor::from_f64(&[3, 4], &(0..12).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
        let err = grad_check(
            |tape, v| {
                let wv = tape.constant(w.clone());
                let logits = tape.matmul(v, wv)?;
                tape.soft_cross_entropy(logits, vec![0., 1., 0., 0., 0.2, 0.3, 0.5, 0.])
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}

use super::{Primitive, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central finite-difference derivative of `f` with respect to element
/// `index` of input `which`. Evaluates `f` on plain values only, so it
/// shares no code path with the tape's backward rules.
pub fn central_difference(
    f: impl Fn(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    which: usize,
    index: usize,
    eps: f64,
) -> Result<f64> {
    let mut probe = inputs.to_vec();
    let origin = probe[which].data()[index];
    probe[which].data_mut()[index] = origin + eps;
    let plus = f(&probe)?;
    probe[which].data_mut()[index] = origin - eps;
    let minus = f(&probe)?;
    Ok((plus - minus) / (2.0 * eps))
}

/// Compares tape gradients against central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    eps: f64,
    fault: Option<Primitive>,
}

impl GradCheck {
    pub fn new(eps: f64) -> Result<Self> {
        if !(1e-7..=1e-3).contains(&eps) {
            return Err(Error::Contract(format!(
                "finite-difference step {eps:e} outside [1e-7, 1e-3]"
            )));
        }
        Ok(GradCheck { eps, fault: None })
    }

    /// Runs the analytic side on a tape with a corrupted rule for `primitive`.
    pub fn with_fault(mut self, primitive: Option<Primitive>) -> Self {
        self.fault = primitive;
        self
    }

    fn tape(&self) -> Tape {
        match self.fault {
            Some(p) => Tape::with_fault(p),
            None => Tape::new(),
        }
    }

    /// Max over every coordinate of every learnable input of
    /// `|analytic − numeric| / max(1, |numeric|)`.
    pub fn max_relative_error<F>(&self, inputs: &[Tensor], f: F) -> Result<f64>
    where
        F: Fn(&Tape, &[Var]) -> Result<Var>,
    {
        let tape = self.tape();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Contract(format!(
                "gradient check needs a scalar function, got shape {:?}",
                tape.shape(out)
            )));
        }
        let grads = tape.backward(out)?;

        let evaluate = |probe: &[Tensor]| -> Result<f64> {
            let tape = Tape::new();
            let vars: Vec<Var> = probe.iter().map(|t| tape.leaf(t)).collect();
            let out = f(&tape, &vars)?;
            tape.scalar(out)
        };

        let mut worst = 0.0f64;
        for (which, (input, var)) in inputs.iter().zip(&vars).enumerate() {
            if !input.requires_grad() {
                continue;
            }
            let zeros = vec![0.0; input.numel()];
            let analytic = grads.get(*var).unwrap_or(&zeros);
            for (index, &a) in analytic.iter().enumerate() {
                let numeric = central_difference(&evaluate, inputs, which, index, self.eps)?;
                let err = (a - numeric).abs() / numeric.abs().max(1.0);
                if !err.is_finite() {
                    return Ok(f64::INFINITY);
                }
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }
}

/// Single-input form of [`GradCheck::max_relative_error`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let x = x.clone().learnable();
    GradCheck::new(eps)?.max_relative_error(std::slice::from_ref(&x), |tape, vars| f(tape, vars[0]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 4.0, 2.2, 0.0, -7.5]).unwrap();
        let err = grad_check(|t, x| Ok(t.sum(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sum_exp_matches_analytic() {
        let x = Tensor::from_vec(vec![0.0, 1.0]);
        let err = grad_check(|t, x| Ok(t.sum(t.exp(x))), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_step_outside_range() {
        assert!(GradCheck::new(1e-2).is_err());
        assert!(GradCheck::new(1e-9).is_err());
    }

    #[test]
    fn rejects_non_scalar_function() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(matches!(
            grad_check(|t, x| Ok(t.exp(x)), &x, 1e-5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fault_injection_is_detected() {
        let x = Tensor::from_vec(vec![-0.5, 0.7, 1.3]).learnable();
        let check = GradCheck::new(1e-6)
            .unwrap()
            .with_fault(Some(Primitive::Relu));
        let err = check
            .max_relative_error(std::slice::from_ref(&x), |t, v| Ok(t.sum(t.relu(v[0]))))
            .unwrap();
        assert!(err > 0.1, "{err}");
    }
}

use super::{Result, Tape, Tensor, TensorError, Var};

/// Central-difference step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-4;

/// Gradients whose magnitude is below this are compared absolutely
/// (relative error denominators never drop under it).
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input element with the largest error.
    pub worst_index: usize,
    /// Probed input elements; `analytic` and `numeric` follow this order.
    pub probed: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares the tape gradient of a scalar-valued `graph` with central finite
/// differences, one input element at a time.
///
/// `graph` receives a fresh tape and the input registered as a trainable leaf
/// and must return a one-element node. It may be called many times, so any
/// state it mutates (batch-norm running statistics, say) must not feed back
/// into the forward value.
pub fn gradient_check<F>(input: &Tensor<f64>, tolerance: f64, graph: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..input.len()).collect();
    gradient_check_at(input, &all, tolerance, graph)
}

/// [`gradient_check`] restricted to the listed input elements.
pub fn gradient_check_at<F>(input: &Tensor<f64>, indices: &[usize], tolerance: f64, mut graph: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    if let Some(&bad) = indices.iter().find(|&&i| i >= input.len()) {
        return Err(TensorError::Argument {
            op: "gradient_check",
            detail: format!("index {bad} out of range for {} elements", input.len()),
        });
    }
    let mut tape = Tape::new();
    let x = tape.param(input.clone());
    let y = graph(&mut tape, x)?;
    if tape.value(y).len() != 1 {
        return Err(TensorError::NonScalarOutput(tape.value(y).shape().to_vec()));
    }
    tape.backward(y)?;
    let full = tape.grad(x).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; input.len()]);
    let analytic: Vec<f64> = indices.iter().map(|&i| full[i]).collect();

    let mut eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.param(probe);
        let out = graph(&mut t, v)?;
        Ok(t.value(out).item())
    };
    let mut numeric = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut plus = input.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = input.clone();
        minus.data_mut()[i] -= FD_STEP;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * FD_STEP));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .enumerate()
        .fold((0, 0.0f64), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        max_rel_error,
        worst_index: indices.get(worst_index).copied().unwrap_or(0),
        probed: indices.to_vec(),
        analytic,
        numeric,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_graph_is_exact() {
        let x = Tensor::new(&[1], vec![0.7]).unwrap();
        let r = gradient_check(&x, 1e-9, |t, v| Ok(t.scale(v, 3.0))).unwrap();
        assert!((r.analytic[0] - 3.0).abs() < 1e-12);
        assert!(r.passed(), "{}", r.max_rel_error);
    }

    #[test]
    fn elu_scalar_graph() {
        for x0 in [-1.3, -0.2, 0.4, 2.0] {
            let x = Tensor::new(&[1], vec![x0]).unwrap();
            let r = gradient_check(&x, 1e-4, |t, v| Ok(t.elu(v, 1.0))).unwrap();
            assert!(r.passed(), "x={x0}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::new(&[2], vec![0.1, 0.2]).unwrap();
        let err = gradient_check(&x, 1e-4, |t, v| Ok(t.elu(v, 1.0))).unwrap_err();
        assert_eq!(err, TensorError::NonScalarOutput(vec![2]));
    }
}

use super::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam moments for an ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .unzip();
        Self {
            config,
            step_count: 0,
            m,
            v,
        }
    }

    /// One update over all parameters. Every gradient is checked before any
    /// parameter moves, so a non-finite gradient leaves the state untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::Argument {
                op: "adam_step",
                detail: format!(
                    "{} moment buffers, {} params, {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::Shape {
                    op: "adam_step",
                    detail: format!("param {:?}, grad {:?}", p.shape(), g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient(g.shape().to_vec()));
            }
        }
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let corr1 = T::one() / T::of(1.0 - c.beta1.powi(t));
        let corr2 = T::one() / T::of(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::of(c.learning_rate), T::of(c.epsilon));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let m_hat = *mv * corr1;
                let v_hat = *vv * corr2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Single-parameter convenience wrapper around [`AdamState::step`].
pub fn adam_step<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, state: &mut AdamState<T>) -> Result<()> {
    state.step(&mut [param], std::slice::from_ref(grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(shape: &[usize], lr: f64) -> AdamState<f64> {
        AdamState::new(AdamConfig::with_learning_rate(lr), [shape])
    }

    #[test]
    fn zero_gradient_is_a_no_op_on_params() {
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut s = state(&[3], 1e-3);
        adam_step(&mut p, &Tensor::zeros(&[3]), &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_sign() {
        let mut p = Tensor::new(&[3], vec![0.0, 0.0, 0.0]).unwrap();
        let g = Tensor::new(&[3], vec![0.3, -4.0, 1e-3]).unwrap();
        let mut s = state(&[3], 1e-2);
        adam_step(&mut p, &g, &mut s).unwrap();
        // m_hat = g, v_hat = g^2 at t = 1
        for (pv, gv) in p.data().iter().zip(g.data()) {
            let expected = -1e-2 * gv / (gv.abs() + 1e-8);
            assert!((pv - expected).abs() < 1e-15, "{pv} vs {expected}");
        }
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        let mut x = Tensor::new(&[1], vec![2.0]).unwrap();
        let mut s = state(&[1], 0.1);
        let mut prev = 0.5 * 4.0;
        for _ in 0..2 {
            let g = Tensor::new(&[1], vec![x.item()]).unwrap();
            adam_step(&mut x, &g, &mut s).unwrap();
            let loss = 0.5 * x.item() * x.item();
            assert!(loss < prev);
            prev = loss;
        }
        assert_eq!(s.step_count, 2);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut p = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        let mut s = state(&[2], 0.1);
        let g = Tensor::new(&[2], vec![f64::NAN, 1.0]).unwrap();
        assert!(matches!(adam_step(&mut p, &g, &mut s), Err(TensorError::NonFiniteGradient(_))));
        assert_eq!(p.data(), &[1.0, 1.0]);
        assert_eq!(s.step_count, 0);
        assert!(adam_step(&mut p, &Tensor::zeros(&[3]), &mut s).is_err());
    }

    #[test]
    fn second_moment_stays_non_negative() {
        let mut p = Tensor::new(&[4], vec![0.0; 4]).unwrap();
        let mut s = state(&[4], 1e-3);
        for k in 0..5 {
            let g = Tensor::new(&[4], vec![-1.0 * k as f64, 2.0, -3.0, 0.0]).unwrap();
            adam_step(&mut p, &g, &mut s).unwrap();
            assert!(s.v[0].data().iter().all(|&v| v >= 0.0));
        }
    }
}

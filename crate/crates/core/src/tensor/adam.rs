use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
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

/// First/second moment buffers for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first_moment: Vec<Vec<f64>> = params.into_iter().map(|p| vec![0.0; p.len()]).collect();
        let second_moment = first_moment.clone();
        Self {
            config,
            step: 0,
            first_moment,
            second_moment,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every parameter in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Argument(format!(
                "adam state tracks {} parameters, got {} parameters and {} gradients",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.first_moment[i].len() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);

        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(
            self.first_moment
                .iter_mut()
                .zip(self.second_moment.iter_mut()),
        ) {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = flush_subnormal(beta1 * *mi + (1.0 - beta1) * gi);
                *vi = flush_subnormal(beta2 * *vi + (1.0 - beta2) * gi * gi);
                let m_hat = *mi / correction1;
                let v_hat = *vi / correction2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Moments of parameters whose gradient stays zero decay geometrically and
/// would otherwise become subnormal, which is very slow on common CPUs. Their
/// contribution to an update is below `1e-300` either way.
fn flush_subnormal(x: f64) -> f64 {
    if x.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decayed_moments_flush_to_zero() {
        let mut params = vec![Tensor::vector(vec![0.5])];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        state
            .step(&mut params, &[Tensor::vector(vec![1.0])])
            .unwrap();
        for _ in 0..8000 {
            state.step(&mut params, &[Tensor::zeros([1])]).unwrap();
        }
        assert_eq!(state.first_moment[0][0], 0.0);
        assert!(state.second_moment[0][0].is_normal());
    }

    #[test]
    fn zero_gradient_leaves_params_and_advances_time() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        state.step(&mut params, &[Tensor::zeros([2])]).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1 at t = 1, so the step is lr / (1 + eps)
        let mut params = vec![Tensor::scalar(0.5)];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        state.step(&mut params, &[Tensor::scalar(1.0)]).unwrap();
        let expected = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((params[0].data()[0] - expected).abs() < 1e-15);
        assert!((0.5 - params[0].data()[0] - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn minimises_square() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new(AdamConfig::with_learning_rate(0.01), &params);
        for _ in 0..200 {
            let g = Tensor::scalar(2.0 * params[0].data()[0]);
            state.step(&mut params, &[g]).unwrap();
        }
        assert!(params[0].data()[0].abs() < 0.05, "{}", params[0].data()[0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![Tensor::zeros([3])];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        assert!(state.step(&mut params, &[Tensor::zeros([2])]).is_err());
    }
}

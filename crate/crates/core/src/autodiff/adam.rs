use super::param::Param;
use super::tensor::Tensor;
use crate::real::Real;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are matched to parameters by
/// position, so the parameter list order must be stable across steps.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Param<T>>) {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.second = self.first.clone();
        }
        assert_eq!(self.first.len(), params.len(), "parameter set changed");
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bias1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bias2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::of(c.lr), T::of(c.epsilon));
        for ((p, m), v) in params.into_iter().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let mj = &mut m.data_mut()[j];
                *mj = b1 * *mj + (T::one() - b1) * g[j];
                let vj = &mut v.data_mut()[j];
                *vj = b2 * *vj + (T::one() - b2) * g[j] * g[j];
                let mhat = *mj / bias1;
                let vhat = *vj / bias2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Param::new("w", Tensor::from_vec(&[2], vec![1.0f64, -1.0]).unwrap());
        p.grad = Tensor::from_vec(&[2], vec![0.5, -3.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(vec![&mut p]);
        assert!((p.value.data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p.value.data()[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Param::new("w", Tensor::from_vec(&[1], vec![3.0f64]).unwrap());
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        for _ in 0..500 {
            let w = p.value.data()[0];
            p.grad = Tensor::from_vec(&[1], vec![2.0 * (w - 1.0)]).unwrap();
            opt.step(vec![&mut p]);
        }
        assert!((p.value.data()[0] - 1.0).abs() < 1e-2);
    }
}

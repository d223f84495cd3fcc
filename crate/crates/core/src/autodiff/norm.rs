use super::param::{Module, Param};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the current batch statistics and update running stats.
    Train,
    /// Normalize with the running statistics.
    Eval,
    /// Pass the input through untouched (gradient checking).
    Identity,
}

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Per-channel normalization over every row of a `[.., C]` tensor, i.e. over
/// points for point features and over all cells for maps.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Weight of the previous running value in each update.
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: NormMode,
    cache: Option<NormCache<T>>,
    last_batch: Option<(Vec<T>, Vec<T>)>,
}

#[derive(Clone, Debug)]
struct NormCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
    mode: NormMode,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(
                format!("{name}.gamma"),
                Tensor::from_fn(&[channels], |_| T::one()),
            ),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
            mode: NormMode::Train,
            cache: None,
            last_batch: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Mean and biased variance of the most recent train-mode batch.
    pub fn last_batch_stats(&self) -> Option<(&[T], &[T])> {
        self.last_batch
            .as_ref()
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn update_running(&mut self, mean: &[T], var: &[T]) {
        let keep = T::of(self.momentum);
        let take = T::one() - keep;
        for c in 0..self.channels() {
            self.running_mean[c] = keep * self.running_mean[c] + take * mean[c];
            self.running_var[c] = keep * self.running_var[c] + take * var[c];
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c) = (x.rows(), x.cols());
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "batch_norm: {c} channels, layer has {}",
                self.channels()
            )));
        }
        if self.mode == NormMode::Identity {
            self.cache = Some(NormCache {
                normalized: Tensor::zeros(&[0]),
                inv_std: Vec::new(),
                mode: NormMode::Identity,
            });
            return Ok(x.clone());
        }
        let eps = T::of(self.epsilon);
        let (mean, inv_std) = match self.mode {
            NormMode::Train => {
                if n < 2 {
                    return Err(Error::Contract(format!(
                        "batch_norm in train mode needs at least 2 rows, got {n}"
                    )));
                }
                let nt = T::of(n as f64);
                let mut mean = vec![T::zero(); c];
                for r in 0..n {
                    for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= nt);
                let mut var = vec![T::zero(); c];
                for r in 0..n {
                    for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= nt);
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                self.update_running(&mean, &var);
                self.last_batch = Some((mean.clone(), var));
                (mean, inv)
            }
            NormMode::Eval => (
                self.running_mean.clone(),
                self.running_var
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect(),
            ),
            NormMode::Identity => unreachable!(),
        };
        let mut normalized = x.clone();
        let mut y = x.clone();
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for r in 0..n {
            let xr = normalized.row_mut(r);
            for ch in 0..c {
                xr[ch] = (xr[ch] - mean[ch]) * inv_std[ch];
            }
            let xr = normalized.row(r).to_vec();
            for (ch, out) in y.row_mut(r).iter_mut().enumerate() {
                *out = g[ch] * xr[ch] + b[ch];
            }
        }
        self.cache = Some(NormCache {
            normalized,
            inv_std,
            mode: self.mode,
        });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.as_ref().expect("BatchNorm::backward before forward");
        if cache.mode == NormMode::Identity {
            return dy.clone();
        }
        let (n, c) = (dy.rows(), dy.cols());
        let xhat = &cache.normalized;
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for r in 0..n {
            for ch in 0..c {
                let g = dy.row(r)[ch];
                dbeta[ch] += g;
                dgamma[ch] += g * xhat.row(r)[ch];
            }
        }
        let gamma = self.gamma.value.data();
        let mut dx = Tensor::zeros(dy.shape());
        match cache.mode {
            NormMode::Train => {
                let nt = T::of(n as f64);
                for r in 0..n {
                    let (gr, xr) = (dy.row(r), xhat.row(r));
                    let out = dx.row_mut(r);
                    for ch in 0..c {
                        out[ch] = gamma[ch] * cache.inv_std[ch] / nt
                            * (nt * gr[ch] - dbeta[ch] - xr[ch] * dgamma[ch]);
                    }
                }
            }
            NormMode::Eval => {
                for r in 0..n {
                    let gr = dy.row(r);
                    let out = dx.row_mut(r);
                    for ch in 0..c {
                        out[ch] = gamma[ch] * cache.inv_std[ch] * gr[ch];
                    }
                }
            }
            NormMode::Identity => unreachable!(),
        }
        for (acc, v) in self.gamma.grad.data_mut().iter_mut().zip(dgamma) {
            *acc += v;
        }
        for (acc, v) in self.beta.grad.data_mut().iter_mut().zip(dbeta) {
            *acc += v;
        }
        dx
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
    fn norms(&self) -> Vec<&BatchNorm<T>> {
        vec![self]
    }
    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        vec![self]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_mode_is_passthrough() {
        let mut bn = BatchNorm::<f64>::new("bn", 2);
        bn.mode = NormMode::Identity;
        let x = Tensor::from_fn(&[3, 2], |i| i as f64 * 1.5 - 2.0);
        assert_eq!(bn.forward(&x).unwrap(), x);
    }

    #[test]
    fn train_mode_matches_affine_targets() {
        let mut bn = BatchNorm::<f64>::new("bn", 2);
        bn.gamma.value = Tensor::from_vec(&[2], vec![2.0, 0.5]).unwrap();
        bn.beta.value = Tensor::from_vec(&[2], vec![-1.0, 3.0]).unwrap();
        // Large spread keeps var/(var+eps) within 1e-7 of one.
        let x = Tensor::from_fn(&[50, 2], |i| ((i * 37 % 101) as f64) * 10.0 - 300.0);
        let y = bn.forward(&x).unwrap();
        for ch in 0..2 {
            let col: Vec<f64> = (0..50).map(|r| y.row(r)[ch]).collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
            let (g, b) = (bn.gamma.value.data()[ch], bn.beta.value.data()[ch]);
            assert!((mean - b).abs() < 1e-6);
            assert!((var - g * g).abs() < 1e-6);
        }
    }

    #[test]
    fn train_mode_needs_two_rows() {
        let mut bn = BatchNorm::<f64>::new("bn", 1);
        assert!(bn.forward(&Tensor::zeros(&[1, 1])).is_err());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut bn = BatchNorm::<f64>::new("bn", 1);
        let x = Tensor::from_vec(&[2, 1], vec![1.0, 3.0]).unwrap();
        bn.forward(&x).unwrap();
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var[0] - (0.9 + 0.1)).abs() < 1e-12);
        assert!(bn.running_var.iter().all(|&v| v >= 0.0));
    }
}

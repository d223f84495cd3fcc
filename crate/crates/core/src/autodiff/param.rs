use super::norm::{BatchNorm, NormMode};
use super::tensor::Tensor;
use crate::real::Real;

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Anything owning parameters and normalization layers.
///
/// Layers cache their forward activations internally, so one instance serves
/// one forward/backward pair at a time; parallel workers operate on clones
/// and are folded back with [`Module::absorb`].
pub trait Module<T: Real> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn norms(&self) -> Vec<&BatchNorm<T>> {
        Vec::new()
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn set_norm_mode(&mut self, mode: NormMode) {
        for n in self.norms_mut() {
            n.mode = mode;
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Adds `worker`'s gradients into `self` and replays its batch statistics
    /// into `self`'s running estimates. `worker` must be a clone of `self`.
    fn absorb(&mut self, worker: &Self)
    where
        Self: Sized,
    {
        for (dst, src) in self.params_mut().into_iter().zip(worker.params()) {
            dst.grad.add_assign(&src.grad);
        }
        for (dst, src) in self.norms_mut().into_iter().zip(worker.norms()) {
            if let Some((mean, var)) = src.last_batch_stats() {
                dst.update_running(mean, var);
            }
        }
    }
}

use super::norm::BatchNorm;
use super::ops::{relu_backward, relu_forward, Linear};
use super::param::{Module, Param};
use super::tensor::Tensor;
use crate::error::Result;
use crate::real::Real;

#[derive(Clone, Debug, Default)]
pub struct Relu<T> {
    output: Option<Tensor<T>>,
}

impl<T: Real> Relu<T> {
    pub fn new() -> Self {
        Self { output: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = relu_forward(x);
        self.output = Some(y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        relu_backward(self.output.as_ref().expect("Relu::backward before forward"), dy)
    }
}

/// Linear -> optional batch norm -> ReLU.
#[derive(Clone, Debug)]
pub struct Dense<T> {
    pub linear: Linear<T>,
    pub norm: Option<BatchNorm<T>>,
    relu: Relu<T>,
}

impl<T: Real> Dense<T> {
    pub fn new(linear: Linear<T>, norm: Option<BatchNorm<T>>) -> Self {
        Self {
            linear,
            norm,
            relu: Relu::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = self.linear.forward(x)?;
        if let Some(n) = self.norm.as_mut() {
            y = n.forward(&y)?;
        }
        Ok(self.relu.forward(&y))
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = self.relu.backward(dy);
        if let Some(n) = self.norm.as_mut() {
            g = n.backward(&g);
        }
        self.linear.backward(&g)
    }
}

impl<T: Real> Module<T> for Dense<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.linear.params();
        if let Some(n) = &self.norm {
            v.extend(n.params());
        }
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.linear.params_mut();
        if let Some(n) = &mut self.norm {
            v.extend(n.params_mut());
        }
        v
    }
    fn norms(&self) -> Vec<&BatchNorm<T>> {
        self.norm.iter().collect()
    }
    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        self.norm.iter_mut().collect()
    }
}

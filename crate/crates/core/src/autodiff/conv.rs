//! Same-padded 2D convolution on `[H, W, C]` maps via im2col + GEMM.

use super::ops::map_dims;
use super::param::{Module, Param};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::{matmul, Real};

fn kernel_dims<T: Real>(kernel: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match kernel.shape() {
        &[k, k2, cin, cout] if k == k2 && k % 2 == 1 => Ok((k, cin, cout)),
        s => Err(Error::Shape(format!(
            "conv2d kernel must be [k, k, C_in, C_out] with odd k, got {s:?}"
        ))),
    }
}

fn output_dims(h: usize, w: usize, stride: usize) -> Result<(usize, usize)> {
    if stride != 1 && stride != 2 {
        return Err(Error::Contract(format!("conv2d stride must be 1 or 2, got {stride}")));
    }
    if !h.is_multiple_of(stride) || !w.is_multiple_of(stride) {
        return Err(Error::Shape(format!(
            "conv2d: spatial dims {h}x{w} not divisible by stride {stride}"
        )));
    }
    Ok((h / stride, w / stride))
}

fn im2col<T: Real>(x: &Tensor<T>, k: usize, stride: usize, ho: usize, wo: usize) -> Tensor<T> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let pad = (k / 2) as isize;
    let width = k * k * c;
    let mut cols = Tensor::zeros(&[ho * wo, width]);
    for oy in 0..ho {
        for ox in 0..wo {
            let row = cols.row_mut(oy * wo + ox);
            for ky in 0..k {
                let iy = (oy * stride) as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride) as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = (ky * k + kx) * c;
                    row[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(
    cols: &Tensor<T>,
    (h, w, c): (usize, usize, usize),
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Tensor<T> {
    let pad = (k / 2) as isize;
    let mut dx = Tensor::zeros(&[h, w, c]);
    for oy in 0..ho {
        for ox in 0..wo {
            let row = cols.row(oy * wo + ox);
            for ky in 0..k {
                let iy = (oy * stride) as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride) as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = (ky * k + kx) * c;
                    for (a, &g) in dx.data_mut()[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                        *a += g;
                    }
                }
            }
        }
    }
    dx
}

/// Forward pass; returns the output map and the im2col buffer for the VJP.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w, c) = map_dims(x)?;
    let (k, cin, cout) = kernel_dims(kernel)?;
    if cin != c {
        return Err(Error::Shape(format!(
            "conv2d: input has {c} channels, kernel expects {cin}"
        )));
    }
    let (ho, wo) = output_dims(h, w, stride)?;
    let cols = im2col(x, k, stride, ho, wo);
    let mut y = Tensor::zeros(&[ho, wo, cout]);
    if let Some(b) = bias {
        for r in 0..ho * wo {
            y.row_mut(r).copy_from_slice(b.data());
        }
    }
    matmul(
        ho * wo,
        k * k * c,
        cout,
        cols.data(),
        false,
        kernel.data(),
        false,
        y.data_mut(),
        bias.is_some(),
    );
    Ok((y, cols))
}

/// Returns `(dx, dkernel, dbias)`.
pub fn conv2d_backward<T: Real>(
    cols: &Tensor<T>,
    input_shape: (usize, usize, usize),
    kernel: &Tensor<T>,
    stride: usize,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let k = kernel.shape()[0];
    let cout = kernel.shape()[3];
    let (ho, wo) = (dy.shape()[0], dy.shape()[1]);
    let width = cols.cols();
    let mut dk = Tensor::zeros(kernel.shape());
    matmul(width, ho * wo, cout, cols.data(), true, dy.data(), false, dk.data_mut(), false);
    let mut dcols = Tensor::zeros(&[ho * wo, width]);
    matmul(ho * wo, cout, width, dy.data(), false, kernel.data(), true, dcols.data_mut(), false);
    let dx = col2im(&dcols, input_shape, k, stride, ho, wo);
    let mut db = Tensor::zeros(&[cout]);
    for r in 0..ho * wo {
        for (a, &g) in db.data_mut().iter_mut().zip(dy.row(r)) {
            *a += g;
        }
    }
    (dx, dk, db)
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub kernel: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    cache: Option<(Tensor<T>, (usize, usize, usize))>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(name: &str, kernel: Tensor<T>, bias: Option<Tensor<T>>, stride: usize) -> Self {
        Self {
            kernel: Param::new(format!("{name}.kernel"), kernel),
            bias: bias.map(|b| Param::new(format!("{name}.bias"), b)),
            stride,
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.value.shape()[3]
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = map_dims(x)?;
        let (y, cols) = conv2d_forward(
            x,
            &self.kernel.value,
            self.bias.as_ref().map(|b| &b.value),
            self.stride,
        )?;
        self.cache = Some((cols, dims));
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (cols, dims) = self.cache.as_ref().expect("Conv2d::backward before forward");
        let (dx, dk, db) = conv2d_backward(cols, *dims, &self.kernel.value, self.stride, dy);
        self.kernel.grad.add_assign(&dk);
        if let Some(b) = self.bias.as_mut() {
            b.grad.add_assign(&db);
        }
        dx
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.kernel];
        v.extend(self.bias.as_ref());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.kernel];
        v.extend(self.bias.as_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(x: &Tensor<f64>, kernel: &Tensor<f64>, stride: usize) -> Tensor<f64> {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (k, cout) = (kernel.shape()[0], kernel.shape()[3]);
        let pad = (k / 2) as isize;
        let (ho, wo) = (h / stride, w / stride);
        let mut y = Tensor::zeros(&[ho, wo, cout]);
        for oy in 0..ho {
            for ox in 0..wo {
                for o in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride) as isize + ky as isize - pad;
                            let ix = (ox * stride) as isize + kx as isize - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..c {
                                acc += x.data()[(iy as usize * w + ix as usize) * c + ci]
                                    * kernel.data()[((ky * k + kx) * c + ci) * cout + o];
                            }
                        }
                    }
                    y.data_mut()[(oy * wo + ox) * cout + o] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn identity_1x1_kernel() {
        let x = Tensor::from_fn(&[4, 4, 2], |i| (i as f64).sin());
        let kernel = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (y, _) = conv2d_forward(&x, &kernel, None, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn stride_two_halves_dims() {
        let x = Tensor::<f32>::zeros(&[80, 80, 1]);
        let kernel = Tensor::zeros(&[3, 3, 1, 1]);
        let (y, _) = conv2d_forward(&x, &kernel, None, 2).unwrap();
        assert_eq!(y.shape(), &[40, 40, 1]);
    }

    #[test]
    fn indivisible_dims_rejected() {
        let x = Tensor::<f64>::zeros(&[5, 4, 1]);
        let kernel = Tensor::zeros(&[3, 3, 1, 1]);
        assert!(conv2d_forward(&x, &kernel, None, 2).is_err());
    }

    #[test]
    fn matches_naive_loops() {
        let x = Tensor::from_fn(&[6, 4, 3], |i| ((i * 7919) % 23) as f64 / 7.0 - 1.5);
        let kernel = Tensor::from_fn(&[3, 3, 3, 2], |i| ((i * 104729) % 17) as f64 / 5.0 - 1.7);
        for stride in [1, 2] {
            let (y, _) = conv2d_forward(&x, &kernel, None, stride).unwrap();
            let want = naive_conv(&x, &kernel, stride);
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

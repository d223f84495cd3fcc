//! Primitive differentiable ops as forward/VJP function pairs, plus thin
//! layer wrappers that cache what their backward pass needs.

use std::cell::Cell;

use super::param::{Module, Param};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::{matmul, Real};

/// `y = x W + b` for `x: [N, F_in]`, `W: [F_in, F_out]`, `b: [F_out]`.
pub fn linear_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, fin) = (x.rows(), x.cols());
    if w.shape().len() != 2 || w.shape()[0] != fin || b.len() != w.shape()[1] {
        return Err(Error::Shape(format!(
            "linear: x {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let fout = w.shape()[1];
    let mut y = Tensor::zeros(&[n, fout]);
    for r in 0..n {
        y.row_mut(r).copy_from_slice(b.data());
    }
    matmul(n, fin, fout, x.data(), false, w.data(), false, y.data_mut(), true);
    Ok(y)
}

/// Returns `(dx, dW, db)`.
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, fin) = (x.rows(), x.cols());
    let fout = w.shape()[1];
    let mut dx = Tensor::zeros(&[n, fin]);
    matmul(n, fout, fin, dy.data(), false, w.data(), true, dx.data_mut(), false);
    let mut dw = Tensor::zeros(&[fin, fout]);
    matmul(fin, n, fout, x.data(), true, dy.data(), false, dw.data_mut(), false);
    let mut db = Tensor::zeros(&[fout]);
    for r in 0..n {
        for (acc, &g) in db.data_mut().iter_mut().zip(dy.row(r)) {
            *acc += g;
        }
    }
    (dx, dw, db)
}

thread_local! {
    static PATTERN: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` and returns a hash of every ReLU on/off decision and every
/// segment-max winner taken on this thread meanwhile. Two evaluations with
/// equal hashes ran on the same smooth piece of a piecewise-linear network.
pub fn activation_pattern<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let outer = PATTERN.with(|p| p.replace(Some(0xcbf2_9ce4_8422_2325)));
    let r = f();
    let hash = PATTERN.with(|p| p.replace(outer)).unwrap_or(0);
    (r, hash)
}

fn record(words: impl Iterator<Item = u64>) {
    PATTERN.with(|p| {
        if let Some(mut h) = p.get() {
            for w in words {
                h = (h ^ w).wrapping_mul(0x0000_0100_0000_01b3);
            }
            p.set(Some(h));
        }
    });
}

fn recording() -> bool {
    PATTERN.with(|p| p.get().is_some())
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    if recording() {
        record(x.data().iter().map(|&v| u64::from(v > T::zero())));
    }
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// VJP given the forward output `y`; the subgradient at 0 is 0.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    dx
}

/// Result of [`segment_max_forward`]: pooled rows and the winning input row
/// per (segment, channel), `None` for empty segments.
#[derive(Clone, Debug)]
pub struct SegmentMax<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<Option<usize>>,
}

/// Per-segment elementwise max. Empty segments produce zero rows; ties go
/// to the lowest input index.
pub fn segment_max_forward<T: Real>(
    x: &Tensor<T>,
    segment_ids: &[usize],
    segments: usize,
) -> Result<SegmentMax<T>> {
    let (n, f) = (x.rows(), x.cols());
    if segment_ids.len() != n {
        return Err(Error::Shape(format!(
            "segment_max: {} ids for {n} rows",
            segment_ids.len()
        )));
    }
    let mut argmax: Vec<Option<usize>> = vec![None; segments * f];
    for (i, &s) in segment_ids.iter().enumerate() {
        if s >= segments {
            return Err(Error::Contract(format!(
                "segment id {s} out of range for {segments} segments"
            )));
        }
        let row = x.row(i);
        for c in 0..f {
            let slot = &mut argmax[s * f + c];
            match *slot {
                Some(j) if x.row(j)[c] >= row[c] => {}
                _ => *slot = Some(i),
            }
        }
    }
    if recording() {
        record(argmax.iter().map(|a| a.map_or(u64::MAX, |i| i as u64)));
    }
    let mut output = Tensor::zeros(&[segments, f]);
    for (idx, a) in argmax.iter().enumerate() {
        if let Some(i) = a {
            output.data_mut()[idx] = x.data()[i * f + idx % f];
        }
    }
    Ok(SegmentMax { output, argmax })
}

pub fn segment_max_backward<T: Real>(
    argmax: &[Option<usize>],
    input_rows: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let f = dy.cols();
    let mut dx = Tensor::zeros(&[input_rows, f]);
    for (idx, a) in argmax.iter().enumerate() {
        if let Some(i) = a {
            dx.data_mut()[i * f + idx % f] += dy.data()[idx];
        }
    }
    dx
}

/// Concatenates along the last axis; all leading axes must agree.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
        return Err(Error::Shape(format!("concat_channels: {sa:?} vs {sb:?}")));
    }
    let (ca, cb) = (a.cols(), b.cols());
    let mut shape = sa.to_vec();
    *shape.last_mut().unwrap() = ca + cb;
    let mut out = Tensor::zeros(&shape);
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        row[..ca].copy_from_slice(a.row(r));
        row[ca..].copy_from_slice(b.row(r));
    }
    Ok(out)
}

/// Channels `[start, start + width)` of `x`; VJP of [`concat_channels`].
pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, width: usize) -> Tensor<T> {
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = width;
    let mut out = Tensor::zeros(&shape);
    for r in 0..x.rows() {
        out.row_mut(r)
            .copy_from_slice(&x.row(r)[start..start + width]);
    }
    out
}

/// Nearest-neighbour 2x upsampling of an `[H, W, C]` map.
pub fn upsample2x_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = map_dims(x)?;
    let mut y = Tensor::zeros(&[2 * h, 2 * w, c]);
    for oy in 0..2 * h {
        for ox in 0..2 * w {
            let src = (oy / 2) * w + ox / 2;
            y.row_mut(oy * 2 * w + ox).copy_from_slice(x.row(src));
        }
    }
    Ok(y)
}

pub fn upsample2x_backward<T: Real>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (h2, w2, c) = map_dims(dy)?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[h, w, c]);
    for oy in 0..h2 {
        for ox in 0..w2 {
            let dst = (oy / 2) * w + ox / 2;
            let src = dy.row(oy * w2 + ox).to_vec();
            for (a, g) in dx.row_mut(dst).iter_mut().zip(src) {
                *a += g;
            }
        }
    }
    Ok(dx)
}

pub(crate) fn map_dims<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::Shape(format!("expected [H, W, C] map, got {s:?}"))),
    }
}

/// Fully connected layer.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, weight: Tensor<T>, bias: Tensor<T>) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), bias),
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = linear_forward(x, &self.weight.value, &self.bias.value)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.as_ref().expect("Linear::backward before forward");
        let (dx, dw, db) = linear_backward(x, &self.weight.value, dy);
        self.weight.grad.add_assign(&dw);
        self.bias.grad.add_assign(&db);
        dx
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

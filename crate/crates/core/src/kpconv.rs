//! Rigid kernel point convolution in the BEV plane.
//!
//! An output point `x_a` aggregates its neighbors `x_i` as
//! `f_a = sum_i f_i sum_k h(x_k, x_i - x_a) W_k` with the linear correlation
//! `h(x_k, y) = max(0, 1 - |x_k - y| / rho_k)` and `rho_k = rho / 2.5`. Input
//! and output point sets may differ (anchors) or coincide (point-to-point).

use std::f64::consts::PI;

use serde::Serialize;

use crate::autodiff::{Module, Param, Tensor};
use crate::error::{Error, Result};
use crate::geom::NeighborLists;
use crate::real::{matmul, Real};

/// Ratio between the neighborhood radius and the kernel influence radius.
pub const RADIUS_TO_INFLUENCE: f64 = 2.5;

#[derive(Clone, Debug, PartialEq)]
pub struct KernelLayout {
    /// Kernel point offsets relative to the output point.
    pub points: Vec<[f64; 2]>,
    pub influence_radius: f64,
    pub radius: f64,
}

impl KernelLayout {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One kernel point at the origin, plus `K - 1` equally spaced points on the
/// circle of radius `rho / 2` starting on the +x axis.
pub fn make_layout(num_points: usize, radius: f64) -> Result<KernelLayout> {
    if num_points == 0 {
        return Err(Error::Config("kernel needs at least one point".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::Config(format!("kernel radius must be positive, got {radius}")));
    }
    let ring = num_points - 1;
    let mut points = vec![[0.0, 0.0]];
    for j in 0..ring {
        let angle = 2.0 * PI * j as f64 / ring as f64;
        points.push([0.5 * radius * angle.cos(), 0.5 * radius * angle.sin()]);
    }
    Ok(KernelLayout {
        points,
        influence_radius: radius / RADIUS_TO_INFLUENCE,
        radius,
    })
}

/// Linear correlation `max(0, 1 - |x_k - y| / rho_k)`.
#[inline]
pub fn correlation(kernel_point: [f64; 2], y: [f64; 2], influence_radius: f64) -> f64 {
    let d = (kernel_point[0] - y[0]).hypot(kernel_point[1] - y[1]);
    (1.0 - d / influence_radius).max(0.0)
}

/// Output-point counts of one rendering in anchor mode vs point mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ConvolutionCounts {
    pub anchor_mode: usize,
    pub point_mode: usize,
}

impl ConvolutionCounts {
    pub fn new(anchors: usize, points: usize) -> Self {
        Self {
            anchor_mode: convolution_count(anchors),
            point_mode: convolution_count(points),
        }
    }

    /// Fraction of convolution evaluations saved by anchor mode.
    pub fn reduction(&self) -> f64 {
        if self.point_mode == 0 {
            0.0
        } else {
            1.0 - self.anchor_mode as f64 / self.point_mode as f64
        }
    }
}

/// One kernel evaluation per output point.
pub fn convolution_count(output_points: usize) -> usize {
    output_points
}

#[derive(Clone, Debug)]
struct KpCache<T> {
    gathered: Tensor<T>,
    /// `(output row, input row, kernel index, h)` for every nonzero weight.
    taps: Vec<(u32, u32, u16, T)>,
    inputs: usize,
    in_features: usize,
}

/// KPConv with weights `W: [K, F_in, F_out]`.
#[derive(Clone, Debug)]
pub struct KpConv<T> {
    pub layout: KernelLayout,
    pub weights: Param<T>,
    cache: Option<KpCache<T>>,
}

impl<T: Real> KpConv<T> {
    pub fn new(name: &str, layout: KernelLayout, weights: Tensor<T>) -> Result<Self> {
        match weights.shape() {
            &[k, _, _] if k == layout.len() => {}
            s => {
                return Err(Error::Shape(format!(
                    "kpconv weights {s:?} do not match {} kernel points",
                    layout.len()
                )))
            }
        }
        Ok(Self {
            layout,
            weights: Param::new(format!("{name}.weights"), weights),
            cache: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weights.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weights.value.shape()[2]
    }

    pub fn forward(
        &mut self,
        out_points: &[[f64; 2]],
        in_points: &[[f64; 2]],
        in_features: &Tensor<T>,
        neighbors: &NeighborLists,
    ) -> Result<Tensor<T>> {
        let (k, fin, fout) = (self.layout.len(), self.in_features(), self.out_features());
        if (neighbors.radius - self.layout.radius).abs() > 1e-12 * self.layout.radius {
            return Err(Error::Contract(format!(
                "neighbors searched with radius {}, kernel expects {}",
                neighbors.radius, self.layout.radius
            )));
        }
        if neighbors.len() != out_points.len() {
            return Err(Error::Shape(format!(
                "{} neighbor lists for {} output points",
                neighbors.len(),
                out_points.len()
            )));
        }
        if in_features.rows() != in_points.len() || in_features.cols() != fin {
            return Err(Error::Shape(format!(
                "kpconv input features {:?} for {} points and {fin} channels",
                in_features.shape(),
                in_points.len()
            )));
        }
        let m = out_points.len();
        let rho_k = self.layout.influence_radius;
        let mut gathered = Tensor::zeros(&[m, k * fin]);
        let mut taps = Vec::new();
        for (a, list) in neighbors.lists.iter().enumerate() {
            let xa = out_points[a];
            let row = gathered.row_mut(a);
            for &i in list {
                let xi = in_points[i];
                let y = [xi[0] - xa[0], xi[1] - xa[1]];
                let f = in_features.row(i);
                for (kk, &xk) in self.layout.points.iter().enumerate() {
                    let h = correlation(xk, y, rho_k);
                    if h > 0.0 {
                        let h = T::of(h);
                        for (acc, &v) in row[kk * fin..(kk + 1) * fin].iter_mut().zip(f) {
                            *acc += h * v;
                        }
                        taps.push((a as u32, i as u32, kk as u16, h));
                    }
                }
            }
        }
        let mut out = Tensor::zeros(&[m, fout]);
        matmul(
            m,
            k * fin,
            fout,
            gathered.data(),
            false,
            self.weights.value.data(),
            false,
            out.data_mut(),
            false,
        );
        self.cache = Some(KpCache {
            gathered,
            taps,
            inputs: in_points.len(),
            in_features: fin,
        });
        Ok(out)
    }

    /// Accumulates `dW` and returns the gradient w.r.t. the input features.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let c = self.cache.as_ref().expect("KpConv::backward before forward");
        let (k, fin, fout) = (self.layout.len(), c.in_features, self.out_features());
        let m = dy.rows();
        let mut dw = Tensor::zeros(self.weights.value.shape());
        matmul(k * fin, m, fout, c.gathered.data(), true, dy.data(), false, dw.data_mut(), false);
        self.weights.grad.add_assign(&dw);
        let mut dg = Tensor::zeros(&[m, k * fin]);
        matmul(m, fout, k * fin, dy.data(), false, self.weights.value.data(), true, dg.data_mut(), false);
        let mut dx = Tensor::zeros(&[c.inputs, fin]);
        for &(a, i, kk, h) in &c.taps {
            let src = &dg.row(a as usize)[kk as usize * fin..(kk as usize + 1) * fin];
            for (acc, &g) in dx.row_mut(i as usize).iter_mut().zip(src) {
                *acc += h * g;
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for KpConv<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weights]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weights]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::radius_neighbors;

    #[test]
    fn single_point_layout() {
        let l = make_layout(1, 1.5).unwrap();
        assert_eq!(l.points, vec![[0.0, 0.0]]);
        assert!((l.influence_radius - 0.6).abs() < 1e-15);
    }

    #[test]
    fn nine_point_layout_is_center_plus_octagon() {
        let l = make_layout(9, 2.0).unwrap();
        assert_eq!(l.len(), 9);
        assert_eq!(l.points[0], [0.0, 0.0]);
        assert_eq!(l.points[1], [1.0, 0.0]);
        for w in l.points[1..].windows(2) {
            assert!((w[0][0].hypot(w[0][1]) - 1.0).abs() < 1e-15);
            let gap = (w[0][0] - w[1][0]).hypot(w[0][1] - w[1][1]);
            assert!((gap - 2.0 * (PI / 8.0).sin()).abs() < 1e-12);
        }
        assert!(l.points.iter().all(|p| p[0].hypot(p[1]) <= l.radius));
        assert_eq!(l, make_layout(9, 2.0).unwrap());
    }

    #[test]
    fn zero_kernel_points_rejected() {
        assert!(make_layout(0, 1.0).is_err());
    }

    #[test]
    fn correlation_values() {
        assert_eq!(correlation([0.3, 0.2], [0.3, 0.2], 0.6), 1.0);
        assert_eq!(correlation([0.0, 0.0], [0.6, 0.0], 0.6), 0.0);
        assert_eq!(correlation([0.0, 0.0], [0.0, 0.9], 0.6), 0.0);
        assert!((correlation([0.0, 0.0], [0.3, 0.0], 0.6) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identity_kernel_copies_single_neighbor() {
        let layout = make_layout(1, 1.0).unwrap();
        let w = Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut conv = KpConv::<f64>::new("kp", layout, w).unwrap();
        let pts = [[0.5, 0.5]];
        let f = Tensor::from_vec(&[1, 2], vec![3.0, -4.0]).unwrap();
        let n = radius_neighbors(&pts, &pts, 1.0);
        let out = conv.forward(&pts, &pts, &f, &n).unwrap();
        assert_eq!(out.data(), &[3.0, -4.0]);
    }

    #[test]
    fn empty_neighborhood_is_zero_row() {
        let layout = make_layout(3, 1.0).unwrap();
        let mut conv = KpConv::<f64>::new("kp", layout, Tensor::from_fn(&[3, 1, 2], |_| 1.0)).unwrap();
        let inputs = [[10.0, 10.0]];
        let outputs = [[0.0, 0.0]];
        let n = radius_neighbors(&outputs, &inputs, 1.0);
        let out = conv
            .forward(&outputs, &inputs, &Tensor::from_vec(&[1, 1], vec![2.0]).unwrap(), &n)
            .unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn radius_mismatch_rejected() {
        let layout = make_layout(1, 1.0).unwrap();
        let mut conv = KpConv::<f64>::new("kp", layout, Tensor::zeros(&[1, 1, 1])).unwrap();
        let pts = [[0.0, 0.0]];
        let n = radius_neighbors(&pts, &pts, 2.0);
        let err = conv.forward(&pts, &pts, &Tensor::zeros(&[1, 1]), &n);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn counts_and_reduction() {
        let c = ConvolutionCounts::new(62, 100);
        assert_eq!((c.anchor_mode, c.point_mode), (62, 100));
        assert!((c.reduction() - 0.38).abs() < 1e-12);
        assert_eq!(ConvolutionCounts::new(0, 0).reduction(), 0.0);
    }
}

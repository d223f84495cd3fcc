use super::EncoderConfig;
use crate::autodiff::init::kaiming_uniform;
use crate::autodiff::ops::{concat_channels, slice_channels};
use crate::autodiff::{BatchNorm, Module, Param, Relu, Tensor};
use crate::error::{Error, Result};
use crate::geom::{radius_neighbors, PointCloud};
use crate::kpconv::{make_layout, KpConv, RADIUS_TO_INFLUENCE};
use crate::real::Real;
use crate::rng::Rng;

/// Raw sensor channels (`vr, rcs, dt`: the last three input columns) carried
/// next to the learned features.
pub const PASSTHROUGH_CHANNELS: usize = 3;
pub const PREPROCESS_LAYERS: usize = 3;

#[derive(Clone, Debug)]
struct Layer<T> {
    conv: KpConv<T>,
    norm: Option<BatchNorm<T>>,
    relu: Relu<T>,
}

/// Three point-to-point KPConv layers, each with batch norm and ReLU.
/// Output rows are `[learned F_out || vr, rcs, dt]`.
#[derive(Clone, Debug)]
pub struct KpConvStack<T> {
    layers: Vec<Layer<T>>,
    input_width: Option<usize>,
}

impl<T: Real> KpConvStack<T> {
    /// `cfg.rho_k` is the preprocessing influence radius.
    pub fn new(name: &str, in_features: usize, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        if in_features < PASSTHROUGH_CHANNELS {
            return Err(Error::Config(format!(
                "preprocessing needs at least {PASSTHROUGH_CHANNELS} input channels"
            )));
        }
        let layout = make_layout(cfg.kernel_points, RADIUS_TO_INFLUENCE * cfg.rho_k)?;
        let k = layout.len();
        let mut layers = Vec::with_capacity(PREPROCESS_LAYERS);
        let mut fin = in_features;
        for l in 0..PREPROCESS_LAYERS {
            let conv = KpConv::new(
                &format!("{name}.kpconv{l}"),
                layout.clone(),
                kaiming_uniform(&[k, fin, cfg.f_out], k * fin, rng),
            )?;
            layers.push(Layer {
                conv,
                norm: cfg
                    .use_batch_norm
                    .then(|| BatchNorm::new(&format!("{name}.bn{l}"), cfg.f_out)),
                relu: Relu::new(),
            });
            fin = cfg.f_out;
        }
        Ok(Self {
            layers,
            input_width: None,
        })
    }

    pub fn learned_features(&self) -> usize {
        self.layers[0].conv.out_features()
    }

    pub fn out_features(&self) -> usize {
        self.learned_features() + PASSTHROUGH_CHANNELS
    }

    pub fn radius(&self) -> f64 {
        self.layers[0].conv.layout.radius
    }

    pub fn forward(&mut self, positions: &[[f64; 2]], features: &Tensor<T>) -> Result<Tensor<T>> {
        let neighbors = radius_neighbors(positions, positions, self.radius());
        let mut x = features.clone();
        for layer in &mut self.layers {
            x = layer.conv.forward(positions, positions, &x, &neighbors)?;
            if let Some(n) = layer.norm.as_mut() {
                x = n.forward(&x)?;
            }
            x = layer.relu.forward(&x);
        }
        let width = features.cols();
        self.input_width = Some(width);
        let raw = slice_channels(features, width - PASSTHROUGH_CHANNELS, PASSTHROUGH_CHANNELS);
        concat_channels(&x, &raw)
    }

    /// Returns the gradient w.r.t. the input features.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let width = self.input_width.expect("KpConvStack::backward before forward");
        let learned = self.learned_features();
        let mut g = slice_channels(dy, 0, learned);
        for layer in self.layers.iter_mut().rev() {
            g = layer.relu.backward(&g);
            if let Some(n) = layer.norm.as_mut() {
                g = n.backward(&g);
            }
            g = layer.conv.backward(&g);
        }
        let raw_grad = slice_channels(dy, learned, PASSTHROUGH_CHANNELS);
        for r in 0..g.rows() {
            let row = g.row_mut(r);
            for (dst, &v) in row[width - PASSTHROUGH_CHANNELS..].iter_mut().zip(raw_grad.row(r)) {
                *dst += v;
            }
        }
        g
    }

    /// Inference helper: the same positions carrying the new features.
    pub fn preprocess(&mut self, pc: &PointCloud) -> Result<PointCloud> {
        let out = self.forward(pc.positions(), &pc.features_tensor::<T>())?;
        let width = out.cols();
        pc.with_features(out.data().iter().map(|v| v.as_f64()).collect(), width)
    }
}

impl<T: Real> Module<T> for KpConvStack<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend(l.conv.params());
            if let Some(n) = &l.norm {
                v.extend(n.params());
            }
        }
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.extend(l.conv.params_mut());
            if let Some(n) = &mut l.norm {
                v.extend(n.params_mut());
            }
        }
        v
    }
    fn norms(&self) -> Vec<&BatchNorm<T>> {
        self.layers.iter().filter_map(|l| l.norm.as_ref()).collect()
    }
    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        self.layers.iter_mut().filter_map(|l| l.norm.as_mut()).collect()
    }
}

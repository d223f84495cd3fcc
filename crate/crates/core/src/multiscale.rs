//! Rendering the point cloud once per backbone scale.
//!
//! The backbone halves the map at every stage, so the point cloud is
//! rendered directly at `s0, 2 s0, 4 s0, 8 s0` with a separately weighted
//! encoder per scale, and each map is concatenated onto the matching stage.

use crate::autodiff::ops::{concat_channels, slice_channels};
use crate::autodiff::{BatchNorm, Module, Param, Tensor};
use crate::encoders::{Encoder, EncoderConfig, EncoderKind, FeatureMap};
use crate::error::{Error, Result};
use crate::geom::{integral_ratio, GridSpec};
use crate::real::Real;
use crate::rng::Rng;

pub const NUM_SCALES: usize = 4;

/// Total downsampling of the deepest backbone stage relative to `s0`, times two.
pub const ALIGNMENT_FACTOR: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSet {
    pub s0: f64,
    pub grids: Vec<GridSpec>,
}

impl ScaleSet {
    pub fn scale_factor(i: usize) -> usize {
        1 << i
    }

    pub fn cell_sizes(&self) -> Vec<f64> {
        self.grids.iter().map(|g| g.cell_size).collect()
    }
}

/// Four grids over the extent of `grid0` with cells `s0 * 2^i`.
pub fn derive_scales(grid0: &GridSpec) -> Result<ScaleSet> {
    let s0 = grid0.cell_size;
    let block = ALIGNMENT_FACTOR as f64 * s0;
    for (axis, extent) in [("x", grid0.x_max - grid0.x_min), ("y", grid0.y_max - grid0.y_min)] {
        if integral_ratio(extent, block).is_none() {
            return Err(Error::Config(format!(
                "{axis} extent {extent} m must be divisible by 16*s0 = {block} m so all \
                 {NUM_SCALES} backbone scales align"
            )));
        }
    }
    let grids = (0..NUM_SCALES)
        .map(|i| grid0.coarsened(ScaleSet::scale_factor(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScaleSet { s0, grids })
}

/// `rho_k_i = (s_i / s0) * rho_k0`.
pub fn adaptive_radius(s_i: f64, s0: f64, rho_k0: f64) -> f64 {
    (s_i / s0) * rho_k0
}

/// One independently weighted encoder per scale.
#[derive(Clone, Debug)]
pub struct MultiScaleEncoder<T> {
    pub scales: ScaleSet,
    pub encoders: Vec<Encoder<T>>,
    pub radii: Vec<f64>,
}

/// Maps of one multi-scale rendering, finest first.
#[derive(Clone, Debug)]
pub struct MultiScaleRendering<T> {
    pub maps: Vec<FeatureMap<T>>,
    pub radii: Vec<f64>,
}

impl<T: Real> MultiScaleEncoder<T> {
    /// With `adaptive` the kpbev influence radius grows with the cell size;
    /// otherwise every scale uses `cfg.rho_k`. Pillars ignore the radius.
    pub fn new(
        name: &str,
        in_features: usize,
        cfg: &EncoderConfig,
        scales: ScaleSet,
        adaptive: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut encoders = Vec::with_capacity(scales.grids.len());
        let mut radii = Vec::with_capacity(scales.grids.len());
        for (i, g) in scales.grids.iter().enumerate() {
            let rho_k = if adaptive && cfg.kind == EncoderKind::Kpbev {
                adaptive_radius(g.cell_size, scales.s0, cfg.rho_k)
            } else {
                cfg.rho_k
            };
            let scale_cfg = EncoderConfig { rho_k, ..cfg.clone() };
            encoders.push(Encoder::new(&format!("{name}.scale{i}"), in_features, &scale_cfg, rng)?);
            radii.push(rho_k);
        }
        Ok(Self {
            scales,
            encoders,
            radii,
        })
    }

    pub fn forward(&mut self, positions: &[[f64; 2]], features: &Tensor<T>) -> Result<MultiScaleRendering<T>> {
        let maps = self
            .encoders
            .iter_mut()
            .zip(&self.scales.grids)
            .map(|(e, g)| e.forward(positions, features, g))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiScaleRendering {
            maps,
            radii: self.radii.clone(),
        })
    }

    /// Gradient w.r.t. the shared input features, summed over scales in order.
    pub fn backward(&mut self, d_maps: &[Tensor<T>]) -> Tensor<T> {
        let mut acc: Option<Tensor<T>> = None;
        for (e, d) in self.encoders.iter_mut().zip(d_maps) {
            let g = e.backward(d);
            match acc.as_mut() {
                Some(a) => a.add_assign(&g),
                None => acc = Some(g),
            }
        }
        acc.expect("at least one scale")
    }
}

impl<T: Real> Module<T> for MultiScaleEncoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.encoders.iter().flat_map(|e| e.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.encoders.iter_mut().flat_map(|e| e.params_mut()).collect()
    }
    fn norms(&self) -> Vec<&BatchNorm<T>> {
        self.encoders.iter().flat_map(|e| e.norms()).collect()
    }
    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        self.encoders.iter_mut().flat_map(|e| e.norms_mut()).collect()
    }
}

/// Concatenates `[backbone || rendered]` per stage.
pub fn fuse_into_backbone<T: Real>(
    backbone: &[Tensor<T>],
    rendered: &[Tensor<T>],
) -> Result<Vec<Tensor<T>>> {
    if backbone.len() != rendered.len() {
        return Err(Error::Shape(format!(
            "{} backbone stages but {} rendered maps",
            backbone.len(),
            rendered.len()
        )));
    }
    backbone
        .iter()
        .zip(rendered)
        .map(|(b, r)| concat_channels(b, r))
        .collect()
}

/// VJP of one fused stage: `(d_backbone, d_rendered)`.
pub fn split_fused<T: Real>(d_fused: &Tensor<T>, backbone_channels: usize) -> (Tensor<T>, Tensor<T>) {
    let total = d_fused.cols();
    (
        slice_channels(d_fused, 0, backbone_channels),
        slice_channels(d_fused, backbone_channels, total - backbone_channels),
    )
}

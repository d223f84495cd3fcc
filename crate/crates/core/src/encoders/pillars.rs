use super::augment::{augment, augment_backward, AUGMENTED_EXTRA};
use super::transfer::{grid_gather, grid_transfer, FeatureMap};
use super::EncoderConfig;
use crate::autodiff::init::kaiming_uniform;
use crate::autodiff::ops::{segment_max_backward, segment_max_forward};
use crate::autodiff::{BatchNorm, Dense, Linear, Module, Param, Tensor};
use crate::error::Result;
use crate::geom::{anchors_from_positions, centroids_from_positions, AnchorSet, GridSpec};
use crate::real::Real;
use crate::rng::Rng;

#[derive(Clone, Debug)]
struct PillarsCache {
    anchors: AnchorSet,
    grid: GridSpec,
    rows: Vec<usize>,
    argmax: Vec<Option<usize>>,
    total: usize,
    fin: usize,
}

/// Pointwise MLP followed by a cell-wise max.
#[derive(Clone, Debug)]
pub struct PillarsEncoder<T> {
    pub dense: Dense<T>,
    cache: Option<PillarsCache>,
}

impl<T: Real> PillarsEncoder<T> {
    pub fn new(name: &str, in_features: usize, cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let width = in_features + AUGMENTED_EXTRA;
        let linear = Linear::new(
            &format!("{name}.linear"),
            kaiming_uniform(&[width, cfg.f_out], width, rng),
            Tensor::zeros(&[cfg.f_out]),
        );
        let norm = cfg
            .use_batch_norm
            .then(|| BatchNorm::new(&format!("{name}.bn"), cfg.f_out));
        Self {
            dense: Dense::new(linear, norm),
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.dense.linear.in_features() - AUGMENTED_EXTRA
    }

    pub fn out_features(&self) -> usize {
        self.dense.linear.out_features()
    }

    pub fn forward(
        &mut self,
        positions: &[[f64; 2]],
        features: &Tensor<T>,
        grid: &GridSpec,
    ) -> Result<FeatureMap<T>> {
        let anchors = anchors_from_positions(positions, grid);
        let centroids = centroids_from_positions(positions, &anchors);
        let aug = augment(positions, features, &anchors, &centroids);
        let point_features = self.dense.forward(&aug.features)?;
        let pooled = segment_max_forward(&point_features, &aug.anchor, anchors.len())?;
        let map = grid_transfer(&pooled.output, &anchors, grid)?;
        self.cache = Some(PillarsCache {
            anchors,
            grid: *grid,
            rows: aug.rows,
            argmax: pooled.argmax,
            total: positions.len(),
            fin: features.cols(),
        });
        Ok(map)
    }

    pub fn backward(&mut self, d_map: &Tensor<T>) -> Tensor<T> {
        let c = self.cache.take().expect("PillarsEncoder::backward before forward");
        let d_pooled = grid_gather(d_map, &c.anchors, &c.grid);
        let d_points = segment_max_backward(&c.argmax, c.rows.len(), &d_pooled);
        let d_aug = self.dense.backward(&d_points);
        augment_backward(&d_aug, &c.rows, c.total, c.fin)
    }
}

impl<T: Real> Module<T> for PillarsEncoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.dense.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.dense.params_mut()
    }
    fn norms(&self) -> Vec<&BatchNorm<T>> {
        self.dense.norms()
    }
    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        self.dense.norms_mut()
    }
}

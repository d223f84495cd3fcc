use super::augment::{augment, augment_backward, AUGMENTED_EXTRA};
use super::transfer::{grid_gather, grid_transfer, FeatureMap};
use super::EncoderConfig;
use crate::autodiff::init::kaiming_uniform;
use crate::autodiff::{BatchNorm, Dense, Linear, Module, Param, Relu, Tensor};
use crate::error::Result;
use crate::geom::{
    anchors_from_positions, centroids_from_positions, radius_neighbors, AnchorSet, GridSpec,
    NeighborLists,
};
use crate::kpconv::{make_layout, ConvolutionCounts, KpConv, RADIUS_TO_INFLUENCE};
use crate::real::Real;
use crate::rng::Rng;

/// Tensor shapes seen by the last forward pass, stage by stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageShapes {
    pub augmented: Vec<usize>,
    pub point_features: Vec<usize>,
    pub anchor_features: Vec<usize>,
    pub map: Vec<usize>,
}

#[derive(Clone, Debug)]
struct KpbevCache {
    anchors: AnchorSet,
    grid: GridSpec,
    rows: Vec<usize>,
    total: usize,
    fin: usize,
}

/// Linear -> KPConv at anchors -> Linear -> grid transfer, each layer
/// followed by batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct KpbevEncoder<T> {
    pub pre: Dense<T>,
    pub conv: KpConv<T>,
    pub conv_norm: Option<BatchNorm<T>>,
    conv_relu: Relu<T>,
    pub post: Dense<T>,
    cache: Option<KpbevCache>,
    shapes: Option<StageShapes>,
    last_neighbors: Option<NeighborLists>,
}

impl<T: Real> KpbevEncoder<T> {
    pub fn new(name: &str, in_features: usize, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let width = in_features + AUGMENTED_EXTRA;
        let f = cfg.f_out;
        let bn = |suffix: &str| {
            cfg.use_batch_norm
                .then(|| BatchNorm::new(&format!("{name}.{suffix}"), f))
        };
        let pre = Dense::new(
            Linear::new(
                &format!("{name}.pre"),
                kaiming_uniform(&[width, f], width, rng),
                Tensor::zeros(&[f]),
            ),
            bn("pre_bn"),
        );
        let layout = make_layout(cfg.kernel_points, RADIUS_TO_INFLUENCE * cfg.rho_k)?;
        let k = layout.len();
        let conv = KpConv::new(
            &format!("{name}.kpconv"),
            layout,
            kaiming_uniform(&[k, f, f], k * f, rng),
        )?;
        let post = Dense::new(
            Linear::new(
                &format!("{name}.post"),
                kaiming_uniform(&[f, f], f, rng),
                Tensor::zeros(&[f]),
            ),
            bn("post_bn"),
        );
        Ok(Self {
            pre,
            conv,
            conv_norm: bn("kpconv_bn"),
            conv_relu: Relu::new(),
            post,
            cache: None,
            shapes: None,
            last_neighbors: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.pre.linear.in_features() - AUGMENTED_EXTRA
    }

    pub fn out_features(&self) -> usize {
        self.post.linear.out_features()
    }

    /// Neighborhood radius `rho = 2.5 * rho_k`.
    pub fn radius(&self) -> f64 {
        self.conv.layout.radius
    }

    pub fn last_shapes(&self) -> Option<&StageShapes> {
        self.shapes.as_ref()
    }

    pub fn last_neighbors(&self) -> Option<&NeighborLists> {
        self.last_neighbors.as_ref()
    }

    /// Convolution counts of the last forward pass.
    pub fn last_counts(&self) -> Option<ConvolutionCounts> {
        self.cache
            .as_ref()
            .map(|c| ConvolutionCounts::new(c.anchors.len(), c.rows.len()))
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
        let point_features = self.pre.forward(&aug.features)?;
        let in_points: Vec<[f64; 2]> = aug.rows.iter().map(|&i| positions[i]).collect();
        let neighbors = radius_neighbors(&anchors.positions, &in_points, self.radius());
        let mut anchor_features =
            self.conv
                .forward(&anchors.positions, &in_points, &point_features, &neighbors)?;
        if let Some(n) = self.conv_norm.as_mut() {
            anchor_features = n.forward(&anchor_features)?;
        }
        let anchor_features = self.conv_relu.forward(&anchor_features);
        let anchor_features = self.post.forward(&anchor_features)?;
        let map = grid_transfer(&anchor_features, &anchors, grid)?;
        self.shapes = Some(StageShapes {
            augmented: aug.features.shape().to_vec(),
            point_features: point_features.shape().to_vec(),
            anchor_features: anchor_features.shape().to_vec(),
            map: map.data.shape().to_vec(),
        });
        self.last_neighbors = Some(neighbors);
        self.cache = Some(KpbevCache {
            anchors,
            grid: *grid,
            rows: aug.rows,
            total: positions.len(),
            fin: features.cols(),
        });
        Ok(map)
    }

    pub fn backward(&mut self, d_map: &Tensor<T>) -> Tensor<T> {
        let c = self.cache.as_ref().expect("KpbevEncoder::backward before forward");
        let d_anchor = grid_gather(d_map, &c.anchors, &c.grid);
        let mut g = self.post.backward(&d_anchor);
        g = self.conv_relu.backward(&g);
        if let Some(n) = self.conv_norm.as_mut() {
            g = n.backward(&g);
        }
        let d_points = self.conv.backward(&g);
        let d_aug = self.pre.backward(&d_points);
        augment_backward(&d_aug, &c.rows, c.total, c.fin)
    }
}

impl<T: Real> Module<T> for KpbevEncoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.pre.params();
        v.extend(self.conv.params());
        if let Some(n) = &self.conv_norm {
            v.extend(n.params());
        }
        v.extend(self.post.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.pre.params_mut();
        v.extend(self.conv.params_mut());
        if let Some(n) = &mut self.conv_norm {
            v.extend(n.params_mut());
        }
        v.extend(self.post.params_mut());
        v
    }
    fn norms(&self) -> Vec<&BatchNorm<T>> {
        let mut v = self.pre.norms();
        v.extend(self.conv_norm.iter());
        v.extend(self.post.norms());
        v
    }
    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut v = self.pre.norms_mut();
        v.extend(self.conv_norm.iter_mut());
        v.extend(self.post.norms_mut());
        v
    }
}

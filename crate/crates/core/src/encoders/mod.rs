//! Grid rendering encoders (pillar pooling and kernel-point BEV) and the
//! point-to-point KPConv preprocessing stack.

mod augment;
mod kpbev;
mod pillars;
mod preprocess;
mod transfer;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNorm, Module, Param, Tensor};
use crate::error::{Error, Result};
use crate::geom::{GridSpec, PointCloud};
use crate::real::Real;
use crate::rng::Rng;

pub use augment::{augment, augment_backward, Augmented, AUGMENTED_EXTRA};
pub use kpbev::{KpbevEncoder, StageShapes};
pub use pillars::PillarsEncoder;
pub use preprocess::{KpConvStack, PASSTHROUGH_CHANNELS, PREPROCESS_LAYERS};
pub use transfer::{grid_gather, grid_transfer, FeatureMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Pillars,
    Kpbev,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pillars" => Ok(Self::Pillars),
            "kpbev" => Ok(Self::Kpbev),
            other => Err(Error::Config(format!("unknown encoder kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub f_out: usize,
    pub kernel_points: usize,
    /// Kernel influence radius; the neighborhood radius is `2.5 * rho_k`.
    pub rho_k: f64,
    pub use_batch_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Kpbev,
            f_out: 64,
            kernel_points: 9,
            rho_k: 0.6,
            use_batch_norm: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.f_out == 0 {
            return Err(Error::Config("f_out must be at least 1".into()));
        }
        if self.kernel_points == 0 {
            return Err(Error::Config("kernel_points must be at least 1".into()));
        }
        if !(self.rho_k > 0.0) {
            return Err(Error::Config(format!("rho_k must be positive, got {}", self.rho_k)));
        }
        Ok(())
    }
}

/// A grid rendering method.
#[derive(Clone, Debug)]
pub enum Encoder<T> {
    Pillars(PillarsEncoder<T>),
    Kpbev(KpbevEncoder<T>),
}

impl<T: Real> Encoder<T> {
    pub fn new(name: &str, in_features: usize, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            EncoderKind::Pillars => Self::Pillars(PillarsEncoder::new(name, in_features, cfg, rng)),
            EncoderKind::Kpbev => Self::Kpbev(KpbevEncoder::new(name, in_features, cfg, rng)?),
        })
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            Self::Pillars(_) => EncoderKind::Pillars,
            Self::Kpbev(_) => EncoderKind::Kpbev,
        }
    }

    pub fn out_features(&self) -> usize {
        match self {
            Self::Pillars(e) => e.out_features(),
            Self::Kpbev(e) => e.out_features(),
        }
    }

    pub fn forward(
        &mut self,
        positions: &[[f64; 2]],
        features: &Tensor<T>,
        grid: &GridSpec,
    ) -> Result<FeatureMap<T>> {
        match self {
            Self::Pillars(e) => e.forward(positions, features, grid),
            Self::Kpbev(e) => e.forward(positions, features, grid),
        }
    }

    pub fn backward(&mut self, d_map: &Tensor<T>) -> Tensor<T> {
        match self {
            Self::Pillars(e) => e.backward(d_map),
            Self::Kpbev(e) => e.backward(d_map),
        }
    }

    /// Renders a whole cloud.
    pub fn encode(&mut self, pc: &PointCloud, grid: &GridSpec) -> Result<FeatureMap<T>> {
        self.forward(pc.positions(), &pc.features_tensor(), grid)
    }
}

impl<T: Real> Module<T> for Encoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        match self {
            Self::Pillars(e) => e.params(),
            Self::Kpbev(e) => e.params(),
        }
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Self::Pillars(e) => e.params_mut(),
            Self::Kpbev(e) => e.params_mut(),
        }
    }
    fn norms(&self) -> Vec<&BatchNorm<T>> {
        match self {
            Self::Pillars(e) => e.norms(),
            Self::Kpbev(e) => e.norms(),
        }
    }
    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        match self {
            Self::Pillars(e) => e.norms_mut(),
            Self::Kpbev(e) => e.norms_mut(),
        }
    }
}

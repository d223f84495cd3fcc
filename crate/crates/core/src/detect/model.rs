//! The four encoder compositions wired to the backbone and head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::backbone::{BackboneConfig, MiniBackbone, HEAD_STRIDE};
use crate::autodiff::{BatchNorm, Module, Param, Tensor};
use crate::encoders::{EncoderConfig, EncoderKind, KpConvStack};
use crate::error::{Error, Result};
use crate::geom::{GridSpec, PointCloud, SENSOR_FEATURES};
use crate::multiscale::{derive_scales, MultiScaleEncoder, ScaleSet, NUM_SCALES};
use crate::real::Real;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "pillars")]
    PointPillars,
    #[serde(rename = "kppillars")]
    KpPillars,
    #[serde(rename = "kpbev")]
    Kpbev,
    #[serde(rename = "kppillarsbev")]
    KpPillarsBev,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::PointPillars,
        Architecture::KpPillars,
        Architecture::Kpbev,
        Architecture::KpPillarsBev,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::PointPillars => "pillars",
            Self::KpPillars => "kppillars",
            Self::Kpbev => "kpbev",
            Self::KpPillarsBev => "kppillarsbev",
        }
    }

    pub fn preprocessing(self) -> bool {
        matches!(self, Self::KpPillars | Self::KpPillarsBev)
    }

    pub fn encoder(self) -> EncoderKind {
        match self {
            Self::PointPillars | Self::KpPillars => EncoderKind::Pillars,
            Self::Kpbev | Self::KpPillarsBev => EncoderKind::Kpbev,
        }
    }

    pub fn from_parts(preprocessing: bool, encoder: EncoderKind) -> Self {
        match (preprocessing, encoder) {
            (false, EncoderKind::Pillars) => Self::PointPillars,
            (true, EncoderKind::Pillars) => Self::KpPillars,
            (false, EncoderKind::Kpbev) => Self::Kpbev,
            (true, EncoderKind::Kpbev) => Self::KpPillarsBev,
        }
    }

    /// Base KPBEV influence radius; larger when the cloud was preprocessed.
    pub fn default_rho_k0(self) -> f64 {
        if self.preprocessing() {
            1.0
        } else {
            0.6
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub encoder: EncoderKind,
    /// Three point-to-point KPConv layers before rendering.
    pub preprocessing: bool,
    pub multiscale: bool,
    /// The grid spans `[-half_extent, half_extent]^2`.
    pub half_extent: f64,
    pub s0: f64,
    pub f_out: usize,
    pub kernel_points: usize,
    pub rho_k0: f64,
    pub rho_k0_pre: f64,
    pub adaptive_radius: bool,
    pub use_batch_norm: bool,
    pub backbone_channels: [usize; NUM_SCALES],
}

impl Default for DetectorConfig {
    /// The full composition: preprocessing, KPBEV rendering, all four scales.
    fn default() -> Self {
        Self::preset(Architecture::KpPillarsBev, true)
    }
}

impl DetectorConfig {
    pub fn preset(arch: Architecture, multiscale: bool) -> Self {
        Self {
            encoder: arch.encoder(),
            preprocessing: arch.preprocessing(),
            multiscale,
            half_extent: 20.0,
            s0: 0.5,
            f_out: 64,
            kernel_points: 9,
            rho_k0: arch.default_rho_k0(),
            rho_k0_pre: 1.0,
            adaptive_radius: true,
            use_batch_norm: true,
            backbone_channels: BackboneConfig::default().channels,
        }
    }

    pub fn arch(&self) -> Architecture {
        Architecture::from_parts(self.preprocessing, self.encoder)
    }

    pub fn grid(&self) -> Result<GridSpec> {
        if !(self.half_extent > 0.0) || !(self.s0 > 0.0) {
            return Err(Error::Config(format!(
                "half_extent and s0 must be positive, got {} and {}",
                self.half_extent, self.s0
            )));
        }
        GridSpec::centered(self.half_extent, self.s0)
    }

    pub fn scales(&self) -> Result<ScaleSet> {
        derive_scales(&self.grid()?)
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            kind: self.encoder,
            f_out: self.f_out,
            kernel_points: self.kernel_points,
            rho_k: self.rho_k0,
            use_batch_norm: self.use_batch_norm,
        }
    }

    pub fn preprocess_config(&self) -> EncoderConfig {
        EncoderConfig {
            rho_k: self.rho_k0_pre,
            ..self.encoder_config()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scales()?;
        self.encoder_config().validate()?;
        if self.preprocessing {
            self.preprocess_config().validate()?;
        }
        if self.backbone_channels.contains(&0) {
            return Err(Error::Config("backbone channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Detector<T> {
    pub config: DetectorConfig,
    pub preprocess: Option<KpConvStack<T>>,
    pub encoder: MultiScaleEncoder<T>,
    pub backbone: MiniBackbone<T>,
    head_grid: GridSpec,
}

impl<T: Real> Detector<T> {
    /// Expects clouds carrying the sensor features `[x, y, vr, rcs, dt]`.
    pub fn new(config: &DetectorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut scales = config.scales()?;
        let head_grid = scales.grids[0].coarsened(HEAD_STRIDE)?;
        if !config.multiscale {
            scales.grids.truncate(1);
        }
        let preprocess = if config.preprocessing {
            Some(KpConvStack::new("preprocess", SENSOR_FEATURES, &config.preprocess_config(), rng)?)
        } else {
            None
        };
        let enc_in = preprocess.as_ref().map_or(SENSOR_FEATURES, |p| p.out_features());
        let encoder = MultiScaleEncoder::new(
            "render",
            enc_in,
            &config.encoder_config(),
            scales,
            config.adaptive_radius,
            rng,
        )?;
        let mut rendered = [0; NUM_SCALES];
        for (r, e) in rendered.iter_mut().zip(&encoder.encoders) {
            *r = e.out_features();
        }
        let backbone = MiniBackbone::new(
            &BackboneConfig {
                channels: config.backbone_channels,
                use_batch_norm: config.use_batch_norm,
            },
            rendered,
            rng,
        )?;
        Ok(Self {
            config: config.clone(),
            preprocess,
            encoder,
            backbone,
            head_grid,
        })
    }

    pub fn head_grid(&self) -> &GridSpec {
        &self.head_grid
    }

    pub fn forward(&mut self, pc: &PointCloud) -> Result<Tensor<T>> {
        self.forward_features(pc.positions(), &pc.features_tensor())
    }

    pub fn forward_features(&mut self, positions: &[[f64; 2]], features: &Tensor<T>) -> Result<Tensor<T>> {
        let features = match self.preprocess.as_mut() {
            Some(p) => p.forward(positions, features)?,
            None => features.clone(),
        };
        let rendering = self.encoder.forward(positions, &features)?;
        let maps: Vec<Tensor<T>> = rendering.maps.into_iter().map(|m| m.data).collect();
        self.backbone.forward(&maps)
    }

    /// Accumulates parameter gradients and returns `dL/d input features`.
    pub fn backward(&mut self, d_head: &Tensor<T>) -> Tensor<T> {
        let d_maps = self.backbone.backward(d_head);
        let d = self.encoder.backward(&d_maps);
        match self.preprocess.as_mut() {
            Some(p) => p.backward(&d),
            None => d,
        }
    }
}

impl<T: Real> Module<T> for Detector<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        if let Some(p) = &self.preprocess {
            v.extend(p.params());
        }
        v.extend(self.encoder.params());
        v.extend(self.backbone.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        if let Some(p) = &mut self.preprocess {
            v.extend(p.params_mut());
        }
        v.extend(self.encoder.params_mut());
        v.extend(self.backbone.params_mut());
        v
    }
    fn norms(&self) -> Vec<&BatchNorm<T>> {
        let mut v = Vec::new();
        if let Some(p) = &self.preprocess {
            v.extend(p.norms());
        }
        v.extend(self.encoder.norms());
        v.extend(self.backbone.norms());
        v
    }
    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut v = Vec::new();
        if let Some(p) = &mut self.preprocess {
            v.extend(p.norms_mut());
        }
        v.extend(self.encoder.norms_mut());
        v.extend(self.backbone.norms_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn compositions() {
        assert!(!Architecture::PointPillars.preprocessing());
        assert_eq!(Architecture::PointPillars.encoder(), EncoderKind::Pillars);
        assert!(Architecture::KpPillarsBev.preprocessing());
        assert_eq!(Architecture::KpPillarsBev.encoder(), EncoderKind::Kpbev);
        for a in Architecture::ALL {
            assert_eq!(a.name().parse::<Architecture>().unwrap(), a);
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.name()));
        }
        assert!("resnet".parse::<Architecture>().is_err());
        for a in Architecture::ALL {
            assert_eq!(DetectorConfig::preset(a, false).arch(), a);
        }
    }

    #[test]
    fn misaligned_extent_rejected() {
        let mut cfg = DetectorConfig::preset(Architecture::Kpbev, false);
        cfg.half_extent = 21.0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("16*s0"), "{err}");
    }

    #[test]
    fn head_shape_per_composition() {
        let scene = crate::detect::scene::generate_scene(&Default::default(), 1, 0);
        for arch in Architecture::ALL {
            for ms in [false, true] {
                let mut cfg = DetectorConfig::preset(arch, ms);
                cfg.half_extent = 8.0;
                cfg.f_out = 4;
                cfg.backbone_channels = [4, 4, 4, 4];
                let mut r = rng::stream(0, "init");
                let mut det = Detector::<f32>::new(&cfg, &mut r).unwrap();
                assert_eq!(det.encoder.encoders.len(), if ms { 4 } else { 1 });
                let head = det.forward(&scene.cloud).unwrap();
                assert_eq!(head.shape(), &[8, 8, super::super::backbone::HEAD_CHANNELS]);
                let d = det.backward(&head);
                assert_eq!(d.shape(), &[scene.cloud.len(), SENSOR_FEATURES]);
            }
        }
    }
}

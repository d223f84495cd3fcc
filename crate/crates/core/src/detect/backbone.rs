//! Four-stage convolutional stand-in for the ResNet + FPN backbone: stride 2
//! between stages, rendered maps concatenated at their matching stage, and a
//! top-down merge of the two coarsest stages at quarter resolution.

use serde::{Deserialize, Serialize};

use crate::autodiff::init::{kaiming_uniform, uniform};
use crate::autodiff::ops::{concat_channels, upsample2x_backward, upsample2x_forward};
use crate::autodiff::{BatchNorm, Conv2d, Module, Param, Relu, Tensor};
use crate::error::{Error, Result};
use crate::multiscale::{fuse_into_backbone, split_fused, NUM_SCALES};
use crate::real::Real;
use crate::rng::Rng;

/// Channels per cell of the head: objectness logit, dx, dy, log w, log l,
/// sin yaw, cos yaw, and one reserved channel that receives no loss.
pub const HEAD_CHANNELS: usize = 8;
/// Spatial reduction from the input grid to the head grid.
pub const HEAD_STRIDE: usize = 4;
/// Focal-loss prior for the initial objectness bias.
pub const OBJECTNESS_PRIOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub channels: [usize; NUM_SCALES],
    pub use_batch_norm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 64, 64],
            use_batch_norm: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub norm: Option<BatchNorm<T>>,
    relu: Relu<T>,
}

impl<T: Real> ConvBlock<T> {
    fn new(name: &str, k: usize, cin: usize, cout: usize, stride: usize, bn: bool, rng: &mut Rng) -> Self {
        Self {
            conv: Conv2d::new(
                &format!("{name}.conv"),
                kaiming_uniform(&[k, k, cin, cout], k * k * cin, rng),
                None,
                stride,
            ),
            norm: bn.then(|| BatchNorm::new(&format!("{name}.bn"), cout)),
            relu: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = self.conv.forward(x)?;
        if let Some(n) = self.norm.as_mut() {
            y = n.forward(&y)?;
        }
        Ok(self.relu.forward(&y))
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = self.relu.backward(dy);
        if let Some(n) = self.norm.as_mut() {
            g = n.backward(&g);
        }
        self.conv.backward(&g)
    }
}

impl<T: Real> Module<T> for ConvBlock<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.conv.params();
        if let Some(n) = &self.norm {
            v.extend(n.params());
        }
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv.params_mut();
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

#[derive(Clone, Debug)]
struct Stage<T> {
    /// Stride-2 entry convolution; absent on the first stage.
    down: Option<ConvBlock<T>>,
    /// Channels of the rendered map concatenated at this stage (0 = none).
    rendered: usize,
    fuse: ConvBlock<T>,
    /// First-stage second convolution.
    extra: Option<ConvBlock<T>>,
}

#[derive(Clone, Debug)]
pub struct MiniBackbone<T> {
    stages: Vec<Stage<T>>,
    top_down: ConvBlock<T>,
    pub head: Conv2d<T>,
    channels: [usize; NUM_SCALES],
}

impl<T: Real> MiniBackbone<T> {
    /// `rendered[i]` is the channel count of the map fused at stage `i`
    /// (`rendered[0] > 0` always; zeros elsewhere for single-scale input).
    pub fn new(cfg: &BackboneConfig, rendered: [usize; NUM_SCALES], rng: &mut Rng) -> Result<Self> {
        if rendered[0] == 0 {
            return Err(Error::Config("the first stage needs a rendered map".into()));
        }
        let c = cfg.channels;
        let bn = cfg.use_batch_norm;
        let mut stages = Vec::with_capacity(NUM_SCALES);
        for i in 0..NUM_SCALES {
            let stage = if i == 0 {
                Stage {
                    down: None,
                    rendered: rendered[0],
                    fuse: ConvBlock::new("backbone.stage0.conv0", 3, rendered[0], c[0], 1, bn, rng),
                    extra: Some(ConvBlock::new("backbone.stage0.conv1", 3, c[0], c[0], 1, bn, rng)),
                }
            } else {
                Stage {
                    down: Some(ConvBlock::new(
                        &format!("backbone.stage{i}.down"),
                        3,
                        c[i - 1],
                        c[i],
                        2,
                        bn,
                        rng,
                    )),
                    rendered: rendered[i],
                    fuse: ConvBlock::new(
                        &format!("backbone.stage{i}.fuse"),
                        3,
                        c[i] + rendered[i],
                        c[i],
                        1,
                        bn,
                        rng,
                    ),
                    extra: None,
                }
            };
            stages.push(stage);
        }
        let top_down = ConvBlock::new("backbone.top_down", 3, c[2] + c[3], c[2], 1, bn, rng);
        let mut bias = Tensor::zeros(&[HEAD_CHANNELS]);
        bias.data_mut()[0] = T::of(-((1.0 - OBJECTNESS_PRIOR) / OBJECTNESS_PRIOR).ln());
        let head = Conv2d::new(
            "backbone.head",
            uniform(&[1, 1, c[2], HEAD_CHANNELS], 0.01, rng),
            Some(bias),
            1,
        );
        Ok(Self {
            stages,
            top_down,
            head,
            channels: c,
        })
    }

    /// `maps[0]` feeds the first stage; `maps[i]` for `i > 0` is fused at
    /// stage `i` when that stage was built with rendered channels.
    pub fn forward(&mut self, maps: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut x = maps
            .first()
            .ok_or_else(|| Error::Shape("backbone needs at least one map".into()))?
            .clone();
        let mut stage_out = Vec::with_capacity(NUM_SCALES);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            if let Some(down) = stage.down.as_mut() {
                x = down.forward(&x)?;
                if stage.rendered > 0 {
                    let r = maps.get(i).ok_or_else(|| {
                        Error::Shape(format!("stage {i} expects a rendered map"))
                    })?;
                    x = fuse_into_backbone(std::slice::from_ref(&x), std::slice::from_ref(r))?
                        .remove(0);
                }
            }
            x = stage.fuse.forward(&x)?;
            if let Some(extra) = stage.extra.as_mut() {
                x = extra.forward(&x)?;
            }
            stage_out.push(x.clone());
        }
        let up = upsample2x_forward(&stage_out[3])?;
        let merged = concat_channels(&stage_out[2], &up)?;
        let merged = self.top_down.forward(&merged)?;
        self.head.forward(&merged)
    }

    /// Returns the gradient for every map `forward` consumed, in stage order.
    pub fn backward(&mut self, d_head: &Tensor<T>) -> Vec<Tensor<T>> {
        let c = self.channels;
        let g = self.head.backward(d_head);
        let g = self.top_down.backward(&g);
        let (d2_lateral, d_up) = split_fused(&g, c[2]);
        let d3 = upsample2x_backward(&d_up).expect("map gradient");
        let mut d_rendered: Vec<Option<Tensor<T>>> = vec![None; NUM_SCALES];
        let mut carry: Option<Tensor<T>> = None;
        for i in (0..NUM_SCALES).rev() {
            let mut g = match i {
                3 => d3.clone(),
                2 => d2_lateral.clone(),
                _ => Tensor::zeros(&[0]),
            };
            if let Some(next) = carry.take() {
                if g.is_empty() {
                    g = next;
                } else {
                    g.add_assign(&next);
                }
            }
            let stage = &mut self.stages[i];
            if let Some(extra) = stage.extra.as_mut() {
                g = extra.backward(&g);
            }
            g = stage.fuse.backward(&g);
            match stage.down.as_mut() {
                Some(down) => {
                    if stage.rendered > 0 {
                        let (db, dr) = split_fused(&g, c[i]);
                        d_rendered[i] = Some(dr);
                        g = db;
                    }
                    carry = Some(down.backward(&g));
                }
                None => d_rendered[0] = Some(g),
            }
        }
        d_rendered.into_iter().flatten().collect()
    }
}

impl<T: Real> Module<T> for MiniBackbone<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for s in &self.stages {
            if let Some(d) = &s.down {
                v.extend(d.params());
            }
            v.extend(s.fuse.params());
            if let Some(e) = &s.extra {
                v.extend(e.params());
            }
        }
        v.extend(self.top_down.params());
        v.extend(self.head.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for s in &mut self.stages {
            if let Some(d) = &mut s.down {
                v.extend(d.params_mut());
            }
            v.extend(s.fuse.params_mut());
            if let Some(e) = &mut s.extra {
                v.extend(e.params_mut());
            }
        }
        v.extend(self.top_down.params_mut());
        v.extend(self.head.params_mut());
        v
    }
    fn norms(&self) -> Vec<&BatchNorm<T>> {
        let mut v = Vec::new();
        for s in &self.stages {
            if let Some(d) = &s.down {
                v.extend(d.norms());
            }
            v.extend(s.fuse.norms());
            if let Some(e) = &s.extra {
                v.extend(e.norms());
            }
        }
        v.extend(self.top_down.norms());
        v
    }
    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut v = Vec::new();
        for s in &mut self.stages {
            if let Some(d) = &mut s.down {
                v.extend(d.norms_mut());
            }
            v.extend(s.fuse.norms_mut());
            if let Some(e) = &mut s.extra {
                v.extend(e.norms_mut());
            }
        }
        v.extend(self.top_down.norms_mut());
        v
    }
}

//! Finite-difference verification of every hand-written VJP, from single
//! ops up to the full detector. Everything runs in 64-bit with batch norm
//! in identity mode, except the batch-norm checks themselves.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::Serialize;

use crate::autodiff::conv::{conv2d_backward, conv2d_forward};
use crate::autodiff::gradcheck::{gradcheck, gradcheck_directional, probe_loss, GradCheckReport, GradProblem};
use crate::autodiff::init::{kaiming_uniform, uniform};
use crate::autodiff::ops::{
    concat_channels, linear_backward, linear_forward, relu_backward, relu_forward, activation_pattern,
    segment_max_backward,
    segment_max_forward, slice_channels, upsample2x_backward, upsample2x_forward, SegmentMax,
};
use crate::autodiff::{BatchNorm, Module, NormMode, Param, Tensor};
use crate::detect::{detection_loss, BackboneConfig, Detector, DetectorConfig, LossConfig, MiniBackbone, Targets};
use crate::detect::{Architecture, OrientedBox};
use crate::encoders::{
    augment, augment_backward, grid_gather, grid_transfer, EncoderConfig, EncoderKind, KpConvStack,
    KpbevEncoder, PillarsEncoder,
};
use crate::error::{Error, Result};
use crate::geom::{anchors_from_positions, centroids_from_positions, radius_neighbors, AnchorSet, GridSpec};
use crate::kpconv::{make_layout, KpConv, RADIUS_TO_INFLUENCE};
use crate::multiscale::{derive_scales, fuse_into_backbone, split_fused, MultiScaleEncoder};
use crate::rng::{self, Rng};

pub const TOLERANCE: f64 = 1e-4;
/// Entries probed per parameter tensor.
const MAX_ENTRIES: usize = 48;
/// Redraws allowed before a check gives up on finding a kink-free instance.
const MAX_DRAWS: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    All,
    Autodiff,
    Geom,
    Kpconv,
    Encoders,
    Multiscale,
    Detect,
}

impl Scope {
    pub const NAMES: [&'static str; 7] = ["all", "autodiff", "geom", "kpconv", "encoders", "multiscale", "detect"];

    fn includes(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Self::All,
            "autodiff" => Self::Autodiff,
            "geom" => Self::Geom,
            "kpconv" => Self::Kpconv,
            "encoders" => Self::Encoders,
            "multiscale" => Self::Multiscale,
            "detect" => Self::Detect,
            _ => {
                return Err(Error::Config(format!(
                    "unknown scope {s:?}; expected one of {}",
                    Self::NAMES.join("|")
                )))
            }
        })
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = [
            Self::All,
            Self::Autodiff,
            Self::Geom,
            Self::Kpconv,
            Self::Encoders,
            Self::Multiscale,
            Self::Detect,
        ]
        .iter()
        .position(|s| s == self)
        .unwrap();
        f.write_str(Self::NAMES[i])
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub scope: Scope,
    pub op: String,
    pub entries: usize,
    /// Instances drawn until one had no kink within a step of any probe.
    pub draws: u64,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Wraps a problem and notes whether any evaluation left the activation
/// pattern of the first one, i.e. whether a finite-difference step crossed
/// a ReLU kink or a max-pooling tie.
struct KinkGuard {
    inner: Box<dyn GradProblem>,
    base: Option<u64>,
    crossed: bool,
}

impl GradProblem for KinkGuard {
    fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
        let (loss, pattern) = activation_pattern(|| self.inner.evaluate(with_grad));
        match self.base {
            None => self.base = Some(pattern),
            Some(b) if b != pattern => self.crossed = true,
            Some(_) => {}
        }
        loss
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        self.inner.params_mut()
    }
}

/// How a check probes its parameters.
#[derive(Clone, Copy)]
enum Probe {
    /// Up to [`MAX_ENTRIES`] single entries per tensor.
    Entries,
    /// Random sign directions per tensor, for deep compositions whose
    /// weakest entries sit below the roundoff floor of the loss.
    Directions(usize),
}

/// Checks the first instance of `name` on which no probe crossed a kink.
fn check(name: &str, build: Builder, probe: Probe, seed: u64) -> Result<(GradCheckReport, u64)> {
    for d in 0..MAX_DRAWS {
        let mut rng = rng::substream(seed, name, d);
        let mut guard = KinkGuard {
            inner: build(&mut rng)?,
            base: None,
            crossed: false,
        };
        let report = match probe {
            Probe::Entries => gradcheck(&mut guard, MAX_ENTRIES, seed)?,
            Probe::Directions(n) => gradcheck_directional(&mut guard, n, seed)?,
        };
        if !guard.crossed {
            return Ok((report, d + 1));
        }
    }
    Err(Error::Numerical(format!(
        "{name}: every one of {MAX_DRAWS} instances had a kink within one step"
    )))
}

/// Runs every check in `scope`, returning one row per op.
pub fn run_suite(scope: Scope, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for (s, name, probe, build) in registry() {
        if !scope.includes(s) {
            continue;
        }
        let (report, draws) = check(name, build, probe, seed)?;
        let max = report.max_rel_error();
        rows.push(CheckRow {
            scope: s,
            op: name.to_string(),
            entries: report.params.iter().map(|p| p.checked).sum(),
            draws,
            max_rel_error: max,
            passed: max <= TOLERANCE,
        });
    }
    Ok(rows)
}

pub fn format_table(rows: &[CheckRow]) -> String {
    let mut out = format!(
        "{:<11} {:<22} {:>8} {:>6} {:>12}  status\n",
        "scope", "op", "entries", "draws", "max_rel_err"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<11} {:<22} {:>8} {:>6} {:>12.3e}  {}\n",
            r.scope.to_string(),
            r.op,
            r.entries,
            r.draws,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    out
}

type Builder = fn(&mut Rng) -> Result<Box<dyn GradProblem>>;

fn registry() -> Vec<(Scope, &'static str, Probe, Builder)> {
    use Probe::Entries;
    vec![
        (Scope::Autodiff, "linear", Entries, linear_check),
        (Scope::Autodiff, "relu", Entries, relu_check),
        (Scope::Autodiff, "batch_norm_train", Entries, |r| batch_norm_check(r, NormMode::Train)),
        (Scope::Autodiff, "batch_norm_eval", Entries, |r| batch_norm_check(r, NormMode::Eval)),
        (Scope::Autodiff, "segment_max", Entries, segment_max_check),
        (Scope::Autodiff, "conv2d_stride1", Entries, |r| conv2d_check(r, 1)),
        (Scope::Autodiff, "conv2d_stride2", Entries, |r| conv2d_check(r, 2)),
        (Scope::Autodiff, "concat_channels", Entries, concat_check),
        (Scope::Autodiff, "upsample2x", Entries, upsample_check),
        (Scope::Geom, "augment", Entries, augment_check),
        (Scope::Geom, "grid_transfer", Entries, grid_transfer_check),
        (Scope::Kpconv, "kpconv_anchor", Entries, |r| kpconv_check(r, true)),
        (Scope::Kpconv, "kpconv_point", Entries, |r| kpconv_check(r, false)),
        (Scope::Encoders, "pillars_encoder", Entries, |r| encoder_check(r, EncoderKind::Pillars)),
        (Scope::Encoders, "kpbev_encoder", Entries, |r| encoder_check(r, EncoderKind::Kpbev)),
        (Scope::Encoders, "preprocessing_stack", Entries, preprocess_check),
        (Scope::Multiscale, "multiscale_fusion", Entries, fusion_check),
        (Scope::Multiscale, "multiscale_encoder", Entries, multiscale_encoder_check),
        (Scope::Detect, "mini_backbone", Entries, backbone_check),
        (Scope::Detect, "detection_loss", Entries, loss_check),
        (Scope::Detect, "mini_detector", Probe::Directions(4), detector_check),
    ]
}

/// `<f(x; state), probe>` for a differentiable map `f` with parameters in `S`.
struct Probed<S> {
    state: S,
    input: Param<f64>,
    probe: Option<Tensor<f64>>,
    probe_rng: Rng,
    forward: fn(&mut S, &Tensor<f64>) -> Result<Tensor<f64>>,
    backward: fn(&mut S, &Tensor<f64>) -> Tensor<f64>,
    params: fn(&mut S) -> Vec<&mut Param<f64>>,
}

impl<S> GradProblem for Probed<S> {
    fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
        let y = (self.forward)(&mut self.state, &self.input.value)?;
        if !y.all_finite() {
            return Err(Error::Numerical("non-finite output during gradcheck".into()));
        }
        let rng = &mut self.probe_rng;
        let probe = self
            .probe
            .get_or_insert_with(|| Tensor::from_fn(y.shape(), |_| rng.gen_range(-1.0..1.0)));
        let loss = probe_loss(&y, probe);
        if with_grad {
            let dx = (self.backward)(&mut self.state, probe);
            self.input.grad.add_assign(&dx);
        }
        Ok(loss)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        let mut v = vec![&mut self.input];
        v.extend((self.params)(&mut self.state));
        v
    }
}

fn probed<S: 'static>(
    state: S,
    input: Tensor<f64>,
    rng: &mut Rng,
    forward: fn(&mut S, &Tensor<f64>) -> Result<Tensor<f64>>,
    backward: fn(&mut S, &Tensor<f64>) -> Tensor<f64>,
    params: fn(&mut S) -> Vec<&mut Param<f64>>,
) -> Result<Box<dyn GradProblem>> {
    Ok(Box::new(Probed {
        state,
        input: Param::new("input", input),
        probe: None,
        probe_rng: rng::substream(rng.gen(), "probe", 0),
        forward,
        backward,
        params,
    }))
}

fn module_params<M: Module<f64>>(m: &mut M) -> Vec<&mut Param<f64>> {
    m.params_mut()
}

/// Random biases, so no unit sits exactly on a ReLU kink for every input.
fn jitter_biases<M: Module<f64>>(m: &mut M, rng: &mut Rng) {
    for p in m.params_mut() {
        if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
            p.value = uniform(p.value.shape(), 0.5, rng);
        }
    }
}

/// A unit-scale head keeps the probe loss from being dominated by the
/// constant objectness prior, which would drown the gradients in roundoff.
fn unit_head(bb: &mut MiniBackbone<f64>, rng: &mut Rng) {
    let shape = bb.head.kernel.value.shape().to_vec();
    bb.head.kernel.value = kaiming_uniform(&shape, shape[2], rng);
    if let Some(b) = bb.head.bias.as_mut() {
        b.value = uniform(b.value.shape(), 0.5, rng);
    }
}

fn no_params<S>(_: &mut S) -> Vec<&mut Param<f64>> {
    Vec::new()
}

/// Values bounded away from zero so ReLU kinks are never straddled.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn random_points(n: usize, half: f64, rng: &mut Rng) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| [rng.gen_range(-half..half), rng.gen_range(-half..half)])
        .collect()
}

fn linear_check(rng: &mut Rng) -> Result<Box<dyn GradProblem>> {
    struct S {
        w: Param<f64>,
        b: Param<f64>,
        x: Option<Tensor<f64>>,
    }
    let state = S {
        w: Param::new("weight", uniform(&[5, 3], 1.0, rng)),
        b: Param::new("bias", uniform(&[3], 1.0, rng)),
        x: None,
    };
    probed(
        state,
        uniform(&[6, 5], 1.0, rng),
        rng,
        |s, x| {
            s.x = Some(x.clone());
            linear_forward(x, &s.w.value, &s.b.value)
        },
        |s, dy| {
            let (dx, dw, db) = linear_backward(s.x.as_ref().unwrap(), &s.w.value, dy);
            s.w.grad.add_assign(&dw);
            s.b.grad.add_assign(&db);
            dx
        },
        |s| vec![&mut s.w, &mut s.b],
    )
}

fn relu_check(rng: &mut Rng) -> Result<Box<dyn GradProblem>> {
    probed(
        None::<Tensor<f64>>,
        away_from_zero(&[7, 4], rng),
        rng,
        |s, x| {
            let y = relu_forward(x);
            *s = Some(y.clone());
            Ok(y)
        },
        |s, dy| relu_backward(s.as_ref().unwrap(), dy),
        no_params,
    )
}

fn batch_norm_check(rng: &mut Rng, mode: NormMode) -> Result<Box<dyn GradProblem>> {
    let mut bn = BatchNorm::<f64>::new("bn", 3);
    bn.gamma.value = uniform(&[3], 1.0, rng).map(|g| g + 1.5);
    bn.beta.value = uniform(&[3], 1.0, rng);
    bn.running_mean = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
    bn.running_var = (0..3).map(|_| rng.gen_range(0.5..2.0)).collect();
    bn.mode = mode;
    probed(
        bn,
        uniform(&[9, 3], 2.0, rng),
        rng,
        |s, x| s.forward(x),
        |s, dy| s.backward(dy),
        module_params,
    )
}

fn segment_max_check(rng: &mut Rng) -> Result<Box<dyn GradProblem>> {
    let ids: Vec<usize> = (0..12).map(|_| rng.gen_range(0..4)).collect();
    probed(
        (ids, None::<SegmentMax<f64>>),
        uniform(&[12, 3], 1.0, rng),
        rng,
        |s, x| {
            let r = segment_max_forward(x, &s.0, 5)?;
            let y = r.output.clone();
            s.1 = Some(r);
            Ok(y)
        },
        |s, dy| segment_max_backward(&s.1.as_ref().unwrap().argmax, s.0.len(), dy),
        no_params,
    )
}

fn conv2d_check(rng: &mut Rng, stride: usize) -> Result<Box<dyn GradProblem>> {
    struct S {
        kernel: Param<f64>,
        bias: Param<f64>,
        stride: usize,
        cols: Option<Tensor<f64>>,
    }
    let state = S {
        kernel: Param::new("kernel", uniform(&[3, 3, 2, 3], 0.5, rng)),
        bias: Param::new("bias", uniform(&[3], 0.5, rng)),
        stride,
        cols: None,
    };
    probed(
        state,
        uniform(&[8, 8, 2], 1.0, rng),
        rng,
        |s, x| {
            let (y, cols) = conv2d_forward(x, &s.kernel.value, Some(&s.bias.value), s.stride)?;
            s.cols = Some(cols);
            Ok(y)
        },
        |s, dy| {
            let (dx, dk, db) =
                conv2d_backward(s.cols.as_ref().unwrap(), (8, 8, 2), &s.kernel.value, s.stride, dy);
            s.kernel.grad.add_assign(&dk);
            s.bias.grad.add_assign(&db);
            dx
        },
        |s| vec![&mut s.kernel, &mut s.bias],
    )
}

fn concat_check(rng: &mut Rng) -> Result<Box<dyn GradProblem>> {
    probed(
        Param::new("rhs", uniform(&[4, 4, 3], 1.0, rng)),
        uniform(&[4, 4, 2], 1.0, rng),
        rng,
        |s, x| concat_channels(x, &s.value),
        |s, dy| {
            s.grad.add_assign(&slice_channels(dy, 2, 3));
            slice_channels(dy, 0, 2)
        },
        |s| vec![s],
    )
}

fn upsample_check(rng: &mut Rng) -> Result<Box<dyn GradProblem>> {
    probed(
        (),
        uniform(&[3, 4, 2], 1.0, rng),
        rng,
        |_, x| upsample2x_forward(x),
        |_, dy| upsample2x_backward(dy).expect("even map"),
        no_params,
    )
}

struct GeomState {
    positions: Vec<[f64; 2]>,
    grid: GridSpec,
    anchors: AnchorSet,
    rows: Vec<usize>,
}

fn geom_state(rng: &mut Rng, n: usize) -> Result<GeomState> {
    let grid = GridSpec::centered(2.0, 0.5)?;
    // a few points fall outside the grid on purpose
    let positions = random_points(n, 2.4, rng);
    let anchors = anchors_from_positions(&positions, &grid);
    let rows = anchors.in_grid_points();
    Ok(GeomState {
        positions,
        grid,
        anchors,
        rows,
    })
}

fn augment_check(rng: &mut Rng) -> Result<Box<dyn GradProblem>> {
    let state = geom_state(rng, 20)?;
    probed(
        state,
        uniform(&[20, 3], 1.0, rng),
        rng,
        |s, x| {
            let centroids = centroids_from_positions(&s.positions, &s.anchors);
            Ok(augment(&s.positions, x, &s.anchors, &centroids).features)
        },
        |s, dy| augment_backward(dy, &s.rows, s.positions.len(), 3),
        no_params,
    )
}

fn grid_transfer_check(rng: &mut Rng) -> Result<Box<dyn GradProblem>> {
    let state = geom_state(rng, 20)?;
    let na = state.anchors.len();
    probed(
        state,
        uniform(&[na, 3], 1.0, rng),
        rng,
        |s, x| Ok(grid_transfer(x, &s.anchors, &s.grid)?.data),
        |s, dy| grid_gather(dy, &s.anchors, &s.grid),
        no_params,
    )
}

fn kpconv_check(rng: &mut Rng, anchor_mode: bool) -> Result<Box<dyn GradProblem>> {
    struct S {
        conv: KpConv<f64>,
        inputs: Vec<[f64; 2]>,
        outputs: Vec<[f64; 2]>,
    }
    let rho = RADIUS_TO_INFLUENCE * 0.6;
    let layout = make_layout(7, rho)?;
    let inputs = random_points(24, 2.0, rng);
    let outputs = if anchor_mode {
        random_points(9, 2.0, rng)
    } else {
        inputs.clone()
    };
    let conv = KpConv::new("kpconv", layout, uniform(&[7, 4, 5], 1.0, rng))?;
    probed(
        S { conv, inputs, outputs },
        uniform(&[24, 4], 1.0, rng),
        rng,
        |s, x| {
            let nb = radius_neighbors(&s.outputs, &s.inputs, s.conv.layout.radius);
            s.conv.forward(&s.outputs, &s.inputs, x, &nb)
        },
        |s, dy| s.conv.backward(dy),
        |s| s.conv.params_mut(),
    )
}

fn small_encoder_config(kind: EncoderKind) -> EncoderConfig {
    EncoderConfig {
        kind,
        f_out: 4,
        kernel_points: 5,
        rho_k: 0.6,
        use_batch_norm: true,
    }
}

fn encoder_check(rng: &mut Rng, kind: EncoderKind) -> Result<Box<dyn GradProblem>> {
    let geom = geom_state(rng, 30)?;
    let cfg = small_encoder_config(kind);
    let input = uniform(&[30, 3], 1.0, rng);
    match kind {
        EncoderKind::Pillars => {
            let mut e = PillarsEncoder::<f64>::new("pillars", 3, &cfg, rng);
            e.set_norm_mode(NormMode::Identity);
            jitter_biases(&mut e, rng);
            probed(
                (e, geom),
                input,
                rng,
                |(e, g), x| Ok(e.forward(&g.positions, x, &g.grid)?.data),
                |(e, _), dy| e.backward(dy),
                |(e, _)| e.params_mut(),
            )
        }
        EncoderKind::Kpbev => {
            let mut e = KpbevEncoder::<f64>::new("kpbev", 3, &cfg, rng)?;
            e.set_norm_mode(NormMode::Identity);
            jitter_biases(&mut e, rng);
            probed(
                (e, geom),
                input,
                rng,
                |(e, g), x| Ok(e.forward(&g.positions, x, &g.grid)?.data),
                |(e, _), dy| e.backward(dy),
                |(e, _)| e.params_mut(),
            )
        }
    }
}

fn preprocess_check(rng: &mut Rng) -> Result<Box<dyn GradProblem>> {
    let positions = random_points(20, 2.0, rng);
    let cfg = EncoderConfig {
        rho_k: 1.0,
        ..small_encoder_config(EncoderKind::Kpbev)
    };
    let mut stack = KpConvStack::<f64>::new("preprocess", 5, &cfg, rng)?;
    stack.set_norm_mode(NormMode::Identity);
    jitter_biases(&mut stack, rng);
    probed(
        (stack, positions),
        uniform(&[20, 5], 1.0, rng),
        rng,
        |(s, p), x| s.forward(p, x),
        |(s, _), dy| s.backward(dy),
        |(s, _)| s.params_mut(),
    )
}

fn fusion_check(rng: &mut Rng) -> Result<Box<dyn GradProblem>> {
    probed(
        Param::new("rendered", uniform(&[4, 4, 3], 1.0, rng)),
        uniform(&[4, 4, 2], 1.0, rng),
        rng,
        |s, x| Ok(fuse_into_backbone(std::slice::from_ref(x), std::slice::from_ref(&s.value))?.remove(0)),
        |s, dy| {
            let (db, dr) = split_fused(dy, 2);
            s.grad.add_assign(&dr);
            db
        },
        |s| vec![s],
    )
}

/// Flattens per-scale maps into one vector and back.
fn flatten(maps: &[Tensor<f64>]) -> Tensor<f64> {
    let data: Vec<f64> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
    let n = data.len();
    Tensor::from_vec(&[n], data).expect("flat length")
}

fn unflatten(flat: &Tensor<f64>, shapes: &[Vec<usize>]) -> Vec<Tensor<f64>> {
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let len: usize = s.iter().product();
            let t = Tensor::from_vec(s, flat.data()[offset..offset + len].to_vec()).expect("shape");
            offset += len;
            t
        })
        .collect()
}

fn multiscale_encoder_check(rng: &mut Rng) -> Result<Box<dyn GradProblem>> {
    let scales = derive_scales(&GridSpec::centered(4.0, 0.5)?)?;
    let mut enc = MultiScaleEncoder::<f64>::new(
        "render",
        3,
        &small_encoder_config(EncoderKind::Kpbev),
        scales,
        true,
        rng,
    )?;
    enc.set_norm_mode(NormMode::Identity);
    jitter_biases(&mut enc, rng);
    let positions = random_points(30, 4.0, rng);
    probed(
        (enc, positions, Vec::<Vec<usize>>::new()),
        uniform(&[30, 3], 1.0, rng),
        rng,
        |(e, p, shapes), x| {
            let maps: Vec<Tensor<f64>> = e.forward(p, x)?.maps.into_iter().map(|m| m.data).collect();
            *shapes = maps.iter().map(|m| m.shape().to_vec()).collect();
            Ok(flatten(&maps))
        },
        |(e, _, shapes), dy| e.backward(&unflatten(dy, shapes)),
        |(e, _, _)| e.params_mut(),
    )
}

fn backbone_check(rng: &mut Rng) -> Result<Box<dyn GradProblem>> {
    let cfg = BackboneConfig {
        channels: [3, 4, 4, 3],
        use_batch_norm: true,
    };
    let rendered = [2, 2, 2, 2];
    let mut bb = MiniBackbone::<f64>::new(&cfg, rendered, rng)?;
    bb.set_norm_mode(NormMode::Identity);
    jitter_biases(&mut bb, rng);
    unit_head(&mut bb, rng);
    let shapes: Vec<Vec<usize>> = (0..4).map(|i| vec![16 >> i, 16 >> i, 2]).collect();
    let input = flatten(&shapes.iter().map(|s| uniform(s, 1.0, rng)).collect::<Vec<_>>());
    probed(
        (bb, shapes),
        input,
        rng,
        |(bb, shapes), x| bb.forward(&unflatten(x, shapes)),
        |(bb, _), dy| flatten(&bb.backward(dy)),
        |(bb, _)| bb.params_mut(),
    )
}

fn loss_check(rng: &mut Rng) -> Result<Box<dyn GradProblem>> {
    let grid = GridSpec::centered(4.0, 2.0)?;
    let boxes = vec![
        OrientedBox::new([1.2, 0.7], 1.8, 4.4, 0.4),
        OrientedBox::new([-2.6, -1.1], 1.7, 4.9, -2.0),
    ];
    let targets = Targets::build(&boxes, &grid);
    struct S {
        targets: Targets,
        grad: Option<Tensor<f64>>,
    }
    // the probe multiplies a scalar loss, so the objective stays the loss up to scale
    probed(
        S { targets, grad: None },
        uniform(&[4, 4, crate::detect::HEAD_CHANNELS], 2.0, rng),
        rng,
        |s, x| {
            let (v, g) = detection_loss(x, &s.targets, &LossConfig::default())?;
            s.grad = Some(g);
            Tensor::from_vec(&[1], vec![v.total])
        },
        |s, dy| {
            let mut g = s.grad.clone().unwrap();
            g.scale(dy.data()[0]);
            g
        },
        no_params,
    )
}

fn detector_check(rng: &mut Rng) -> Result<Box<dyn GradProblem>> {
    let mut cfg = DetectorConfig::preset(Architecture::KpPillarsBev, true);
    cfg.half_extent = 4.0;
    cfg.f_out = 3;
    cfg.kernel_points = 5;
    cfg.backbone_channels = [3, 3, 3, 3];
    let mut det = Detector::<f64>::new(&cfg, rng)?;
    det.set_norm_mode(NormMode::Identity);
    jitter_biases(&mut det, rng);
    unit_head(&mut det.backbone, rng);
    let positions = random_points(64, 4.0, rng);
    probed(
        (det, positions),
        uniform(&[64, 5], 1.0, rng),
        rng,
        |(d, p), x| d.forward_features(p, x),
        |(d, _), dy| d.backward(dy),
        |(d, _)| d.params_mut(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_names_roundtrip() {
        for n in Scope::NAMES {
            assert_eq!(n.parse::<Scope>().unwrap().to_string(), n);
        }
        assert!("nope".parse::<Scope>().is_err());
    }

    #[test]
    fn autodiff_scope_passes() {
        let rows = run_suite(Scope::Autodiff, 0).unwrap();
        assert_eq!(rows.len(), 9);
        for r in &rows {
            assert!(r.passed, "{}: {}", r.op, r.max_rel_error);
        }
    }
}

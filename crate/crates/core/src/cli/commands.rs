use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::Serialize;

use super::{boxes_csv, fmap, RunConfig};
use crate::autodiff::{Module, NormMode, Tensor};
use crate::checks::{self, Scope};
use crate::detect::{self, Detector, DetectorConfig, EvalResult, FrameBox, DISTANCE_THRESHOLDS};
use crate::encoders::{Encoder, EncoderKind, FeatureMap};
use crate::error::{Error, Result};
use crate::geom::{anchors_from_positions, radius_neighbors, GridSpec, PointCloud};
use crate::kpconv::ConvolutionCounts;
use crate::rng;

/// What one rendering did at one scale.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScaleStats {
    pub scale: usize,
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
    pub in_grid_points: usize,
    pub anchors: usize,
    /// Kernel influence radius, kpbev only.
    pub rho_k: Option<f64>,
    /// Neighborhood radius, kpbev only.
    pub neighbor_radius: Option<f64>,
    pub convolutions: Option<ConvolutionCounts>,
    pub reduction: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RenderStats {
    pub n_in: usize,
    pub architecture: String,
    pub scales: Vec<ScaleStats>,
    pub wall_time_s: f64,
}

fn scale_stats(i: usize, encoder: &Encoder<f32>, grid: &GridSpec, rho_k: f64, positions: &[[f64; 2]]) -> ScaleStats {
    let anchors = anchors_from_positions(positions, grid);
    let in_grid = anchors.in_grid_points().len();
    let (rho, radius, counts) = match encoder {
        Encoder::Kpbev(e) => (
            Some(rho_k),
            Some(e.radius()),
            Some(ConvolutionCounts::new(anchors.len(), in_grid)),
        ),
        Encoder::Pillars(_) => (None, None, None),
    };
    ScaleStats {
        scale: i,
        cell_size: grid.cell_size,
        width: grid.width,
        height: grid.height,
        in_grid_points: in_grid,
        anchors: anchors.len(),
        rho_k: rho,
        neighbor_radius: radius,
        convolutions: counts,
        reduction: counts.map(|c| c.reduction()),
    }
}

/// Inference-mode rendering of `pc` with the model initialised from `cfg.seed`.
pub fn render_maps(pc: &PointCloud, cfg: &RunConfig) -> Result<(Vec<FeatureMap<f32>>, Vec<ScaleStats>)> {
    cfg.validate()?;
    let mut det = Detector::<f32>::new(&cfg.detector, &mut rng::stream(cfg.seed, "init"))?;
    det.set_norm_mode(NormMode::Eval);
    let mut features: Tensor<f32> = pc.features_tensor();
    if let Some(p) = det.preprocess.as_mut() {
        features = p.forward(pc.positions(), &features)?;
    }
    let rendering = det.encoder.forward(pc.positions(), &features)?;
    let stats = det
        .encoder
        .encoders
        .iter()
        .zip(&det.encoder.scales.grids)
        .zip(&rendering.radii)
        .enumerate()
        .map(|(i, ((e, g), &r))| scale_stats(i, e, g, r, pc.positions()))
        .collect();
    for m in &rendering.maps {
        if !m.data.all_finite() {
            return Err(Error::Numerical("rendered map has non-finite values".into()));
        }
    }
    Ok((rendering.maps, stats))
}

/// Writes `scale{i}.fmap` per rendered scale and `render_stats.json`.
pub fn render(input: &Path, cfg: &RunConfig, out: &Path) -> Result<RenderStats> {
    let start = Instant::now();
    let pc = PointCloud::load_csv(input)?;
    let (maps, scales) = render_maps(&pc, cfg)?;
    fs::create_dir_all(out)?;
    for (i, m) in maps.iter().enumerate() {
        fmap::write(&out.join(format!("scale{i}.fmap")), m)?;
    }
    let stats = RenderStats {
        n_in: pc.len(),
        architecture: cfg.detector.arch().to_string(),
        scales,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    fs::write(out.join("render_stats.json"), serde_json::to_string_pretty(&stats)? + "\n")?;
    Ok(stats)
}

/// The formatted table and whether every check passed.
pub fn gradcheck(scope: Scope, seed: u64) -> Result<(String, bool)> {
    let rows = checks::run_suite(scope, seed)?;
    let ok = rows.iter().all(|r| r.passed);
    Ok((checks::format_table(&rows), ok))
}

#[derive(Clone, Debug)]
pub struct BenchArgs {
    pub points: usize,
    pub encoder: EncoderKind,
    pub multiscale: bool,
    pub preprocessing: bool,
    pub repeat: usize,
    pub seed: u64,
    /// Grid, channel and radius settings; encoder, preprocessing and
    /// multiscale come from the fields above.
    pub detector: DetectorConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct Timing {
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl Timing {
    /// Nearest-rank percentiles.
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |q: f64| s[((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Self {
            median_ms: rank(0.5),
            p95_ms: rank(0.95),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchStage {
    pub stage: String,
    #[serde(flatten)]
    pub timing: Timing,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub points: usize,
    pub architecture: String,
    pub multiscale: bool,
    pub repeat: usize,
    pub threads: usize,
    pub stages: Vec<BenchStage>,
    pub scales: Vec<ScaleStats>,
}

/// Uniform points over `grid` with plausible sensor features.
pub fn random_cloud(n: usize, grid: &GridSpec, seed: u64) -> Result<PointCloud> {
    let mut r = rng::stream(seed, "bench");
    let points: Vec<[f64; 5]> = (0..n)
        .map(|_| {
            let x = r.gen_range(grid.x_min..grid.x_max);
            let y = r.gen_range(grid.y_min..grid.y_max);
            [x, y, r.gen_range(-5.0..5.0), r.gen_range(-10.0..20.0), r.gen_range(0.0..0.2)]
        })
        .collect();
    PointCloud::from_sensor(&points)
}

pub fn bench(args: &BenchArgs) -> Result<BenchReport> {
    if args.repeat == 0 {
        return Err(Error::Config("--repeat must be at least 1".into()));
    }
    let cfg = DetectorConfig {
        encoder: args.encoder,
        preprocessing: args.preprocessing,
        multiscale: args.multiscale,
        ..args.detector.clone()
    };
    let mut det = Detector::<f32>::new(&cfg, &mut rng::stream(args.seed, "init"))?;
    det.set_norm_mode(NormMode::Eval);
    let grid0 = det.encoder.scales.grids[0];
    let pc = random_cloud(args.points, &grid0, args.seed)?;
    let positions = pc.positions();
    let raw: Tensor<f32> = pc.features_tensor();
    let nscales = det.encoder.encoders.len();

    let mut names = Vec::new();
    if cfg.preprocessing {
        names.push("preprocess".to_string());
    }
    if cfg.encoder == EncoderKind::Kpbev {
        names.push("neighbors_scale0".to_string());
    }
    names.extend((0..nscales).map(|i| format!("render_scale{i}")));
    names.push("render_total".to_string());
    let mut samples = vec![Vec::with_capacity(args.repeat); names.len()];

    for _ in 0..args.repeat {
        let mut col = 0;
        let mut push = |v: f64, col: &mut usize| {
            samples[*col].push(v);
            *col += 1;
        };
        let total = Instant::now();
        let features = match det.preprocess.as_mut() {
            Some(p) => {
                let t = Instant::now();
                let f = p.forward(positions, &raw)?;
                push(ms(t), &mut col);
                f
            }
            None => raw.clone(),
        };
        if let Encoder::Kpbev(e) = &det.encoder.encoders[0] {
            let anchors = anchors_from_positions(positions, &grid0);
            let in_points: Vec<[f64; 2]> = anchors.in_grid_points().iter().map(|&i| positions[i]).collect();
            let t = Instant::now();
            std::hint::black_box(radius_neighbors(&anchors.positions, &in_points, e.radius()));
            push(ms(t), &mut col);
        }
        let grids = det.encoder.scales.grids.clone();
        for (e, g) in det.encoder.encoders.iter_mut().zip(&grids) {
            let t = Instant::now();
            std::hint::black_box(e.forward(positions, &features, g)?);
            push(ms(t), &mut col);
        }
        push(ms(total), &mut col);
    }
    let scales = det
        .encoder
        .encoders
        .iter()
        .zip(&det.encoder.scales.grids)
        .zip(&det.encoder.radii)
        .enumerate()
        .map(|(i, ((e, g), &r))| scale_stats(i, e, g, r, positions))
        .collect();
    Ok(BenchReport {
        points: args.points,
        architecture: cfg.arch().to_string(),
        multiscale: cfg.multiscale,
        repeat: args.repeat,
        threads: rayon::current_num_threads(),
        stages: names
            .into_iter()
            .zip(&samples)
            .map(|(stage, s)| BenchStage {
                stage,
                timing: Timing::from_samples(s),
            })
            .collect(),
        scales,
    })
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// AP per distance threshold and their mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub thresholds: Vec<f64>,
    pub ap: Vec<f64>,
    pub map: f64,
    pub no_ground_truth: bool,
    pub predictions: usize,
    pub ground_truth: usize,
}

impl EvalSummary {
    pub fn new(r: &EvalResult, predictions: usize, ground_truth: usize) -> Self {
        Self {
            thresholds: r.per_threshold.iter().map(|t| t.threshold).collect(),
            ap: r.aps(),
            map: r.map,
            no_ground_truth: r.no_ground_truth,
            predictions,
            ground_truth,
        }
    }
}

pub fn eval_boxes(pred: &[FrameBox], gt: &[FrameBox]) -> EvalSummary {
    EvalSummary::new(&detect::evaluate(pred, gt, &DISTANCE_THRESHOLDS), pred.len(), gt.len())
}

pub fn eval_files(pred: &Path, gt: &Path) -> Result<EvalSummary> {
    let pred = boxes_csv::load(pred)?;
    let gt = boxes_csv::load(gt)?;
    if pred.iter().any(|b| b.bbox.score.is_none()) {
        return Err(Error::Parse("every prediction needs a score".into()));
    }
    Ok(eval_boxes(&pred, &gt))
}

#[derive(Clone, Debug)]
pub struct TrainDemoArgs {
    pub config: RunConfig,
    pub out: PathBuf,
}

/// Trains, then writes `config.json`, `metrics.jsonl`, `eval.json`,
/// `predictions.csv` and `ground_truth.csv`. Progress with timings goes to
/// `progress` only, so the files are reproducible.
pub fn train_demo(args: &TrainDemoArgs, mut progress: impl FnMut(&str)) -> Result<EvalSummary> {
    let cfg = &args.config;
    cfg.validate()?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("config.json"), cfg.to_json())?;
    let start = Instant::now();
    let mut metrics = String::new();
    let outcome = detect::train::<f32>(&cfg.detector, &cfg.scene, &cfg.train, cfg.seed, |e| {
        let line = serde_json::to_string(e).expect("epoch log serializes");
        progress(&format!("{line} ({:.1}s)", start.elapsed().as_secs_f64()));
        metrics.push_str(&line);
        metrics.push('\n');
    })?;
    fs::write(args.out.join("metrics.jsonl"), metrics)?;
    let ev = &outcome.evaluation;
    let summary = EvalSummary::new(&ev.result, ev.predictions.len(), ev.ground_truth.len());
    fs::write(args.out.join("eval.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    fs::write(args.out.join("predictions.csv"), boxes_csv::to_csv(&ev.predictions))?;
    fs::write(args.out.join("ground_truth.csv"), boxes_csv::to_csv(&ev.ground_truth))?;
    Ok(summary)
}

//! Mini-batch training on synthetic scenes with deterministic reduction.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalResult, FrameBox, DISTANCE_THRESHOLDS};
use super::head::{decode_boxes, detection_loss, LossConfig, LossValue, Targets};
use super::model::{Detector, DetectorConfig};
use super::scene::{generate_scenes, SceneConfig, SyntheticScene};
use crate::autodiff::{Adam, AdamConfig, Module, NormMode};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            train_scenes: 200,
            eval_scenes: 50,
            epochs: 30,
            batch_size: 8,
            learning_rate: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            score_threshold: 0.05,
            nms_iou: 0.5,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_scenes == 0 || self.batch_size == 0 {
            return Err(Error::Config("train_scenes and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("score_threshold and nms_iou must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub ap4: f64,
    pub map: f64,
}

/// Detections of one evaluation pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub result: EvalResult,
    pub predictions: Vec<FrameBox>,
    pub ground_truth: Vec<FrameBox>,
}

#[derive(Debug)]
pub struct TrainOutcome<T> {
    pub model: Detector<T>,
    pub log: Vec<EpochLog>,
    pub evaluation: Evaluation,
}

/// Frame ids are the scene indices.
pub fn ground_truth(scenes: &[SyntheticScene]) -> Vec<FrameBox> {
    scenes
        .iter()
        .flat_map(|s| {
            s.boxes.iter().map(move |b| FrameBox {
                frame: s.index,
                bbox: b.clone(),
            })
        })
        .collect()
}

/// Runs `model` in inference mode on every scene and scores the detections.
pub fn evaluate_model<T: Real>(
    model: &Detector<T>,
    scenes: &[SyntheticScene],
    score_threshold: f64,
    nms_iou: f64,
) -> Result<Evaluation> {
    let per_scene = scenes
        .par_iter()
        .map(|s| {
            let mut m = model.clone();
            m.set_norm_mode(NormMode::Eval);
            let head = m.forward(&s.cloud)?;
            let boxes = decode_boxes(&head, m.head_grid(), score_threshold, nms_iou)?;
            Ok(boxes
                .into_iter()
                .map(|bbox| FrameBox { frame: s.index, bbox })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let predictions: Vec<FrameBox> = per_scene.into_iter().flatten().collect();
    let ground_truth = ground_truth(scenes);
    Ok(Evaluation {
        result: evaluate(&predictions, &ground_truth, &DISTANCE_THRESHOLDS),
        predictions,
        ground_truth,
    })
}

/// Loss of the freshly initialised model on one scene, in training mode.
pub fn initial_loss<T: Real>(model: &Detector<T>, scene: &SyntheticScene, loss: &LossConfig) -> Result<LossValue> {
    let mut m = model.clone();
    m.set_norm_mode(NormMode::Train);
    let head = m.forward(&scene.cloud)?;
    Ok(detection_loss(&head, &Targets::build(&scene.boxes, m.head_grid()), loss)?.0)
}

/// Scene streams: training scenes are indices `0..train`, evaluation scenes
/// follow them, so the two sets never overlap.
pub fn datasets(scene_cfg: &SceneConfig, train_cfg: &TrainConfig, seed: u64) -> (Vec<SyntheticScene>, Vec<SyntheticScene>) {
    let train = generate_scenes(scene_cfg, seed, 0, train_cfg.train_scenes);
    let eval = generate_scenes(scene_cfg, seed, train_cfg.train_scenes as u64, train_cfg.eval_scenes);
    (train, eval)
}

pub fn train<T: Real>(
    det_cfg: &DetectorConfig,
    scene_cfg: &SceneConfig,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    scene_cfg.validate()?;
    let (train_set, eval_set) = datasets(scene_cfg, cfg, seed);
    let mut model = Detector::<T>::new(det_cfg, &mut rng::stream(seed, "init"))?;
    let targets: Vec<Targets> = train_set
        .iter()
        .map(|s| Targets::build(&s.boxes, model.head_grid()))
        .collect();
    let mut adam = Adam::new(cfg.adam());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::substream(seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            loss_sum += train_step(&mut model, &mut adam, batch, &train_set, &targets, &cfg.loss)?;
        }
        let eval = evaluate_model(&model, &eval_set, cfg.score_threshold, cfg.nms_iou)?;
        let entry = EpochLog {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            ap4: eval.result.ap4(),
            map: eval.result.map,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    let evaluation = evaluate_model(&model, &eval_set, cfg.score_threshold, cfg.nms_iou)?;
    Ok(TrainOutcome {
        model,
        log,
        evaluation,
    })
}

/// One Adam update on the mean loss of `batch`; returns the summed loss.
fn train_step<T: Real>(
    model: &mut Detector<T>,
    adam: &mut Adam<T>,
    batch: &[usize],
    scenes: &[SyntheticScene],
    targets: &[Targets],
    loss_cfg: &LossConfig,
) -> Result<f64> {
    model.zero_grad();
    model.set_norm_mode(NormMode::Train);
    let workers = batch
        .par_iter()
        .map(|&i| {
            let mut w = model.clone();
            let head = w.forward(&scenes[i].cloud)?;
            let (loss, grad) = detection_loss(&head, &targets[i], loss_cfg).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("scene {}: {m}", scenes[i].index)),
                other => other,
            })?;
            w.backward(&grad);
            Ok((w, loss.total))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for (w, loss) in &workers {
        model.absorb(w);
        total += loss;
    }
    drop(workers);
    let scale = T::of(1.0 / batch.len() as f64);
    for p in model.params_mut() {
        p.grad.scale(scale);
        if !p.grad.all_finite() {
            return Err(Error::Numerical(format!("non-finite gradient in {}", p.name)));
        }
    }
    adam.step(model.params_mut());
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::model::Architecture;

    fn tiny() -> (DetectorConfig, SceneConfig, TrainConfig) {
        let mut det = DetectorConfig::preset(Architecture::Kpbev, false);
        det.half_extent = 8.0;
        det.f_out = 4;
        det.backbone_channels = [4, 4, 4, 4];
        let scene = SceneConfig {
            half_extent: 8.0,
            min_cars: 1,
            max_cars: 2,
            clutter_rate: 5.0,
            ..SceneConfig::default()
        };
        let train = TrainConfig {
            train_scenes: 4,
            eval_scenes: 2,
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        (det, scene, train)
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let (det, scene, mut train_cfg) = tiny();
        train_cfg.epochs = 0;
        let out = train::<f32>(&det, &scene, &train_cfg, 5, |_| {}).unwrap();
        let fresh = Detector::<f32>::new(&det, &mut rng::stream(5, "init")).unwrap();
        for (a, b) in out.model.params().iter().zip(fresh.params()) {
            assert_eq!(a.value, b.value);
        }
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (det, scene, train_cfg) = tiny();
        let a = train::<f32>(&det, &scene, &train_cfg, 9, |_| {}).unwrap();
        let b = train::<f32>(&det, &scene, &train_cfg, 9, |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        for (x, y) in a.model.params().iter().zip(b.model.params()) {
            assert_eq!(x.value, y.value);
        }
        assert_eq!(a.evaluation.predictions, b.evaluation.predictions);
    }

    #[test]
    fn initial_loss_is_reproducible() {
        let (det, scene, train_cfg) = tiny();
        let (set, _) = datasets(&scene, &train_cfg, 2);
        let m = Detector::<f32>::new(&det, &mut rng::stream(2, "init")).unwrap();
        let a = initial_loss(&m, &set[0], &train_cfg.loss).unwrap();
        let m2 = Detector::<f32>::new(&det, &mut rng::stream(2, "init")).unwrap();
        let b = initial_loss(&m2, &set[0], &train_cfg.loss).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }

    #[test]
    fn invalid_config_rejected() {
        let (det, scene, mut train_cfg) = tiny();
        train_cfg.batch_size = 0;
        assert!(matches!(train::<f32>(&det, &scene, &train_cfg, 0, |_| {}), Err(Error::Config(_))));
    }
}

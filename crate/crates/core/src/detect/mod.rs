//! Desk-scale detection harness around the grid encoders.

pub mod backbone;
pub mod boxes;
pub mod eval;
pub mod head;
pub mod model;
pub mod scene;
pub mod train;

pub use backbone::{BackboneConfig, MiniBackbone, HEAD_CHANNELS, HEAD_STRIDE};
pub use boxes::{nms, normalize_yaw, rotated_iou, OrientedBox, CAR};
pub use eval::{average_precision, evaluate, EvalResult, FrameBox, ThresholdResult, DISTANCE_THRESHOLDS};
pub use head::{decode_box, decode_boxes, detection_loss, encode_box, LossConfig, LossValue, Targets};
pub use model::{Architecture, Detector, DetectorConfig};
pub use scene::{generate_scene, generate_scenes, SceneConfig, SyntheticScene};
pub use train::{evaluate_model, train, EpochLog, Evaluation, TrainConfig, TrainOutcome};

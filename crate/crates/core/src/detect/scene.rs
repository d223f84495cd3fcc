//! Synthetic radar scenes: cars as rectangles seen from a sensor at the
//! origin, reflections on the sensor-facing edges, and uniform clutter.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::boxes::OrientedBox;
use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Scenes cover `[-half_extent, half_extent]²` around the sensor.
    pub half_extent: f64,
    pub min_cars: usize,
    pub max_cars: usize,
    /// Mean number of clutter points per scene.
    pub clutter_rate: f64,
    /// Standard deviation of the reflection position noise (m).
    pub position_noise: f64,
    /// Standard deviation of the radial velocity noise (m/s).
    pub velocity_noise: f64,
    pub max_speed: f64,
    pub min_reflections: usize,
    pub max_reflections: usize,
    /// Minimum center spacing between cars (m).
    pub min_separation: f64,
    /// Cars keep at least this distance to the sensor (m).
    pub sensor_clearance: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            half_extent: 20.0,
            min_cars: 3,
            max_cars: 8,
            clutter_rate: 30.0,
            position_noise: 0.1,
            velocity_noise: 0.1,
            max_speed: 15.0,
            min_reflections: 4,
            max_reflections: 12,
            min_separation: 6.0,
            sensor_clearance: 3.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.half_extent > 0.0) {
            return bad(format!("scene half_extent must be positive, got {}", self.half_extent));
        }
        if self.min_cars > self.max_cars || self.min_reflections > self.max_reflections {
            return bad("scene ranges must satisfy min <= max".into());
        }
        if self.min_reflections == 0 {
            return bad("every visible car needs at least one reflection".into());
        }
        for (name, v) in [
            ("clutter_rate", self.clutter_rate),
            ("position_noise", self.position_noise),
            ("velocity_noise", self.velocity_noise),
            ("max_speed", self.max_speed),
            ("min_separation", self.min_separation),
            ("sensor_clearance", self.sensor_clearance),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("scene {name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub cloud: PointCloud,
    pub boxes: Vec<OrientedBox>,
    /// Velocity of each box (m/s).
    pub velocities: Vec<[f64; 2]>,
    /// Set for boxes that received no reflection.
    pub occluded: Vec<bool>,
    pub seed: u64,
    pub index: u64,
}

pub const CAR_WIDTH: (f64, f64) = (1.6, 2.0);
pub const CAR_LENGTH: (f64, f64) = (4.0, 5.0);
pub const CAR_RCS: (f64, f64) = (0.0, 15.0);
pub const CLUTTER_RCS: (f64, f64) = (-15.0, 5.0);
pub const CLUTTER_VELOCITY: f64 = 2.0;
pub const TIME_OFFSET: f64 = 0.3;

/// Radial velocity of a target moving with `velocity` at `point`, seen from
/// a sensor at the origin: positive when receding.
pub fn radial_velocity(point: [f64; 2], velocity: [f64; 2]) -> f64 {
    let r = point[0].hypot(point[1]);
    if r == 0.0 {
        return 0.0;
    }
    (point[0] * velocity[0] + point[1] * velocity[1]) / r
}

/// Edges of `b` whose outward normal faces the sensor at the origin.
pub fn facing_edges(b: &OrientedBox) -> Vec<([f64; 2], [f64; 2])> {
    let c = b.corners();
    (0..4)
        .filter_map(|i| {
            let (p, q) = (c[i], c[(i + 1) % 4]);
            // CCW corners: the outward normal of edge p->q is (dy, -dx).
            let normal = [q[1] - p[1], p[0] - q[0]];
            let mid = [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])];
            let to_sensor = [-mid[0], -mid[1]];
            (normal[0] * to_sensor[0] + normal[1] * to_sensor[1] > 0.0).then_some((p, q))
        })
        .collect()
}

fn sample_on_edges(edges: &[([f64; 2], [f64; 2])], rng: &mut Rng) -> [f64; 2] {
    let lengths: Vec<f64> = edges
        .iter()
        .map(|(p, q)| (q[0] - p[0]).hypot(q[1] - p[1]))
        .collect();
    let total: f64 = lengths.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    for ((p, q), len) in edges.iter().zip(&lengths) {
        if pick <= *len {
            let t = pick / len;
            return [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])];
        }
        pick -= len;
    }
    edges.last().map(|e| e.1).unwrap_or([0.0, 0.0])
}

fn place_cars(cfg: &SceneConfig, rng: &mut Rng) -> (Vec<OrientedBox>, Vec<[f64; 2]>) {
    let count = rng.gen_range(cfg.min_cars..=cfg.max_cars);
    let margin = 0.5 * CAR_LENGTH.1 + 0.5;
    let lim = cfg.half_extent - margin;
    let mut boxes: Vec<OrientedBox> = Vec::with_capacity(count);
    let mut velocities = Vec::with_capacity(count);
    let mut attempts = 0;
    while boxes.len() < count && attempts < 1000 {
        attempts += 1;
        let center = [rng.gen_range(-lim..lim), rng.gen_range(-lim..lim)];
        if center[0].hypot(center[1]) < cfg.sensor_clearance
            || boxes
                .iter()
                .any(|b| (b.center[0] - center[0]).hypot(b.center[1] - center[1]) < cfg.min_separation)
        {
            continue;
        }
        let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let width = rng.gen_range(CAR_WIDTH.0..CAR_WIDTH.1);
        let length = rng.gen_range(CAR_LENGTH.0..CAR_LENGTH.1);
        let speed = rng.gen_range(0.0..cfg.max_speed);
        boxes.push(OrientedBox::new(center, width, length, yaw));
        velocities.push([speed * yaw.cos(), speed * yaw.sin()]);
    }
    (boxes, velocities)
}

/// Builds the scene for `(cfg, seed, index)`; deterministic in all three.
pub fn generate_scene(cfg: &SceneConfig, seed: u64, index: u64) -> SyntheticScene {
    let mut rng = rng::substream(seed, "scene", index);
    let (boxes, velocities) = place_cars(cfg, &mut rng);
    scene_from_boxes(cfg, boxes, velocities, &mut rng, seed, index)
}

/// Samples reflections and clutter for fixed boxes.
pub fn scene_from_boxes(
    cfg: &SceneConfig,
    boxes: Vec<OrientedBox>,
    velocities: Vec<[f64; 2]>,
    rng: &mut Rng,
    seed: u64,
    index: u64,
) -> SyntheticScene {
    let pos_noise = Normal::new(0.0, cfg.position_noise.max(0.0)).expect("finite noise");
    let vel_noise = Normal::new(0.0, cfg.velocity_noise.max(0.0)).expect("finite noise");
    let mut points: Vec<[f64; 5]> = Vec::new();
    let mut occluded = Vec::with_capacity(boxes.len());
    for (b, v) in boxes.iter().zip(&velocities) {
        let edges = facing_edges(b);
        if edges.is_empty() {
            occluded.push(true);
            continue;
        }
        occluded.push(false);
        let n = rng.gen_range(cfg.min_reflections..=cfg.max_reflections);
        for _ in 0..n {
            let p = sample_on_edges(&edges, rng);
            let vr = radial_velocity(p, *v) + vel_noise.sample(rng);
            let x = p[0] + pos_noise.sample(rng);
            let y = p[1] + pos_noise.sample(rng);
            let rcs = rng.gen_range(CAR_RCS.0..CAR_RCS.1);
            let dt = rng.gen_range(0.0..TIME_OFFSET);
            points.push([x, y, vr, rcs, dt]);
        }
    }
    let clutter = if cfg.clutter_rate > 0.0 {
        Poisson::new(cfg.clutter_rate).expect("positive rate").sample(rng) as usize
    } else {
        0
    };
    let h = cfg.half_extent;
    for _ in 0..clutter {
        points.push([
            rng.gen_range(-h..h),
            rng.gen_range(-h..h),
            rng.gen_range(-CLUTTER_VELOCITY..CLUTTER_VELOCITY),
            rng.gen_range(CLUTTER_RCS.0..CLUTTER_RCS.1),
            rng.gen_range(0.0..TIME_OFFSET),
        ]);
    }
    SyntheticScene {
        cloud: PointCloud::from_sensor(&points).expect("finite synthetic points"),
        boxes,
        velocities,
        occluded,
        seed,
        index,
    }
}

/// Scenes `first..first + count` of the `seed` stream.
pub fn generate_scenes(cfg: &SceneConfig, seed: u64, first: u64, count: usize) -> Vec<SyntheticScene> {
    (0..count as u64)
        .map(|i| generate_scene(cfg, seed, first + i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg, 11, 3);
        let b = generate_scene(&cfg, 11, 3);
        assert_eq!(a, b);
        assert_eq!(a.cloud.to_csv().unwrap(), b.cloud.to_csv().unwrap());
        assert_ne!(a, generate_scene(&cfg, 11, 4));
    }

    #[test]
    fn every_box_is_hit() {
        let cfg = SceneConfig::default();
        for i in 0..20 {
            let s = generate_scene(&cfg, 5, i);
            assert!(s.boxes.len() >= cfg.min_cars);
            assert!(s.occluded.iter().all(|o| !o));
            for b in &s.boxes {
                let hits = s
                    .cloud
                    .positions()
                    .iter()
                    .filter(|p| (p[0] - b.center[0]).hypot(p[1] - b.center[1]) < 3.5)
                    .count();
                assert!(hits >= 1);
            }
        }
    }

    fn noiseless() -> SceneConfig {
        SceneConfig {
            position_noise: 0.0,
            velocity_noise: 0.0,
            clutter_rate: 0.0,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn stationary_car_has_zero_radial_velocity() {
        let b = OrientedBox::new([10.0, 5.0], 1.8, 4.5, 0.3);
        let mut rng = rng::stream(1, "test");
        let s = scene_from_boxes(&noiseless(), vec![b], vec![[0.0, 0.0]], &mut rng, 1, 0);
        assert!(!s.cloud.is_empty());
        for i in 0..s.cloud.len() {
            assert_eq!(s.cloud.feature_row(i)[2], 0.0);
        }
    }

    #[test]
    fn radially_approaching_car() {
        // Car on the +x axis heading towards the sensor at 10 m/s.
        let b = OrientedBox::new([15.0, 0.0], 1.8, 4.5, std::f64::consts::PI);
        let mut rng = rng::stream(2, "test");
        let s = scene_from_boxes(&noiseless(), vec![b], vec![[-10.0, 0.0]], &mut rng, 2, 0);
        for i in 0..s.cloud.len() {
            let vr = s.cloud.feature_row(i)[2];
            assert!((vr + 10.0).abs() < 0.1, "vr = {vr}");
        }
    }

    #[test]
    fn facing_edges_point_at_sensor() {
        let b = OrientedBox::new([10.0, 0.0], 2.0, 4.0, 0.0);
        let edges = facing_edges(&b);
        assert_eq!(edges.len(), 1);
        let (p, q) = edges[0];
        assert!((p[0] - 8.0).abs() < 1e-12 && (q[0] - 8.0).abs() < 1e-12);
    }
}

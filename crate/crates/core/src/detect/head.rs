//! Dense center-cell head: box encoding, targets, decoding, and the
//! focal + smooth-L1 training loss with its gradient.

use serde::{Deserialize, Serialize};

use super::backbone::HEAD_CHANNELS;
use super::boxes::{nms, OrientedBox};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geom::GridSpec;
use crate::real::Real;

/// Reference car footprint the log-size channels are relative to.
pub const REFERENCE_SIZE: (f64, f64) = (1.8, 4.5);
/// Number of regression channels following the objectness logit.
pub const REGRESSION_CHANNELS: usize = 6;
const LOG_SIZE_LIMIT: f64 = 4.0;

/// Regression target of `b` relative to the head cell centered at `cell`.
pub fn encode_box(b: &OrientedBox, cell: [f64; 2], cell_size: f64) -> [f64; REGRESSION_CHANNELS] {
    [
        (b.center[0] - cell[0]) / cell_size,
        (b.center[1] - cell[1]) / cell_size,
        (b.width / REFERENCE_SIZE.0).ln(),
        (b.length / REFERENCE_SIZE.1).ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}

pub fn decode_box(reg: &[f64], cell: [f64; 2], cell_size: f64) -> OrientedBox {
    let lw = reg[2].clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT);
    let ll = reg[3].clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT);
    OrientedBox::new(
        [cell[0] + reg[0] * cell_size, cell[1] + reg[1] * cell_size],
        REFERENCE_SIZE.0 * lw.exp(),
        REFERENCE_SIZE.1 * ll.exp(),
        reg[4].atan2(reg[5]),
    )
}

#[derive(Clone, Debug)]
pub struct Targets {
    pub grid: GridSpec,
    /// Objectness label per head cell, row-major `(iy, ix)`.
    pub labels: Vec<bool>,
    /// `(cell, regression target)` for each positive cell.
    pub positives: Vec<(usize, [f64; REGRESSION_CHANNELS])>,
}

impl Targets {
    /// Each box claims the head cell holding its center; boxes outside the
    /// grid are dropped, and a cell already claimed keeps its first box.
    pub fn build(boxes: &[OrientedBox], head_grid: &GridSpec) -> Self {
        let mut labels = vec![false; head_grid.num_cells()];
        let mut positives = Vec::new();
        for b in boxes {
            let Some(c) = head_grid.cell_of(b.center) else {
                continue;
            };
            let idx = head_grid.linear(c);
            if labels[idx] {
                continue;
            }
            labels[idx] = true;
            positives.push((idx, encode_box(b, head_grid.cell_center(c), head_grid.cell_size)));
        }
        Self {
            grid: *head_grid,
            labels,
            positives,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Boxes from every cell scoring at least `threshold`, after rotated NMS.
pub fn decode_boxes<T: Real>(
    head: &Tensor<T>,
    grid: &GridSpec,
    threshold: f64,
    nms_iou: f64,
) -> Result<Vec<OrientedBox>> {
    check_head(head, grid)?;
    let mut out = Vec::new();
    for iy in 0..grid.height {
        for ix in 0..grid.width {
            let c = crate::geom::CellIndex { ix, iy };
            let row = head.row(grid.linear(c));
            let score = sigmoid(row[0].as_f64());
            if score <= threshold {
                continue;
            }
            let reg: Vec<f64> = row[1..=REGRESSION_CHANNELS].iter().map(|v| v.as_f64()).collect();
            out.push(decode_box(&reg, grid.cell_center(c), grid.cell_size).with_score(score));
        }
    }
    Ok(nms(&out, nms_iou))
}

fn check_head<T: Real>(head: &Tensor<T>, grid: &GridSpec) -> Result<()> {
    if head.shape() != [grid.height, grid.width, HEAD_CHANNELS] {
        return Err(Error::Shape(format!(
            "head {:?} does not match a {}x{} grid with {HEAD_CHANNELS} channels",
            head.shape(),
            grid.height,
            grid.width
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
    pub regression_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0 / 9.0,
            regression_weight: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub objectness: f64,
    pub regression: f64,
    pub positives: usize,
}

/// Focal loss over all cells plus smooth-L1 over positive cells, both
/// divided by `max(1, positives)`. Returns the loss and `dL/d head`.
pub fn detection_loss<T: Real>(
    head: &Tensor<T>,
    targets: &Targets,
    cfg: &LossConfig,
) -> Result<(LossValue, Tensor<T>)> {
    check_head(head, &targets.grid)?;
    let norm = targets.positives.len().max(1) as f64;
    let (a, g) = (cfg.focal_alpha, cfg.focal_gamma);
    let mut grad = Tensor::<T>::zeros(head.shape());
    let mut obj = 0.0;
    for (r, &label) in targets.labels.iter().enumerate() {
        let z = head.row(r)[0].as_f64();
        let p = sigmoid(z);
        let (l, dz) = if label {
            let log_p = -softplus(-z);
            let q = 1.0 - p;
            (-a * q.powf(g) * log_p, a * q.powf(g) * (g * p * log_p - q))
        } else {
            let log_q = -softplus(z);
            let q = 1.0 - p;
            (
                -(1.0 - a) * p.powf(g) * log_q,
                -(1.0 - a) * p.powf(g) * (g * q * log_q - p),
            )
        };
        obj += l;
        grad.row_mut(r)[0] = T::of(dz / norm);
    }
    let beta = cfg.smooth_l1_beta;
    let w = cfg.regression_weight;
    let mut reg = 0.0;
    for (r, target) in &targets.positives {
        let row = head.row(*r);
        let mut d_row = [0.0; REGRESSION_CHANNELS];
        for k in 0..REGRESSION_CHANNELS {
            let d = row[1 + k].as_f64() - target[k];
            let (l, dd) = if d.abs() < beta {
                (0.5 * d * d / beta, d / beta)
            } else {
                (d.abs() - 0.5 * beta, d.signum())
            };
            reg += l;
            d_row[k] = dd;
        }
        let out = grad.row_mut(*r);
        for k in 0..REGRESSION_CHANNELS {
            out[1 + k] = T::of(w * d_row[k] / norm);
        }
    }
    let value = LossValue {
        total: (obj + w * reg) / norm,
        objectness: obj / norm,
        regression: reg / norm,
        positives: targets.positives.len(),
    };
    if !value.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite detection loss {}", value.total)));
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn grid() -> GridSpec {
        GridSpec::centered(4.0, 2.0).unwrap()
    }

    #[test]
    fn encode_decode_roundtrip() {
        let b = OrientedBox::new([1.3, -0.4], 1.7, 4.6, 2.9);
        let cell = [1.0, -1.0];
        let d = decode_box(&encode_box(&b, cell, 2.0), cell, 2.0);
        assert!((d.center[0] - 1.3).abs() < 1e-12 && (d.center[1] + 0.4).abs() < 1e-12);
        assert!((d.width - 1.7).abs() < 1e-12 && (d.length - 4.6).abs() < 1e-12);
        assert!((d.yaw - b.yaw).abs() < 1e-12);
    }

    #[test]
    fn targets_claim_center_cell() {
        let g = grid();
        let boxes = [
            OrientedBox::new([1.0, 1.0], 1.8, 4.5, 0.0),
            OrientedBox::new([1.5, 1.5], 1.8, 4.5, 0.0),
            OrientedBox::new([9.0, 0.0], 1.8, 4.5, 0.0),
        ];
        let t = Targets::build(&boxes, &g);
        assert_eq!(t.positives.len(), 1);
        assert_eq!(t.labels.iter().filter(|&&l| l).count(), 1);
        assert_eq!(t.positives[0].0, 2 * 4 + 2);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let g = grid();
        let boxes = [
            OrientedBox::new([1.0, 1.0], 1.8, 4.5, 0.3),
            OrientedBox::new([-2.5, 0.5], 1.6, 4.2, -1.0),
        ];
        let t = Targets::build(&boxes, &g);
        let mut r = rng::stream(3, "gradcheck");
        let mut head =
            Tensor::<f64>::from_fn(&[g.height, g.width, HEAD_CHANNELS], |_| r.gen_range(-2.0..2.0));
        let cfg = LossConfig::default();
        let (_, grad) = detection_loss(&head, &t, &cfg).unwrap();
        for i in 0..head.len() {
            let x = head.data()[i];
            let h = 1e-6;
            head.data_mut()[i] = x + h;
            let lp = detection_loss(&head, &t, &cfg).unwrap().0.total;
            head.data_mut()[i] = x - h;
            let lm = detection_loss(&head, &t, &cfg).unwrap().0.total;
            head.data_mut()[i] = x;
            let num = (lp - lm) / (2.0 * h);
            let ana = grad.data()[i];
            assert!(
                crate::autodiff::gradcheck::relative_error(ana, num) < 1e-5,
                "entry {i}: {ana} vs {num}"
            );
        }
    }

    #[test]
    fn decode_applies_threshold_and_nms() {
        let g = grid();
        let mut head = Tensor::<f64>::zeros(&[g.height, g.width, HEAD_CHANNELS]);
        for r in 0..head.rows() {
            head.row_mut(r)[0] = -10.0;
            head.row_mut(r)[6] = 1.0;
        }
        // two neighbouring cells both pointing at the same car
        head.row_mut(2 * 4 + 2)[0] = 3.0;
        head.row_mut(2 * 4 + 1)[0] = 1.0;
        head.row_mut(2 * 4 + 1)[1] = 1.0;
        let out = decode_boxes(&head, &g, 0.1, 0.5).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].center[0] - 1.0).abs() < 1e-12);
        assert!((out[0].score.unwrap() - sigmoid(3.0)).abs() < 1e-12);
    }

    #[test]
    fn stable_sigmoid_extremes() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((softplus(-800.0)).abs() < 1e-300);
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
    }
}

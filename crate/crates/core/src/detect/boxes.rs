use std::cmp::Ordering;
use std::f64::consts::PI;

/// Oriented box; `length` runs along the heading `yaw`, `width` across it.
#[derive(Clone, Debug, PartialEq)]
pub struct OrientedBox {
    pub center: [f64; 2],
    pub width: f64,
    pub length: f64,
    pub yaw: f64,
    /// Confidence in `[0, 1]`; `None` for ground truth.
    pub score: Option<f64>,
    pub class: String,
}

pub const CAR: &str = "car";

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = yaw.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

impl OrientedBox {
    pub fn new(center: [f64; 2], width: f64, length: f64, yaw: f64) -> Self {
        Self {
            center,
            width,
            length,
            yaw: normalize_yaw(yaw),
            score: None,
            class: CAR.to_string(),
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn score_or_zero(&self) -> f64 {
        self.score.unwrap_or(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width * self.length
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (0.5 * self.length, 0.5 * self.width);
        let u = [c * hl, s * hl];
        let v = [-s * hw, c * hw];
        let [x, y] = self.center;
        [
            [x + u[0] - v[0], y + u[1] - v[1]],
            [x + u[0] + v[0], y + u[1] + v[1]],
            [x - u[0] + v[0], y - u[1] + v[1]],
            [x - u[0] - v[0], y - u[1] - v[1]],
        ]
    }

    pub fn center_distance(&self, other: &OrientedBox) -> f64 {
        (self.center[0] - other.center[0]).hypot(self.center[1] - other.center[1])
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    0.5 * twice.abs()
}

/// Sutherland-Hodgman clipping of `subject` by the convex CCW polygon `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Intersection over union of two oriented rectangles.
pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let reach = 0.5 * (a.width.hypot(a.length) + b.width.hypot(b.length));
    if a.center_distance(b) > reach {
        return 0.0;
    }
    let inter = polygon_area(&clip_convex(&a.corners(), &b.corners()));
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy suppression in descending score order; equal scores keep input order.
pub fn nms(boxes: &[OrientedBox], iou_threshold: f64) -> Vec<OrientedBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        boxes[j]
            .score_or_zero()
            .partial_cmp(&boxes[i].score_or_zero())
            .unwrap_or(Ordering::Equal)
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| rotated_iou(&boxes[k], &boxes[i]) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| boxes[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(x: f64, y: f64) -> OrientedBox {
        OrientedBox::new([x, y], 1.0, 1.0, 0.0)
    }

    #[test]
    fn yaw_normalization_range() {
        assert!((normalize_yaw(PI) - PI).abs() < 1e-15);
        assert!((normalize_yaw(-PI) - PI).abs() < 1e-15);
        assert!((normalize_yaw(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn iou_fixtures() {
        assert!((rotated_iou(&unit(0.0, 0.0), &unit(0.0, 0.0)) - 1.0).abs() < 1e-12);
        assert_eq!(rotated_iou(&unit(0.0, 0.0), &unit(3.0, 0.0)), 0.0);
        assert!((rotated_iou(&unit(0.0, 0.0), &unit(0.5, 0.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_of_rotated_square_in_itself() {
        // A square rotated 45 degrees inside the axis-aligned copy covers
        // the octagon of area 2(sqrt2 - 1) for unit squares.
        let a = unit(0.0, 0.0);
        let b = OrientedBox::new([0.0, 0.0], 1.0, 1.0, PI / 4.0);
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        let want = inter / (2.0 - inter);
        assert!((rotated_iou(&a, &b) - want).abs() < 1e-12);
    }

    #[test]
    fn nms_keeps_best_of_duplicates() {
        let boxes = vec![unit(0.0, 0.0).with_score(0.8), unit(0.0, 0.0).with_score(0.9)];
        let kept = nms(&boxes, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, Some(0.9));
    }

    #[test]
    fn nms_keeps_disjoint() {
        let boxes = vec![unit(0.0, 0.0).with_score(0.8), unit(5.0, 0.0).with_score(0.9)];
        assert_eq!(nms(&boxes, 0.5).len(), 2);
    }

    #[test]
    fn nms_chain() {
        // Boxes of length 4 shifted by 1: IoU(A,B) = IoU(B,C) = 3/5, IoU(A,C) = 1/3.
        let mk = |x: f64, s: f64| OrientedBox::new([x, 0.0], 1.0, 4.0, 0.0).with_score(s);
        let (a, b, c) = (mk(0.0, 0.9), mk(1.0, 0.8), mk(2.0, 0.7));
        assert!(rotated_iou(&a, &b) > 0.5 && rotated_iou(&b, &c) > 0.5);
        assert!(rotated_iou(&a, &c) < 0.5);
        let kept = nms(&[c.clone(), a.clone(), b], 0.5);
        assert_eq!(kept, vec![a, c]);
    }
}

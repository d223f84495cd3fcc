#![allow(dead_code)]

use kpbev::autodiff::Tensor;
use kpbev::detect::{FrameBox, OrientedBox};
use kpbev::geom::radius_neighbors;
use kpbev::kpconv::{make_layout, KpConv};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Exhaustive closed-ball search.
pub fn brute_neighbors(queries: &[[f64; 2]], points: &[[f64; 2]], r: f64) -> Vec<Vec<usize>> {
    queries
        .iter()
        .map(|q| {
            (0..points.len())
                .filter(|&i| {
                    let (dx, dy) = (points[i][0] - q[0], points[i][1] - q[1]);
                    dx * dx + dy * dy <= r * r
                })
                .collect()
        })
        .collect()
}

/// Points either on an integer lattice with radius 5, so many pairs sit at
/// exactly the radius (3-4-5 offsets), or continuous with a random radius.
pub fn neighbor_instance(r: &mut ChaCha8Rng) -> (Vec<[f64; 2]>, Vec<[f64; 2]>, f64) {
    let n = r.gen_range(0..120);
    let m = r.gen_range(0..40);
    if r.gen_bool(0.5) {
        let lattice = |k: usize, r: &mut ChaCha8Rng| -> Vec<[f64; 2]> {
            (0..k)
                .map(|_| [r.gen_range(-12i32..12) as f64, r.gen_range(-12i32..12) as f64])
                .collect()
        };
        let pts = lattice(n, r);
        let qs = lattice(m, r);
        (qs, pts, 5.0)
    } else {
        let s = r.gen_range(1.0..50.0);
        let pts = (0..n).map(|_| [r.gen_range(-s..s), r.gen_range(-s..s)]).collect();
        let qs = (0..m).map(|_| [r.gen_range(-s..s), r.gen_range(-s..s)]).collect();
        (qs, pts, r.gen_range(0.05..0.5) * s)
    }
}

pub struct KpconvInstance {
    pub out_points: Vec<[f64; 2]>,
    pub in_points: Vec<[f64; 2]>,
    pub features: Vec<Vec<f64>>,
    /// `[K][F_in][F_out]`.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub radius: f64,
}

pub fn kpconv_instance(r: &mut ChaCha8Rng) -> KpconvInstance {
    let n = r.gen_range(1..=64);
    let m = r.gen_range(1..=16);
    let k = r.gen_range(1..=9);
    let fin = r.gen_range(1..=8);
    let fout = r.gen_range(1..=8);
    let span = 3.0;
    let pt = |r: &mut ChaCha8Rng| [r.gen_range(-span..span), r.gen_range(-span..span)];
    let in_points = (0..n).map(|_| pt(r)).collect();
    let out_points = (0..m).map(|_| pt(r)).collect();
    let features = (0..n).map(|_| (0..fin).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let weights = (0..k)
        .map(|_| (0..fin).map(|_| (0..fout).map(|_| r.gen_range(-1.0..1.0)).collect()).collect())
        .collect();
    KpconvInstance {
        out_points,
        in_points,
        features,
        weights,
        radius: r.gen_range(0.5..3.0),
    }
}

/// Direct evaluation of the kernel point convolution with the linear
/// correlation, one output point, neighbor, kernel point and channel at a time.
pub fn kpconv_triple_loop(inst: &KpconvInstance, kernel_points: &[[f64; 2]], influence: f64) -> Vec<Vec<f64>> {
    let fout = inst.weights[0][0].len();
    inst.out_points
        .iter()
        .map(|xa| {
            let mut out = vec![0.0; fout];
            for (xi, f) in inst.in_points.iter().zip(&inst.features) {
                let y = [xi[0] - xa[0], xi[1] - xa[1]];
                if y[0] * y[0] + y[1] * y[1] > inst.radius * inst.radius {
                    continue;
                }
                for (xk, w) in kernel_points.iter().zip(&inst.weights) {
                    let d = ((xk[0] - y[0]).powi(2) + (xk[1] - y[1]).powi(2)).sqrt();
                    let h = (1.0 - d / influence).max(0.0);
                    for (fi, &v) in f.iter().enumerate() {
                        for (o, acc) in out.iter_mut().enumerate() {
                            *acc += h * v * w[fi][o];
                        }
                    }
                }
            }
            out
        })
        .collect()
}

/// Library output on the same instance, and its max error relative to the
/// oracle's largest magnitude.
pub fn kpconv_relative_error(inst: &KpconvInstance) -> f64 {
    let k = inst.weights.len();
    let (fin, fout) = (inst.weights[0].len(), inst.weights[0][0].len());
    let layout = make_layout(k, inst.radius).unwrap();
    let w: Vec<f64> = inst.weights.iter().flatten().flatten().copied().collect();
    let mut conv = KpConv::new("k", layout.clone(), Tensor::from_vec(&[k, fin, fout], w).unwrap()).unwrap();
    let feats = Tensor::from_vec(&[inst.in_points.len(), fin], inst.features.concat()).unwrap();
    let nb = radius_neighbors(&inst.out_points, &inst.in_points, inst.radius);
    let got = conv.forward(&inst.out_points, &inst.in_points, &feats, &nb).unwrap();
    let want = kpconv_triple_loop(inst, &layout.points, layout.influence_radius);
    let scale = want.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut worst = 0.0f64;
    for (a, row) in want.iter().enumerate() {
        for (o, v) in row.iter().enumerate() {
            worst = worst.max((got.row(a)[o] - v).abs() / scale);
        }
    }
    worst
}

pub fn frame_box(frame: u64, x: f64, y: f64, score: Option<f64>) -> FrameBox {
    let mut b = OrientedBox::new([x, y], 1.8, 4.5, 0.0);
    b.score = score;
    FrameBox { frame, bbox: b }
}

/// A handful of frames with jittered predictions, misses and false alarms.
pub fn random_prediction_set(r: &mut ChaCha8Rng) -> (Vec<FrameBox>, Vec<FrameBox>) {
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for frame in 0..r.gen_range(1..5u64) {
        for _ in 0..r.gen_range(0..6) {
            let (x, y) = (r.gen_range(-20.0..20.0), r.gen_range(-20.0..20.0));
            gts.push(frame_box(frame, x, y, None));
            if r.gen_bool(0.8) {
                let e = r.gen_range(0.0..5.0);
                let a = r.gen_range(0.0..std::f64::consts::TAU);
                preds.push(frame_box(frame, x + e * a.cos(), y + e * a.sin(), Some(r.gen_range(0.01..1.0))));
            }
        }
        for _ in 0..r.gen_range(0..4) {
            let (x, y) = (r.gen_range(-20.0..20.0), r.gen_range(-20.0..20.0));
            preds.push(frame_box(frame, x, y, Some(r.gen_range(0.01..1.0))));
        }
    }
    (preds, gts)
}

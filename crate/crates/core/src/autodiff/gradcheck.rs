//! Central finite-difference verification of hand-written VJPs.

use rand::seq::index::sample;
use rand::Rng as _;

use super::param::Param;
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng;

/// A scalar objective over a set of 64-bit parameters.
///
/// `evaluate(true)` must add the analytic gradient of the returned loss into
/// every parameter's `grad`; `evaluate(false)` only computes the loss.
pub trait GradProblem {
    fn evaluate(&mut self, with_grad: bool) -> Result<f64>;
    fn params_mut(&mut self) -> Vec<&mut Param<f64>>;
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Step `h = 1e-5 * max(1, |theta|)`. At most `max_entries` randomly chosen
/// entries of each parameter are probed (all of them when smaller).
pub fn gradcheck<P: GradProblem + ?Sized>(
    problem: &mut P,
    max_entries: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    for p in problem.params_mut() {
        p.zero_grad();
    }
    problem.evaluate(true)?;
    let analytic: Vec<Tensor<f64>> = problem.params_mut().iter().map(|p| p.grad.clone()).collect();
    let names: Vec<String> = problem.params_mut().iter().map(|p| p.name.clone()).collect();
    let mut picker = rng::stream(seed, "gradcheck");
    let mut report = Vec::with_capacity(names.len());
    for (pi, name) in names.into_iter().enumerate() {
        let len = analytic[pi].len();
        let entries: Vec<usize> = if len <= max_entries {
            (0..len).collect()
        } else {
            let mut v = sample(&mut picker, len, max_entries).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst = 0.0f64;
        for &j in &entries {
            let theta = problem.params_mut()[pi].value.data()[j];
            let h = 1e-5 * theta.abs().max(1.0);
            problem.params_mut()[pi].value.data_mut()[j] = theta + h;
            let plus = problem.evaluate(false)?;
            problem.params_mut()[pi].value.data_mut()[j] = theta - h;
            let minus = problem.evaluate(false)?;
            problem.params_mut()[pi].value.data_mut()[j] = theta;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[pi].data()[j], numeric));
        }
        report.push(ParamCheck {
            name,
            checked: entries.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport { params: report })
}

/// Like [`gradcheck`], but probes each parameter tensor along `directions`
/// random sign vectors `v`, comparing `<grad, v>` with the central difference
/// of the loss along `v` (step `1e-5`). A single weakly coupled entry has a
/// gradient near the roundoff floor of the loss; a directional derivative
/// sums over the whole tensor and stays resolvable.
pub fn gradcheck_directional<P: GradProblem + ?Sized>(
    problem: &mut P,
    directions: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    for p in problem.params_mut() {
        p.zero_grad();
    }
    problem.evaluate(true)?;
    let analytic: Vec<Tensor<f64>> = problem.params_mut().iter().map(|p| p.grad.clone()).collect();
    let names: Vec<String> = problem.params_mut().iter().map(|p| p.name.clone()).collect();
    let mut picker = rng::stream(seed, "gradcheck");
    let h = 1e-5;
    let mut report = Vec::with_capacity(names.len());
    for (pi, name) in names.into_iter().enumerate() {
        let base = problem.params_mut()[pi].value.clone();
        let mut worst = 0.0f64;
        for _ in 0..directions {
            let v = Tensor::<f64>::from_fn(base.shape(), |_| if picker.gen_bool(0.5) { 1.0 } else { -1.0 });
            let shifted = |sign: f64| {
                let mut t = base.clone();
                for (x, d) in t.data_mut().iter_mut().zip(v.data()) {
                    *x += sign * h * d;
                }
                t
            };
            problem.params_mut()[pi].value = shifted(1.0);
            let plus = problem.evaluate(false)?;
            problem.params_mut()[pi].value = shifted(-1.0);
            let minus = problem.evaluate(false)?;
            problem.params_mut()[pi].value = base.clone();
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[pi].dot(&v), numeric));
        }
        report.push(ParamCheck {
            name,
            checked: directions,
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport { params: report })
}

/// Scalar probe `sum(output * probe)`, whose output cotangent is `probe`.
pub fn probe_loss(output: &Tensor<f64>, probe: &Tensor<f64>) -> f64 {
    output.dot(probe)
}

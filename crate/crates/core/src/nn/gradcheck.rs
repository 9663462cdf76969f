//! Central finite-difference oracle for checking tape gradients.
//!
//! The numeric side only ever calls the forward pass, so it is independent
//! of every backward rule it checks. Coordinates where the two one-sided
//! differences disagree sit on a kink of a piecewise-linear activation; they
//! are counted and skipped rather than compared.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Step for central differences at double precision.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Largest one-sided slope disagreement, relative to the function scale,
/// still treated as smooth.
pub const KINK_TOL: f64 = 1e-8;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub kinks: usize,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        if err > self.max_rel_err || err.is_nan() {
            self.max_rel_err = err;
        }
        self.checked += 1;
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.kinks += other.kinks;
    }
}

/// Returns the central difference at coordinate `i` of `x`, or `None` if the
/// function is visibly non-smooth there.
///
/// Smoothness is judged from second-order one-sided differences, whose
/// truncation error is O(h^2); a kink within `2h` of the point makes them
/// disagree by roughly the slope jump.
fn central(x: &mut [f64], i: usize, h: f64, eval: &mut dyn FnMut(&[f64]) -> f64) -> Option<f64> {
    let orig = x[i];
    let mut at = |x: &mut [f64], k: f64| {
        x[i] = orig + k * h;
        eval(x)
    };
    let f0 = at(x, 0.0);
    let (fp, fp2) = (at(x, 1.0), at(x, 2.0));
    let (fm, fm2) = (at(x, -1.0), at(x, -2.0));
    x[i] = orig;
    let right = (-3.0 * f0 + 4.0 * fp - fp2) / (2.0 * h);
    let left = (3.0 * f0 - 4.0 * fm + fm2) / (2.0 * h);
    let central = (fp - fm) / (2.0 * h);
    let tol = KINK_TOL * central.abs().max(f0.abs()).max(1.0);
    if (right - left).abs() > tol {
        None
    } else {
        Some(central)
    }
}

/// Checks gradients of `f` with respect to every element of `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut report = GradCheckReport::default();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut x = input.data().to_vec();
        let mut eval = |xs: &[f64]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, inp)| {
                    if j == k {
                        t.constant(Tensor::from_vec(inp.shape(), xs.to_vec()).expect("shape"))
                    } else {
                        t.constant(inp.clone())
                    }
                })
                .collect();
            let l = f(&mut t, &vs).expect("forward");
            t.value(l).item()
        };
        for i in 0..x.len() {
            match central(&mut x, i, DEFAULT_STEP, &mut eval) {
                Some(num) => report.record(analytic.data()[i], num),
                None => report.kinks += 1,
            }
        }
    }
    Ok(report)
}

/// Checks gradients of `f` with respect to every parameter of every store.
pub fn check_stores<F>(stores: &[ParamStore<f64>], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[ParamStore<f64>]) -> Result<Var>,
{
    let mut analytic: Vec<ParamStore<f64>> = stores.to_vec();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &analytic)?;
    tape.backward(loss)?;
    for s in analytic.iter_mut() {
        s.zero_grad();
        tape.grads_into(s);
    }

    let mut report = GradCheckReport::default();
    let mut work: Vec<ParamStore<f64>> = stores.to_vec();
    for si in 0..stores.len() {
        for pid in stores[si].iter_ids().collect::<Vec<_>>() {
            let shape = stores[si].value(pid).shape().to_vec();
            let mut x = stores[si].value(pid).data().to_vec();
            for i in 0..x.len() {
                let mut eval = |xs: &[f64]| -> f64 {
                    work[si].get_mut(pid).value = Tensor::from_vec(&shape, xs.to_vec()).expect("shape");
                    let mut t = Tape::new();
                    let l = f(&mut t, &work).expect("forward");
                    t.value(l).item()
                };
                match central(&mut x, i, DEFAULT_STEP, &mut eval) {
                    Some(num) => report.record(analytic[si].get(pid).grad.data()[i], num),
                    None => report.kinks += 1,
                }
            }
            work[si].get_mut(pid).value = stores[si].value(pid).clone();
        }
    }
    Ok(report)
}

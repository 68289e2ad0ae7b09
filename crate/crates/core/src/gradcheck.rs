//! Central-difference gradient checking against the tape.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradient magnitudes below this are compared absolutely rather than
/// relatively. Central differences at step 1e-5 carry roughly 1e-10 of
/// round-off on O(1) function values, which stays well under 1e-4 of this
/// scale.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst component.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub components: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences, over every component of every input in `point`.
///
/// `f` receives a fresh tape and the input variables registered on it as
/// trainable leaves, and returns the `[1, 1]` output.
pub fn finite_diff_check<F>(f: F, point: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_subset(f, point, step, usize::MAX, 0)
}

/// Like [`finite_diff_check`], but probes at most `per_input` components of
/// each input, chosen by a seeded shuffle. Inputs with fewer components are
/// checked in full.
pub fn finite_diff_check_subset<F>(
    f: F,
    point: &[Tensor],
    step: f64,
    per_input: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        components: 0,
    };
    let mut probe: Vec<Tensor> = point.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let mut components: Vec<usize> = (0..point[i].len()).collect();
        if components.len() > per_input {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            components.shuffle(&mut rng);
            components.truncate(per_input);
        }
        for k in components {
            let x0 = point[i].data()[k];
            probe[i].data_mut()[k] = x0 + step;
            let up = eval(&probe)?;
            probe[i].data_mut()[k] = x0 - step;
            let down = eval(&probe)?;
            probe[i].data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[k];
            let err = relative_error(a, numeric);
            report.components += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, k));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

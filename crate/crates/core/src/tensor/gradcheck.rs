use super::{ParamSet, Real, Tape, Var};
use crate::error::Result;

/// Central-difference step used by the numeric side of the check.
const STEP: f64 = 1e-6;
/// Upper bound on the number of perturbed coordinates per check.
const MAX_COORDS: usize = 4000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// Analytic gradient in `f32`, compared against `f64` finite differences.
    F32,
    /// Both sides in `f64`.
    F64,
}

/// A small differentiable computation with its own parameters.
pub trait GradCase {
    fn params(&self) -> &ParamSet<f64>;

    /// Records the computation on a tape whose parameters are already bound
    /// and returns the scalar root.
    fn build<F: Real>(&self, tape: &mut Tape<F>) -> Result<Var>;
}

fn eval<C: GradCase>(case: &C, params: &ParamSet<f64>) -> Result<f64> {
    let mut tape = Tape::frozen(params);
    let root = case.build(&mut tape)?;
    Ok(tape.value(root).item())
}

fn analytic<C: GradCase, F: Real>(case: &C, params: &ParamSet<F>) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::with_params(params);
    let root = case.build(&mut tape)?;
    let grads = tape.backward(root)?;
    Ok(grads
        .param_grads(params)
        .iter()
        .map(|g| g.to_f64_vec())
        .collect())
}

/// Maximum over parameter coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<C: GradCase>(case: &C, precision: Precision) -> Result<f64> {
    // In f32 mode the f64 shadow uses the f32-rounded parameter values, so
    // both sides differentiate the same point.
    let (shadow, grads) = match precision {
        Precision::F64 => (case.params().clone(), analytic(case, case.params())?),
        Precision::F32 => {
            let p32 = case.params().cast::<f32>();
            (p32.cast::<f64>(), analytic(case, &p32)?)
        }
    };
    let total = shadow.num_elements();
    let stride = total.div_ceil(MAX_COORDS).max(1);
    let mut worst = 0.0f64;
    let mut flat = 0usize;
    let mut probe = shadow.clone();
    for (pi, g) in grads.iter().enumerate() {
        for (k, &a) in g.iter().enumerate() {
            flat += 1;
            if !(flat - 1).is_multiple_of(stride) {
                continue;
            }
            let orig = shadow.tensors()[pi].data()[k];
            probe.tensors_mut()[pi].data_mut()[k] = orig + STEP;
            let up = eval(case, &probe)?;
            probe.tensors_mut()[pi].data_mut()[k] = orig - STEP;
            let down = eval(case, &probe)?;
            probe.tensors_mut()[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

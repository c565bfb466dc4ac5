//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Inputs closer than this to a ReLU kink or max-pool tie should be resampled.
pub const KINK_MARGIN: f64 = 1e-4;

/// Times the step is halved for an element whose stencil straddles a kink.
pub const MAX_HALVINGS: usize = 4;

/// Finite-difference step for the element type: 1e-3 in f32, 1e-5 in f64.
pub fn fd_step<T: Real>() -> f64 {
    if T::BYTES == 4 {
        1e-3
    } else {
        1e-5
    }
}

/// Pass threshold for the element type: 1e-3 in f32, 1e-5 in f64.
pub fn default_tolerance<T: Real>() -> f64 {
    if T::BYTES == 4 {
        1e-3
    } else {
        1e-5
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Relative error per input (see [`relative_error`]).
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
    /// Distance of the sampled point to the nearest kink (see [`Tape::kink_margin`]).
    pub kink_margin: f64,
    /// Elements whose stencil still straddled a kink (ReLU sign or pool
    /// choice differs from the base point) after [`MAX_HALVINGS`] halvings.
    pub crossings: usize,
    pub evaluations: usize,
}

impl GradCheckReport {
    pub fn near_kink(&self) -> bool {
        self.kink_margin < KINK_MARGIN || self.crossings > 0
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Norm-wise relative error between two gradient vectors,
/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, floor)`.
///
/// The floor keeps gradients that vanish in exact arithmetic, such as a conv
/// bias feeding train-mode batch norm, from reading as total disagreement
/// when both sides are rounding noise.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn).max(floor);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares the tape's gradient of the scalar produced by `f` with central
/// differences, for every element of every input.
///
/// `f` receives a fresh tape and one leaf per input and must return a scalar.
/// It is called at least `1 + 2·Σ numel` times. When a stencil changes any
/// ReLU sign or pool choice the step for that element is halved and retried.
pub fn grad_check<T, F>(inputs: &[Tensor<T>], f: F) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut f = f;
    let analytic = analytic_pass(inputs, &mut f)?;
    numeric_pass(inputs, analytic, fd_step::<T>(), f)
}

/// Like [`grad_check`], but the finite differences are taken on an f64
/// evaluation `oracle` of the same function at the (rounded) input point,
/// with the step of `T`. Use it when `T`'s own rounding noise over the step
/// would swamp the comparison.
pub fn grad_check_f64_oracle<T, F, G>(inputs: &[Tensor<T>], mut f: F, oracle: G) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
    G: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_pass(inputs, &mut f)?;
    let wide: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast::<f64>()).collect();
    numeric_pass(&wide, analytic, fd_step::<T>(), oracle)
}

struct Analytic {
    grads: Vec<Vec<f64>>,
    kink_margin: f64,
}

fn analytic_pass<T, F>(inputs: &[Tensor<T>], f: &mut F) -> Result<Analytic>
where
    T: Real,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();
    Ok(Analytic { grads, kink_margin: tape.kink_margin() })
}

fn numeric_pass<U, F>(inputs: &[Tensor<U>], analytic: Analytic, h: f64, mut f: F) -> Result<GradCheckReport>
where
    U: Real,
    F: FnMut(&mut Tape<U>, &[Var]) -> Result<Var>,
{
    let mut run = |values: &[Tensor<U>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.scalar(out), tape.activation_pattern()))
    };
    let (_, base_pattern) = run(inputs)?;
    let mut evaluations = 1;

    // Inputs are floored at the RMS gradient element over all inputs.
    let total: usize = analytic.grads.iter().map(Vec::len).sum();
    let rms = (analytic.grads.iter().flatten().map(|a| a * a).sum::<f64>() / total.max(1) as f64).sqrt();

    let mut work: Vec<Tensor<U>> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut crossings = 0;
    for i in 0..inputs.len() {
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            let mut step = h;
            for attempt in 0..=MAX_HALVINGS {
                let up = U::of(orig.as_f64() + step);
                let down = U::of(orig.as_f64() - step);
                work[i].data_mut()[j] = up;
                let (plus, p_plus) = run(&work)?;
                work[i].data_mut()[j] = down;
                let (minus, p_minus) = run(&work)?;
                work[i].data_mut()[j] = orig;
                evaluations += 2;
                // Divide by the step actually taken after rounding.
                *slot = (plus - minus) / (up.as_f64() - down.as_f64());
                if p_plus == base_pattern && p_minus == base_pattern {
                    break;
                }
                if attempt == MAX_HALVINGS {
                    crossings += 1;
                }
                step /= 2.0;
            }
        }
        per_input.push(relative_error(&analytic.grads[i], &numeric, rms * (numeric.len() as f64).sqrt()));
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { per_input, max_rel_error, kink_margin: analytic.kink_margin, crossings, evaluations })
}

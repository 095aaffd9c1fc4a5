//! Central finite-difference verification of autodiff gradients.
//!
//! Both sides run the same generic graph on an `f64` tape: analytic
//! gradients come from its backward pass, numeric ones from replaying it
//! with every checked coordinate perturbed by `±step`. The error of a group is norm-wise:
//! `max|analytic - numeric| / max(max|analytic|, max|numeric|, ABS_FLOOR)`.
//!
//! Perturbed evaluations replay the ReLU masks and max selections of the
//! unperturbed pass, so a step that would flip a unit differentiates the
//! active smooth piece rather than straddling the kink. A coordinate whose
//! central differences at `step` and `step / 2` still disagree by more than
//! `tolerance * scale` is not differentiable there (a clamp, say) and is
//! counted in `coords_skipped` instead of compared. A group
//! with every coordinate skipped fails.

mod modules;

pub use modules::{run_selector, ModuleCheck, Selector};

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Pattern, Tape, Var};
use crate::error::Result;
use crate::tensor::{Float, Tensor};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
/// Gradients below this magnitude are compared absolutely; softmax shift
/// invariance makes some groups exactly zero.
pub const ABS_FLOOR: f64 = 1e-6;

/// A scalar-valued computation over named inputs, evaluable at any precision.
pub trait GraphFn {
    fn eval<T: Float>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub coords_skipped: usize,
}

impl GroupReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error <= tolerance
    }
}

pub struct CheckOptions {
    pub step: f64,
    /// Upper bound on coordinates perturbed per input; `None` checks all.
    pub max_coords: Option<usize>,
    pub tolerance: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: DEFAULT_STEP,
            max_coords: Some(48),
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

/// Autodiff gradients of `graph` on an `f64` tape, one per input.
pub fn analytic_gradients<G: GraphFn>(graph: &G, inputs: &[Tensor<f32>]) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.cast())).collect();
    let loss = graph.eval(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

fn record<G: GraphFn>(graph: &G, inputs: &[Tensor<f64>]) -> Result<Pattern> {
    let mut tape = Tape::<f64>::recording();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    graph.eval(&mut tape, &vars)?;
    Ok(tape.take_pattern().expect("recording tape"))
}

fn eval_f64<G: GraphFn>(graph: &G, inputs: &[Tensor<f64>], pattern: &Pattern) -> Result<f64> {
    let mut tape = Tape::<f64>::replaying(pattern.clone());
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = graph.eval(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}

/// Compare `analytic` against central differences of `graph` for every named
/// input. `analytic[i]` must have the shape of `inputs[i].1`.
pub fn compare<G: GraphFn>(
    graph: &G,
    inputs: &[(String, Tensor<f32>)],
    analytic: &[Tensor<f64>],
    opts: &CheckOptions,
    rng: &mut impl Rng,
) -> Result<Vec<GroupReport>> {
    let mut shadow: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.cast()).collect();
    let pattern = record(graph, &shadow)?;
    let mut reports = Vec::with_capacity(inputs.len());
    for (gi, (name, tensor)) in inputs.iter().enumerate() {
        let n = tensor.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let scale_hint = coords
            .iter()
            .map(|&i| analytic[gi].data()[i].abs())
            .fold(ABS_FLOOR, f64::max);
        let mut max_diff = 0.0f64;
        let mut scale = ABS_FLOOR;
        let mut skipped = 0;
        for &i in &coords {
            let orig = shadow[gi].data()[i];
            let mut central = |h: f64| -> Result<f64> {
                shadow[gi].data_mut()[i] = orig + h;
                let plus = eval_f64(graph, &shadow, &pattern)?;
                shadow[gi].data_mut()[i] = orig - h;
                let minus = eval_f64(graph, &shadow, &pattern)?;
                shadow[gi].data_mut()[i] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let numeric = central(opts.step)?;
            let half = central(opts.step / 2.0)?;
            if (numeric - half).abs() > opts.tolerance * scale_hint {
                skipped += 1;
                continue;
            }
            let a = analytic[gi].data()[i];
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        let max_rel_error = if skipped == coords.len() && !coords.is_empty() {
            f64::NAN
        } else {
            max_diff / scale
        };
        reports.push(GroupReport {
            name: name.clone(),
            max_rel_error,
            coords_checked: coords.len() - skipped,
            coords_skipped: skipped,
        });
    }
    Ok(reports)
}

/// Analytic-vs-numeric check of every input of `graph`.
pub fn check<G: GraphFn>(
    graph: &G,
    inputs: &[(String, Tensor<f32>)],
    opts: &CheckOptions,
    rng: &mut impl Rng,
) -> Result<Vec<GroupReport>> {
    let plain: Vec<Tensor<f32>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let analytic = analytic_gradients(graph, &plain)?;
    compare(graph, inputs, &analytic, opts, rng)
}

/// `sum(y * weights)`: reduces a tensor to a scalar with generic adjoints.
pub fn project<T: Float>(tape: &mut Tape<T>, y: Var, weights: &Tensor<f32>) -> Result<Var> {
    let w = tape.constant(weights.cast());
    let prod = tape.mul(y, w)?;
    Ok(tape.sum_all(prod))
}

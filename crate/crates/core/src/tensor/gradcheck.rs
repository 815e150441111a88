//! Central finite-difference validation of tape gradients, run in f64.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, ValueId};
use super::{Result, Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Base step for the central difference; scaled by max(1, |x|) per element.
    pub eps: f64,
    /// Relative-error threshold above which an element is a failure.
    pub tol: f64,
    /// Absolute analytic-vs-numeric gap treated as finite-difference noise.
    /// Scaled by max(1, |loss|). Gaps below it pass without a relative test,
    /// which keeps near-zero gradients from tripping the ratio while still
    /// catching dropped terms (those produce gaps far above any noise level).
    pub noise_floor: f64,
    /// Elements probed per parameter tensor; larger tensors are subsampled.
    pub max_elements: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-5,
            noise_floor: 1e-8,
            max_elements: 64,
            seed: 0x9d_c0ffee,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckFailure {
    pub param: String,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub elements_checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= floor {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compare tape gradients of a scalar-valued graph against central
/// differences at the given parameter values. `build` must be a pure
/// function of the parameters it is handed.
pub fn grad_check<F>(
    params: &[(&str, Tensor<f64>)],
    opts: &GradCheckOptions,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    let forward = |vals: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let ids: Vec<ValueId> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&tape, &ids)?;
        Ok(tape.value(loss).item())
    };

    let base: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let tape = Tape::new();
    let ids: Vec<ValueId> = base.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&tape, &ids)?;
    if tape.value(loss).numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: tape.shape_of(loss),
        });
    }
    let loss_val = tape.value(loss).item();
    if !loss_val.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check loss" });
    }
    let grads = tape.backward(loss)?;
    let floor = opts.noise_floor * loss_val.abs().max(1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    for (p, (name, tensor)) in params.iter().enumerate() {
        let numel = tensor.numel();
        let indices: Vec<usize> = if numel <= opts.max_elements {
            (0..numel).collect()
        } else {
            let mut picked = rand::seq::index::sample(&mut rng, numel, opts.max_elements).into_vec();
            picked.sort_unstable();
            picked
        };
        let analytic = grads.of(&tape, ids[p]);
        for idx in indices {
            let x0 = tensor.data()[idx];
            let h = opts.eps * x0.abs().max(1.0);
            let mut probe = base.clone();
            probe[p] = tensor.with_element(idx, x0 + h);
            let f_plus = forward(&probe)?;
            probe[p] = tensor.with_element(idx, x0 - h);
            let f_minus = forward(&probe)?;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic.data()[idx];
            let rel = rel_err(a, numeric, floor);
            report.elements_checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel > opts.tol && report.failures.len() < 8 {
                report.failures.push(GradCheckFailure {
                    param: name.to_string(),
                    element: idx,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub low: f64,
    pub high: f64,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            low: -1.0,
            high: 1.0,
        }
    }

    pub fn range(mut self, low: f64, high: f64) -> Self {
        self.low = low;
        self.high = high;
        self
    }
}

/// Run [`grad_check`] at randomly sampled parameter values. Draws are
/// rejected while any relu input sits within 10 eps of its kink, so the
/// difference quotient never straddles a non-differentiable point.
pub fn grad_check_sampled<F>(
    specs: &[ParamSpec],
    opts: &GradCheckOptions,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let margin = 10.0 * opts.eps;
    for _ in 0..32 {
        let vals: Vec<Tensor<f64>> = specs
            .iter()
            .map(|s| {
                let data: Vec<f64> = (0..s.shape.iter().product::<usize>())
                    .map(|_| rng.gen_range(s.low..s.high))
                    .collect();
                Tensor::from_parts(s.shape.clone(), data)
            })
            .collect();
        let tape = Tape::new();
        let ids: Vec<ValueId> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&tape, &ids)?;
        if tape.value(loss).numel() != 1
            || !tape.value(loss).item().is_finite()
            || !tape.relu_inputs_clear_of(margin)
        {
            continue;
        }
        let params: Vec<(&str, Tensor<f64>)> = specs
            .iter()
            .zip(&vals)
            .map(|(s, t)| (s.name.as_str(), t.clone()))
            .collect();
        return grad_check(&params, opts, build);
    }
    Err(TensorError::SampleExhausted {
        op: "grad_check_sampled",
        tries: 32,
    })
}

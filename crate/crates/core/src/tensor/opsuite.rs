//! Gradient verification of every differentiable tape operation. Each op
//! is composed with a tanh-and-sum reduction so its backward rule is
//! exercised through a nontrivial chain, then compared against central
//! differences at randomly drawn inputs.

use super::gradcheck::{grad_check_sampled, GradCheckOptions, GradCheckReport, ParamSpec};
use super::tape::{Tape, ValueId};
use super::Result;

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub report: GradCheckReport,
}

fn squash(tape: &Tape<f64>, id: ValueId) -> ValueId {
    tape.sum_all(tape.tanh(id))
}

type Build = Box<dyn Fn(&Tape<f64>, &[ValueId]) -> Result<ValueId>>;

fn cases() -> Vec<(&'static str, Vec<ParamSpec>, Build)> {
    let spec = |name: &str, shape: &[usize]| ParamSpec::new(name, shape);
    vec![
        (
            "add",
            vec![spec("a", &[2, 3]), spec("b", &[2, 3])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(squash(t, t.add(p[0], p[1])?))) as Build,
        ),
        (
            "sub",
            vec![spec("a", &[2, 3]), spec("b", &[2, 3])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(squash(t, t.sub(p[0], p[1])?))),
        ),
        (
            "mul",
            vec![spec("a", &[2, 3]), spec("b", &[2, 3])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(squash(t, t.mul(p[0], p[1])?))),
        ),
        (
            "affine",
            vec![spec("x", &[2, 3])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(squash(t, t.affine(p[0], 1.7, -0.3)))),
        ),
        (
            "scale",
            vec![spec("x", &[2, 3])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(squash(t, t.scale(p[0], -2.2)))),
        ),
        (
            "matmul",
            vec![spec("a", &[2, 3]), spec("b", &[3, 4])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(squash(t, t.matmul(p[0], p[1])?))),
        ),
        (
            "matmul_nt",
            vec![spec("a", &[2, 3]), spec("b", &[4, 3])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(squash(t, t.matmul_nt(p[0], p[1])?))),
        ),
        (
            "linear",
            vec![spec("x", &[2, 3]), spec("w", &[4, 3]), spec("b", &[4])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(squash(t, t.linear(p[0], p[1], p[2])?))),
        ),
        (
            "conv2d",
            vec![
                spec("x", &[2, 2, 5, 5]),
                spec("w", &[3, 2, 3, 3]),
                spec("b", &[3]),
            ],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| {
                Ok(squash(t, t.conv2d(p[0], p[1], Some(p[2]), 1, 1)?))
            }),
        ),
        (
            "conv2d_strided",
            vec![spec("x", &[1, 2, 6, 6]), spec("w", &[2, 2, 3, 3])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| {
                Ok(squash(t, t.conv2d(p[0], p[1], None, 2, 0)?))
            }),
        ),
        (
            "relu",
            vec![spec("x", &[2, 6])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(squash(t, t.relu(p[0])))),
        ),
        (
            "tanh",
            vec![spec("x", &[2, 6])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(t.sum_all(t.tanh(p[0])))),
        ),
        (
            "exp",
            vec![spec("x", &[2, 4])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(squash(t, t.exp(p[0])))),
        ),
        (
            "log",
            vec![spec("x", &[2, 4]).range(0.2, 2.0)],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(squash(t, t.log(p[0])))),
        ),
        (
            "softmax_rows",
            vec![spec("x", &[3, 5])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(squash(t, t.softmax_rows(p[0])?))),
        ),
        (
            "log_softmax_rows",
            vec![spec("x", &[3, 5])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(squash(t, t.log_softmax_rows(p[0])?))),
        ),
        (
            "spatial_softmax",
            vec![spec("x", &[2, 3, 4])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(squash(t, t.spatial_softmax(p[0])?))),
        ),
        (
            "diag",
            vec![spec("x", &[3, 3])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(squash(t, t.diag(p[0])?))),
        ),
        (
            "concat_cols",
            vec![spec("a", &[2, 3]), spec("b", &[2, 4])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(squash(t, t.concat_cols(p)?))),
        ),
        (
            "sum_all",
            vec![spec("x", &[2, 3])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(t.sum_all(t.tanh(p[0])))),
        ),
        (
            "mean_all",
            vec![spec("x", &[2, 3])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(t.mean_all(t.tanh(p[0])))),
        ),
        (
            "l2_normalize_rows",
            vec![spec("x", &[3, 4]).range(0.5, 1.5)],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(squash(t, t.l2_normalize_rows(p[0])?))),
        ),
        (
            "weighted_pool",
            vec![spec("f", &[2, 3, 3, 3]), spec("m", &[2, 3, 3])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(squash(t, t.weighted_pool(p[0], p[1])?))),
        ),
        (
            "map_rows",
            vec![spec("x", &[2, 3, 2, 2])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(squash(t, t.map_rows(p[0])?))),
        ),
        (
            "reshape",
            vec![spec("x", &[2, 6])],
            Box::new(|t: &Tape<f64>, p: &[ValueId]| Ok(squash(t, t.reshape(p[0], &[3, 4])?))),
        ),
    ]
}

/// Run the gradient check for every tape op; one report per op.
pub fn check_all_ops(opts: &GradCheckOptions) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for (op, specs, build) in cases() {
        let report = grad_check_sampled(&specs, opts, &build)?;
        out.push(OpCheck { op, report });
    }
    Ok(out)
}

//! Finite-difference verification of analytic gradients.
//!
//! Each op in the tape's op set gets random small instances whose VJP is
//! compared against central differences; whole models are checked through the
//! same machinery by flattening their parameter map. Checks run in f64 so the
//! difference quotient is a tight oracle.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::tape::{AttnMask, Tape, VarId};
use crate::diffcore::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::selattn::SelectionStrategy;

// ── Reports ──────────────────────────────────────────────────────────

/// Outcome of checking one op (or one model) against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Op or model name.
    pub name: String,
    /// Worst normalized error over all instances and coordinates.
    pub max_rel_err: f64,
    /// Flat coordinate index where the worst error occurred.
    pub worst_coord: usize,
    /// True iff `max_rel_err <= tol`.
    pub pass: bool,
    /// Human-readable location of the worst coordinate (input/param name).
    pub worst_detail: String,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<18} {} max_rel_err={:.3e} worst={} ({})",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.worst_coord,
            self.worst_detail
        )
    }
}

/// Tolerances for a gradient check. The relative error of a coordinate is
/// `|a - n| / max(|a|, |n|, floor)`, so `floor` acts as the absolute-error
/// regime for near-zero gradients.
#[derive(Debug, Clone, Copy)]
pub struct CheckSettings {
    pub tol: f64,
    pub h_rel: f64,
    pub floor: f64,
    pub instances: usize,
}

impl CheckSettings {
    /// Per-op checks in f64: tight tolerance, ten random instances.
    pub fn per_op() -> Self {
        CheckSettings { tol: 1e-5, h_rel: 1e-4, floor: 1e-2, instances: 10 }
    }

    /// Whole-model checks: deeper graphs accumulate more truncation error.
    pub fn model() -> Self {
        CheckSettings { tol: 1e-3, h_rel: 1e-4, floor: 1e-3, instances: 1 }
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

// ── Central differences ──────────────────────────────────────────────

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h` with a
/// fixed step, one coordinate at a time. Errors carry the coordinate index
/// when `f` returns a non-finite value.
pub fn finite_diff_gradient<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    point: &Tensor<T>,
    h: T,
) -> Result<Tensor<T>> {
    if !(h > T::zero()) {
        return Err(Error::Numeric(format!("finite_diff_gradient: step h must be > 0, got {}", h)));
    }
    let mut grad = Tensor::zeros(point.shape().to_vec());
    let mut x = point.clone();
    let two = T::from_f64(2.0);
    for i in 0..point.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let fp = f(&x)?;
        x.data_mut()[i] = orig - h;
        let fm = f(&x)?;
        x.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "finite_diff_gradient: non-finite function value at coordinate {}",
                i
            )));
        }
        grad.data_mut()[i] = (fp - fm) / (two * h);
    }
    Ok(grad)
}

/// Central differences with a per-coordinate step `h_rel * max(1, |x_i|)`,
/// the form the verification harness uses.
pub fn finite_diff_gradient_scaled<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    point: &Tensor<T>,
    h_rel: f64,
) -> Result<Tensor<T>> {
    let mut grad = Tensor::zeros(point.shape().to_vec());
    let mut x = point.clone();
    let two = T::from_f64(2.0);
    for i in 0..point.numel() {
        let orig = x.data()[i];
        let h = T::from_f64(h_rel) * T::one().max(orig.abs());
        x.data_mut()[i] = orig + h;
        let fp = f(&x)?;
        x.data_mut()[i] = orig - h;
        let fm = f(&x)?;
        x.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "finite_diff_gradient: non-finite function value at coordinate {}",
                i
            )));
        }
        grad.data_mut()[i] = (fp - fm) / (two * h);
    }
    Ok(grad)
}

// ── Op instances ─────────────────────────────────────────────────────

/// A concrete, fully-parameterized op application: the op id plus whatever
/// attributes (patch size, slice bounds, mask, strategy) it needs. Input
/// tensor shapes are implied and exposed via `input_shapes`.
#[derive(Debug, Clone)]
pub enum OpInstance {
    Matmul { m: usize, k: usize, n: usize },
    Transpose { m: usize, n: usize },
    Add { shape: Vec<usize> },
    AddConst { shape: Vec<usize>, c: f64 },
    AddRow { n: usize, d: usize },
    Mul { shape: Vec<usize> },
    MulRow { n: usize, d: usize },
    Scale { shape: Vec<usize>, c: f64 },
    SoftmaxMasked { rows: usize, cols: usize, blocked: Vec<bool> },
    SelSoftmax { rows: usize, cols: usize, strategy: SelectionStrategy },
    LayerNorm { n: usize, d: usize },
    Gelu { shape: Vec<usize> },
    Reshape { from: Vec<usize>, to: Vec<usize> },
    Patchify { h: usize, w: usize, ch: usize, p: usize },
    Unpatchify { h: usize, w: usize, ch: usize, p: usize },
    ConcatRows { na: usize, nb: usize, d: usize },
    ConcatCols { n: usize, widths: Vec<usize> },
    SliceRows { n: usize, d: usize, start: usize, len: usize },
    SliceCols { n: usize, d: usize, start: usize, len: usize },
    Mean { shape: Vec<usize> },
    SumSq { shape: Vec<usize> },
    EmbedLookup { vocab: usize, d: usize, ids: Vec<usize> },
}

impl OpInstance {
    pub fn name(&self) -> &'static str {
        match self {
            OpInstance::Matmul { .. } => "matmul",
            OpInstance::Transpose { .. } => "transpose",
            OpInstance::Add { .. } => "add",
            OpInstance::AddConst { .. } => "add-const",
            OpInstance::AddRow { .. } => "add-row",
            OpInstance::Mul { .. } => "mul",
            OpInstance::MulRow { .. } => "mul-row",
            OpInstance::Scale { .. } => "scalar-scale",
            OpInstance::SoftmaxMasked { .. } => "softmax-with-mask",
            OpInstance::SelSoftmax { .. } => "sel-softmax",
            OpInstance::LayerNorm { .. } => "layernorm",
            OpInstance::Gelu { .. } => "gelu",
            OpInstance::Reshape { .. } => "reshape",
            OpInstance::Patchify { .. } => "patchify",
            OpInstance::Unpatchify { .. } => "unpatchify",
            OpInstance::ConcatRows { .. } => "concat-rows",
            OpInstance::ConcatCols { .. } => "concat-cols",
            OpInstance::SliceRows { .. } => "slice-rows",
            OpInstance::SliceCols { .. } => "slice-cols",
            OpInstance::Mean { .. } => "mean",
            OpInstance::SumSq { .. } => "sum-of-squares",
            OpInstance::EmbedLookup { .. } => "embed-lookup",
        }
    }

    pub fn input_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            OpInstance::Matmul { m, k, n } => vec![vec![*m, *k], vec![*k, *n]],
            OpInstance::Transpose { m, n } => vec![vec![*m, *n]],
            OpInstance::Add { shape } | OpInstance::Mul { shape } => {
                vec![shape.clone(), shape.clone()]
            }
            OpInstance::AddConst { shape, .. }
            | OpInstance::Scale { shape, .. }
            | OpInstance::Gelu { shape }
            | OpInstance::Mean { shape }
            | OpInstance::SumSq { shape } => vec![shape.clone()],
            OpInstance::AddRow { n, d } | OpInstance::MulRow { n, d } => {
                vec![vec![*n, *d], vec![*d]]
            }
            OpInstance::SoftmaxMasked { rows, cols, .. }
            | OpInstance::SelSoftmax { rows, cols, .. } => vec![vec![*rows, *cols]],
            OpInstance::LayerNorm { n, d } => vec![vec![*n, *d], vec![*d], vec![*d]],
            OpInstance::Reshape { from, .. } => vec![from.clone()],
            OpInstance::Patchify { h, w, ch, .. } => vec![vec![*h, *w, *ch]],
            OpInstance::Unpatchify { h, w, ch, p } => {
                vec![vec![(h / p) * (w / p), p * p * ch]]
            }
            OpInstance::ConcatRows { na, nb, d } => vec![vec![*na, *d], vec![*nb, *d]],
            OpInstance::ConcatCols { n, widths } => {
                widths.iter().map(|&w| vec![*n, w]).collect()
            }
            OpInstance::SliceRows { n, d, .. } | OpInstance::SliceCols { n, d, .. } => {
                vec![vec![*n, *d]]
            }
            OpInstance::EmbedLookup { vocab, d, .. } => vec![vec![*vocab, *d]],
        }
    }

    /// Apply this op on the tape. This is the single dispatch point shared by
    /// `op_set_forward` and the gradient checker.
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, inputs: &[VarId]) -> Result<VarId> {
        let want = self.input_shapes().len();
        if inputs.len() != want {
            return Err(Error::shape(
                "op-set",
                format!("{} expects {} inputs, got {}", self.name(), want, inputs.len()),
            ));
        }
        match self {
            OpInstance::Matmul { .. } => tape.matmul(inputs[0], inputs[1]),
            OpInstance::Transpose { .. } => tape.transpose(inputs[0]),
            OpInstance::Add { .. } => tape.add(inputs[0], inputs[1]),
            OpInstance::AddConst { c, .. } => Ok(tape.add_const(inputs[0], T::from_f64(*c))),
            OpInstance::AddRow { .. } => tape.add_row(inputs[0], inputs[1]),
            OpInstance::Mul { .. } => tape.mul(inputs[0], inputs[1]),
            OpInstance::MulRow { .. } => tape.mul_row(inputs[0], inputs[1]),
            OpInstance::Scale { c, .. } => Ok(tape.scale(inputs[0], T::from_f64(*c))),
            OpInstance::SoftmaxMasked { rows, cols, blocked } => {
                let bl = blocked.clone();
                let cols = *cols;
                let mask = AttnMask::from_fn(*rows, cols, |q, k| bl[q * cols + k]);
                tape.softmax_masked(inputs[0], Some(std::rc::Rc::new(mask)))
            }
            OpInstance::SelSoftmax { strategy, .. } => tape.sel_softmax(inputs[0], strategy),
            OpInstance::LayerNorm { .. } => {
                tape.layernorm(inputs[0], inputs[1], inputs[2], T::from_f64(1e-5))
            }
            OpInstance::Gelu { .. } => Ok(tape.gelu(inputs[0])),
            OpInstance::Reshape { to, .. } => tape.reshape(inputs[0], to.clone()),
            OpInstance::Patchify { p, .. } => tape.patchify(inputs[0], *p),
            OpInstance::Unpatchify { h, w, p, .. } => tape.unpatchify(inputs[0], *h, *w, *p),
            OpInstance::ConcatRows { .. } => tape.concat_rows(inputs[0], inputs[1]),
            OpInstance::ConcatCols { .. } => tape.concat_cols(inputs),
            OpInstance::SliceRows { start, len, .. } => tape.slice_rows(inputs[0], *start, *len),
            OpInstance::SliceCols { start, len, .. } => tape.slice_cols(inputs[0], *start, *len),
            OpInstance::Mean { .. } => Ok(tape.mean(inputs[0])),
            OpInstance::SumSq { .. } => Ok(tape.sum_sq(inputs[0])),
            OpInstance::EmbedLookup { ids, .. } => tape.embed_lookup(inputs[0], ids),
        }
    }
}

/// Run one op as a pure function of its inputs: deterministic, and identical
/// inputs yield bit-identical outputs.
pub fn op_set_forward<T: Real>(op: &OpInstance, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = op.apply(&mut tape, &ids)?;
    Ok(tape.value(out).clone())
}

// ── Random instance generation ───────────────────────────────────────

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
}

/// Scores with well-separated values so FD steps cannot flip a selection.
fn rand_spread_scores(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let mut vals: Vec<f64> =
            (0..cols).map(|i| i as f64 * 0.5 + rng.gen_range(-0.01..0.01)).collect();
        // shuffle by sampling without replacement
        for i in (1..cols).rev() {
            let j = rng.gen_range(0..=i);
            vals.swap(i, j);
        }
        data.extend_from_slice(&vals);
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn random_instance(name: &str, rng: &mut ChaCha8Rng) -> OpInstance {
    let dim = |rng: &mut ChaCha8Rng| rng.gen_range(1..5usize);
    match name {
        "matmul" => OpInstance::Matmul { m: dim(rng), k: dim(rng), n: dim(rng) },
        "transpose" => OpInstance::Transpose { m: dim(rng), n: dim(rng) },
        "add" => OpInstance::Add { shape: vec![dim(rng), dim(rng)] },
        "add-const" => {
            OpInstance::AddConst { shape: vec![dim(rng), dim(rng)], c: rng.gen_range(-2.0..2.0) }
        }
        "add-row" => OpInstance::AddRow { n: dim(rng), d: dim(rng) },
        "mul" => OpInstance::Mul { shape: vec![dim(rng), dim(rng)] },
        "mul-row" => OpInstance::MulRow { n: dim(rng), d: dim(rng) },
        "scalar-scale" => {
            OpInstance::Scale { shape: vec![dim(rng), dim(rng)], c: rng.gen_range(-2.0..2.0) }
        }
        "softmax-with-mask" => {
            let rows = dim(rng);
            let cols = rng.gen_range(2..6usize);
            let mut blocked: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(0.3)).collect();
            for q in 0..rows {
                if (0..cols).all(|k| blocked[q * cols + k]) {
                    blocked[q * cols + rng.gen_range(0..cols)] = false;
                }
            }
            OpInstance::SoftmaxMasked { rows, cols, blocked }
        }
        "sel-softmax" => {
            let rows = dim(rng);
            let cols = rng.gen_range(2..8usize);
            let strategy = match rng.gen_range(0..5) {
                0 => SelectionStrategy::full(),
                1 => SelectionStrategy::top_k(rng.gen_range(1..=cols)),
                2 => SelectionStrategy::top_p(rng.gen_range(0.2..1.0)),
                3 => SelectionStrategy::top_p_tau(rng.gen_range(0.2..1.0), 0.8),
                _ => SelectionStrategy::top_pk(rng.gen_range(0.2..1.0), rng.gen_range(1..=cols)),
            };
            OpInstance::SelSoftmax { rows, cols, strategy }
        }
        "layernorm" => OpInstance::LayerNorm { n: dim(rng), d: rng.gen_range(2..6) },
        "gelu" => OpInstance::Gelu { shape: vec![dim(rng), dim(rng)] },
        "reshape" => {
            let a = dim(rng);
            let b = dim(rng);
            OpInstance::Reshape { from: vec![a, b], to: vec![a * b] }
        }
        "patchify" => {
            let p = rng.gen_range(1..3usize);
            OpInstance::Patchify { h: p * dim(rng), w: p * dim(rng), ch: rng.gen_range(1..4), p }
        }
        "unpatchify" => {
            let p = rng.gen_range(1..3usize);
            OpInstance::Unpatchify { h: p * dim(rng), w: p * dim(rng), ch: rng.gen_range(1..4), p }
        }
        "concat-rows" => OpInstance::ConcatRows { na: dim(rng), nb: dim(rng), d: dim(rng) },
        "concat-cols" => {
            let parts = rng.gen_range(2..4usize);
            OpInstance::ConcatCols {
                n: dim(rng),
                widths: (0..parts).map(|_| dim(rng)).collect(),
            }
        }
        "slice-rows" => {
            let n = rng.gen_range(2..6usize);
            let start = rng.gen_range(0..n - 1);
            let len = rng.gen_range(1..=n - start);
            OpInstance::SliceRows { n, d: dim(rng), start, len }
        }
        "slice-cols" => {
            let d = rng.gen_range(2..6usize);
            let start = rng.gen_range(0..d - 1);
            let len = rng.gen_range(1..=d - start);
            OpInstance::SliceCols { n: dim(rng), d, start, len }
        }
        "mean" => OpInstance::Mean { shape: vec![dim(rng), dim(rng)] },
        "sum-of-squares" => OpInstance::SumSq { shape: vec![dim(rng), dim(rng)] },
        "embed-lookup" => {
            let vocab = rng.gen_range(2..6usize);
            let len = rng.gen_range(1..5usize);
            OpInstance::EmbedLookup {
                vocab,
                d: dim(rng),
                ids: (0..len).map(|_| rng.gen_range(0..vocab)).collect(),
            }
        }
        other => unreachable!("unknown op name {other}"),
    }
}

/// Every op name the checker covers (a superset of the required op set).
pub const OP_NAMES: [&str; 22] = [
    "matmul",
    "transpose",
    "add",
    "add-const",
    "add-row",
    "mul",
    "mul-row",
    "scalar-scale",
    "softmax-with-mask",
    "sel-softmax",
    "layernorm",
    "gelu",
    "reshape",
    "patchify",
    "unpatchify",
    "concat-rows",
    "concat-cols",
    "slice-rows",
    "slice-cols",
    "mean",
    "sum-of-squares",
    "embed-lookup",
];

// ── Per-op check runner ──────────────────────────────────────────────

fn loss_through_op(
    op: &OpInstance,
    inputs: &[Tensor<f64>],
    probe: &Tensor<f64>,
) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut tape = Tape::<f64>::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = op.apply(&mut tape, &ids)?;
    let loss = if tape.value(out).numel() == 1 {
        out
    } else {
        let r = tape.input(probe.clone());
        let weighted = tape.mul(out, r)?;
        tape.mean(weighted)
    };
    let loss_val = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let grads = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            tape.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();
    Ok((loss_val, grads))
}

/// Check one op over `settings.instances` random instances.
pub fn check_op(name: &str, seed: u64, settings: &CheckSettings) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = GradCheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst_coord: 0,
        pass: true,
        worst_detail: "-".to_string(),
    };
    for inst_idx in 0..settings.instances {
        let op = random_instance(name, &mut rng);
        let inputs: Vec<Tensor<f64>> = op
            .input_shapes()
            .into_iter()
            .map(|s| {
                if matches!(op, OpInstance::SelSoftmax { .. }) {
                    rand_spread_scores(&mut rng, s[0], s[1])
                } else {
                    rand_tensor(&mut rng, s)
                }
            })
            .collect();
        let out_shape = op_set_forward(&op, &inputs)?.shape().to_vec();
        let probe = rand_tensor(&mut rng, out_shape);

        let (_, analytic) = loss_through_op(&op, &inputs, &probe)?;

        for (arg_idx, input) in inputs.iter().enumerate() {
            let numeric = finite_diff_gradient_scaled(
                |x| {
                    let mut trial = inputs.clone();
                    trial[arg_idx] = x.clone();
                    loss_through_op(&op, &trial, &probe).map(|(l, _)| l)
                },
                input,
                settings.h_rel,
            )?;
            for i in 0..input.numel() {
                let e = rel_err(analytic[arg_idx].data()[i], numeric.data()[i], settings.floor);
                if e > worst.max_rel_err {
                    worst.max_rel_err = e;
                    worst.worst_coord = i;
                    worst.worst_detail = format!("instance {} input {}", inst_idx, arg_idx);
                }
            }
        }
    }
    worst.pass = worst.max_rel_err <= settings.tol;
    Ok(worst)
}

/// Check the whole op set; one report per op.
pub fn check_all_ops(seed: u64, settings: &CheckSettings) -> Result<Vec<GradCheckReport>> {
    OP_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| check_op(name, seed.wrapping_add(i as u64), settings))
        .collect()
}

// ── Model-level check ────────────────────────────────────────────────

/// Compare analytic gradients of a scalar function of a parameter map against
/// central differences, coordinate by coordinate over every parameter.
pub fn check_param_map<F>(
    name: &str,
    mut loss_fn: F,
    params: &BTreeMap<String, Tensor<f64>>,
    analytic: &BTreeMap<String, Tensor<f64>>,
    settings: &CheckSettings,
) -> Result<GradCheckReport>
where
    F: FnMut(&BTreeMap<String, Tensor<f64>>) -> Result<f64>,
{
    let mut worst = GradCheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst_coord: 0,
        pass: true,
        worst_detail: "-".to_string(),
    };
    let mut flat_base = 0usize;
    for (pname, ptensor) in params {
        let a = analytic.get(pname).ok_or_else(|| {
            Error::Numeric(format!("gradient map is missing parameter '{}'", pname))
        })?;
        let numeric = finite_diff_gradient_scaled(
            |x| {
                let mut trial = params.clone();
                trial.insert(pname.clone(), x.clone());
                loss_fn(&trial)
            },
            ptensor,
            settings.h_rel,
        )?;
        for i in 0..ptensor.numel() {
            let e = rel_err(a.data()[i], numeric.data()[i], settings.floor);
            if e > worst.max_rel_err {
                worst.max_rel_err = e;
                worst.worst_coord = flat_base + i;
                worst.worst_detail = format!("{}[{}]", pname, i);
            }
        }
        flat_base += ptensor.numel();
    }
    worst.pass = worst.max_rel_err <= settings.tol;
    Ok(worst)
}

//! Reverse-mode autodiff: ops are recorded on a tape during the forward pass
//! and replayed in reverse to accumulate vector-Jacobian products.
//!
//! The op set is exactly what the model needs: dense linear algebra, masked
//! softmax, layernorm, gelu, patch layout moves, and reductions. Every op has
//! a hand-derived VJP that the finite-difference harness in `gradcheck`
//! verifies coordinate by coordinate.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::diffcore::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::selattn::SelectionStrategy;

// ── Attention masks ──────────────────────────────────────────────────

/// Boolean attention mask over a (query, key) grid. `true` means blocked.
///
/// Blocked entries are excluded from the softmax normalizing sum entirely,
/// so their weight is exactly 0.0 rather than an underflowed exponential.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    blocked: Vec<bool>,
}

impl AttnMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut blocked = Vec::with_capacity(rows * cols);
        for q in 0..rows {
            for k in 0..cols {
                blocked.push(f(q, k));
            }
        }
        AttnMask { rows, cols, blocked }
    }

    pub fn all_allowed(rows: usize, cols: usize) -> Self {
        AttnMask { rows, cols, blocked: vec![false; rows * cols] }
    }

    pub fn is_blocked(&self, q: usize, k: usize) -> bool {
        self.blocked[q * self.cols + k]
    }

    pub fn blocked_count(&self) -> usize {
        self.blocked.iter().filter(|&&b| b).count()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// Row-wise softmax with optional temperature and a blocked predicate.
/// Blocked entries get weight exactly 0.0 and never enter the normalizer.
/// Errors if every entry of the row is blocked.
pub(crate) fn softmax_row_into<T: Real>(
    scores: &[T],
    tau: T,
    blocked: impl Fn(usize) -> bool,
    out: &mut [T],
) -> Result<()> {
    let mut max: Option<T> = None;
    for (j, &s) in scores.iter().enumerate() {
        if blocked(j) {
            continue;
        }
        let t = s / tau;
        max = Some(match max {
            Some(m) if m >= t => m,
            _ => t,
        });
    }
    let max = max.ok_or_else(|| Error::Numeric("softmax row has every entry masked".into()))?;
    let mut sum = T::zero();
    for (j, &s) in scores.iter().enumerate() {
        if blocked(j) {
            out[j] = T::zero();
        } else {
            let e = ((s / tau) - max).exp();
            out[j] = e;
            sum = sum + e;
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        if !blocked(j) {
            *o = *o / sum;
        }
    }
    Ok(())
}

// ── Tape nodes ───────────────────────────────────────────────────────

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    Matmul { a: VarId, b: VarId },
    Transpose { x: VarId },
    Add { a: VarId, b: VarId },
    AddConst { x: VarId },
    AddRow { x: VarId, row: VarId },
    Mul { a: VarId, b: VarId },
    MulRow { x: VarId, row: VarId },
    Scale { x: VarId, c: T },
    SoftmaxMasked { x: VarId, mask: Option<Rc<AttnMask>> },
    SelSoftmax { x: VarId },
    LayerNorm { x: VarId, gamma: VarId, beta: VarId, eps: T },
    Gelu { x: VarId },
    Reshape { x: VarId },
    Patchify { x: VarId, patch: usize },
    Unpatchify { x: VarId, h: usize, w: usize, patch: usize },
    ConcatRows { a: VarId, b: VarId },
    ConcatCols { xs: Vec<VarId> },
    SliceRows { x: VarId, start: usize },
    SliceCols { x: VarId, start: usize },
    Mean { x: VarId },
    SumSq { x: VarId },
    EmbedLookup { table: VarId, ids: Vec<usize> },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::AddConst { .. } => "add-const",
            Op::AddRow { .. } => "add-row",
            Op::Mul { .. } => "mul",
            Op::MulRow { .. } => "mul-row",
            Op::Scale { .. } => "scalar-scale",
            Op::SoftmaxMasked { .. } => "softmax-with-mask",
            Op::SelSoftmax { .. } => "sel-softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu { .. } => "gelu",
            Op::Reshape { .. } => "reshape",
            Op::Patchify { .. } => "patchify",
            Op::Unpatchify { .. } => "unpatchify",
            Op::ConcatRows { .. } => "concat-rows",
            Op::ConcatCols { .. } => "concat-cols",
            Op::SliceRows { .. } => "slice-rows",
            Op::SliceCols { .. } => "slice-cols",
            Op::Mean { .. } => "mean",
            Op::SumSq { .. } => "sum-of-squares",
            Op::EmbedLookup { .. } => "embed-lookup",
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// The tape: forward values plus enough structure to replay in reverse.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, VarId>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: BTreeMap::new(), grads: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> VarId {
        debug_assert!(
            value.all_finite(),
            "op {} produced non-finite values",
            op.name()
        );
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Register a constant/input leaf.
    pub fn input(&mut self, value: Tensor<T>) -> VarId {
        self.push(value, Op::Leaf)
    }

    /// Register a named parameter leaf. Repeated registration of the same
    /// name returns the original id so a parameter appears once per graph.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> VarId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(value.clone(), Op::Leaf);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn m2(&self, op: &'static str, id: VarId) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected rank-2 tensor, got shape {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    // ── Forward builders ─────────────────────────────────────────────

    /// `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, ka) = self.m2("matmul", a)?;
        let (kb, n) = self.m2("matmul", b)?;
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, ka, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: VarId) -> Result<VarId> {
        let (m, n) = self.m2("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        transpose_into(src, m, n, &mut out);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Transpose { x }))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("operand shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn add_const(&mut self, x: VarId, c: T) -> VarId {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddConst { x })
    }

    /// Broadcast add of a `[d]` row vector over every row of `[n,d]`.
    pub fn add_row(&mut self, x: VarId, row: VarId) -> Result<VarId> {
        let (_, d) = self.m2("add-row", x)?;
        let rs = self.shape(row);
        if rs != [d] {
            return Err(Error::shape(
                "add-row",
                format!("row shape {:?} does not match matrix {:?}", rs, self.shape(x)),
            ));
        }
        let rowv = self.value(row).data().to_vec();
        let xv = self.value(x);
        let data: Vec<T> =
            xv.data().iter().enumerate().map(|(i, &v)| v + rowv[i % d]).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddRow { x, row }))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("operand shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    /// Broadcast multiply of a `[d]` row vector over every row of `[n,d]`.
    pub fn mul_row(&mut self, x: VarId, row: VarId) -> Result<VarId> {
        let (_, d) = self.m2("mul-row", x)?;
        let rs = self.shape(row);
        if rs != [d] {
            return Err(Error::shape(
                "mul-row",
                format!("row shape {:?} does not match matrix {:?}", rs, self.shape(x)),
            ));
        }
        let rowv = self.value(row).data().to_vec();
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * rowv[i % d])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::MulRow { x, row }))
    }

    pub fn scale(&mut self, x: VarId, c: T) -> VarId {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c })
    }

    /// `a - b`, composed from add and scale.
    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    /// Row-wise softmax of a `[r,c]` score matrix under an optional blocked mask.
    pub fn softmax_masked(&mut self, x: VarId, mask: Option<Rc<AttnMask>>) -> Result<VarId> {
        let (r, c) = self.m2("softmax-with-mask", x)?;
        if let Some(m) = &mask {
            if (m.rows(), m.cols()) != (r, c) {
                return Err(Error::shape(
                    "softmax-with-mask",
                    format!("mask {}x{} does not match scores {}x{}", m.rows(), m.cols(), r, c),
                ));
            }
        }
        let src = self.value(x).data().to_vec();
        let mut out = vec![T::zero(); r * c];
        for q in 0..r {
            let row = &src[q * c..(q + 1) * c];
            let orow = &mut out[q * c..(q + 1) * c];
            match &mask {
                Some(m) => softmax_row_into(row, T::one(), |k| m.is_blocked(q, k), orow)?,
                None => softmax_row_into(row, T::one(), |_| false, orow)?,
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Op::SoftmaxMasked { x, mask }))
    }

    /// Row-wise selective softmax: each row of `[r,c]` goes through the
    /// configured selection strategy. Selection is straight-through: the
    /// backward pass treats the selected support as fixed.
    pub fn sel_softmax(&mut self, x: VarId, strategy: &SelectionStrategy) -> Result<VarId> {
        let (r, c) = self.m2("sel-softmax", x)?;
        let src = self.value(x).data().to_vec();
        let mut out = vec![T::zero(); r * c];
        for q in 0..r {
            let row = &src[q * c..(q + 1) * c];
            let w = crate::selattn::sel_softmax(row, strategy)?;
            out[q * c..(q + 1) * c].copy_from_slice(&w);
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Op::SelSoftmax { x }))
    }

    /// Per-row layer normalization of `[n,d]` with learnable `[d]` gain/bias.
    pub fn layernorm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: T) -> Result<VarId> {
        let (n, d) = self.m2("layernorm", x)?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layernorm",
                format!(
                    "gamma {:?} / beta {:?} do not match feature dim {} of {:?}",
                    self.shape(gamma),
                    self.shape(beta),
                    d,
                    self.shape(x)
                ),
            ));
        }
        let xv = self.value(x).data().to_vec();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let (mean, rstd) = row_mean_rstd(row, eps);
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(gelu_scalar);
        self.push(value, Op::Gelu { x })
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// `[h,w,c]` image to `[(h/p)*(w/p), p*p*c]` patch tokens, patches in
    /// row-major grid order, each patch flattened (row, col, channel).
    pub fn patchify(&mut self, x: VarId, patch: usize) -> Result<VarId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("patchify", format!("expected rank-3 image, got {:?}", s)));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::shape(
                "patchify",
                format!("image {}x{} not divisible by patch {}", h, w, patch),
            ));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); h * w * c];
        patchify_into(src, h, w, c, patch, &mut out);
        let np = (h / patch) * (w / patch);
        let value = Tensor::new(vec![np, patch * patch * c], out)?;
        Ok(self.push(value, Op::Patchify { x, patch }))
    }

    /// Inverse of `patchify`: `[np, p*p*c]` tokens back to an `[h,w,c]` image.
    pub fn unpatchify(&mut self, x: VarId, h: usize, w: usize, patch: usize) -> Result<VarId> {
        let (np, cols) = self.m2("unpatchify", x)?;
        if patch == 0 || h % patch != 0 || w % patch != 0 || cols % (patch * patch) != 0 {
            return Err(Error::shape(
                "unpatchify",
                format!("target {}x{} patch {} incompatible with token cols {}", h, w, patch, cols),
            ));
        }
        let c = cols / (patch * patch);
        if np != (h / patch) * (w / patch) {
            return Err(Error::shape(
                "unpatchify",
                format!("{} tokens cannot tile {}x{} with patch {}", np, h, w, patch),
            ));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); h * w * c];
        unpatchify_into(src, h, w, c, patch, &mut out);
        let value = Tensor::new(vec![h, w, c], out)?;
        Ok(self.push(value, Op::Unpatchify { x, h, w, patch }))
    }

    /// Concatenate two `[n_i, d]` matrices along the sequence (row) axis.
    pub fn concat_rows(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (na, da) = self.m2("concat-rows", a)?;
        let (nb, db) = self.m2("concat-rows", b)?;
        if da != db {
            return Err(Error::shape(
                "concat-rows",
                format!("column counts differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut data = Vec::with_capacity((na + nb) * da);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![na + nb, da], data)?;
        Ok(self.push(value, Op::ConcatRows { a, b }))
    }

    /// Concatenate `[n, d_i]` matrices along the feature (column) axis.
    pub fn concat_cols(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.is_empty() {
            return Err(Error::shape("concat-cols", "no inputs".into()));
        }
        let (n, _) = self.m2("concat-cols", xs[0])?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (nx, dx) = self.m2("concat-cols", x)?;
            if nx != n {
                return Err(Error::shape(
                    "concat-cols",
                    format!("row counts differ: {} vs {}", n, nx),
                ));
            }
            widths.push(dx);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); n * total];
        let mut off = 0;
        for (&x, &dx) in xs.iter().zip(&widths) {
            let src = self.value(x).data();
            for r in 0..n {
                data[r * total + off..r * total + off + dx]
                    .copy_from_slice(&src[r * dx..(r + 1) * dx]);
            }
            off += dx;
        }
        let value = Tensor::new(vec![n, total], data)?;
        Ok(self.push(value, Op::ConcatCols { xs: xs.to_vec() }))
    }

    /// Rows `[start, start+len)` of a `[n,d]` matrix.
    pub fn slice_rows(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let (n, d) = self.m2("slice-rows", x)?;
        if start + len > n {
            return Err(Error::shape(
                "slice-rows",
                format!("rows {}..{} out of bounds for {:?}", start, start + len, self.shape(x)),
            ));
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let value = Tensor::new(vec![len, d], data)?;
        Ok(self.push(value, Op::SliceRows { x, start }))
    }

    /// Columns `[start, start+len)` of a `[n,d]` matrix.
    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let (n, d) = self.m2("slice-cols", x)?;
        if start + len > d {
            return Err(Error::shape(
                "slice-cols",
                format!("cols {}..{} out of bounds for {:?}", start, start + len, self.shape(x)),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let value = Tensor::new(vec![n, len], data)?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean(&mut self, x: VarId) -> VarId {
        let v = self.value(x);
        let sum: T = v.data().iter().copied().sum();
        let value = Tensor::scalar(sum / T::from_usize(v.numel()));
        self.push(value, Op::Mean { x })
    }

    /// Sum of squared elements, as a `[1]` scalar.
    pub fn sum_sq(&mut self, x: VarId) -> VarId {
        let v = self.value(x);
        let sum: T = v.data().iter().map(|&e| e * e).sum();
        let value = Tensor::scalar(sum);
        self.push(value, Op::SumSq { x })
    }

    /// Gather rows of a `[vocab, d]` table by token id.
    pub fn embed_lookup(&mut self, table: VarId, ids: &[usize]) -> Result<VarId> {
        let (v, d) = self.m2("embed-lookup", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Data(format!("token id {} out of range for vocab {}", bad, v)));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(value, Op::EmbedLookup { table, ids: ids.to_vec() }))
    }

    /// Mean squared error between two same-shape values, as a `[1]` scalar.
    pub fn mse(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients are then available via
    /// `grad` / `param_grads`. Errors if the loss is not a finite scalar.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Numeric(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.all_finite() {
            return Err(Error::Numeric("backward called on a non-finite loss".into()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::filled(lv.shape().to_vec(), T::one()));

        for i in (0..self.nodes.len()).rev() {
            let Some(up) = self.grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            self.backward_op(VarId(i), &op, &up)?;
            // Re-store so callers can inspect intermediate gradients.
            self.grads[i] = Some(up);
        }
        Ok(())
    }

    pub fn grad(&self, id: VarId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every registered parameter; zeros where no gradient flowed.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, &id)| {
                let g = self
                    .grad(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(id).shape().to_vec()));
                (name.clone(), g)
            })
            .collect()
    }

    fn accumulate(&mut self, id: VarId, add: Tensor<T>) {
        match &mut self.grads[id.0] {
            Some(g) => {
                for (gv, av) in g.data_mut().iter_mut().zip(add.data()) {
                    *gv = *gv + *av;
                }
            }
            slot @ None => *slot = Some(add),
        }
    }

    fn backward_op(&mut self, out: VarId, op: &Op<T>, up: &Tensor<T>) -> Result<()> {
        match op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = self.m2("matmul", *a)?;
                let (_, n) = self.m2("matmul", *b)?;
                // dA = dOut @ B^T
                let mut bt = vec![T::zero(); k * n];
                transpose_into(self.value(*b).data(), k, n, &mut bt);
                let mut da = vec![T::zero(); m * k];
                matmul_acc(up.data(), &bt, m, n, k, &mut da);
                // dB = A^T @ dOut
                let mut at = vec![T::zero(); m * k];
                transpose_into(self.value(*a).data(), m, k, &mut at);
                let mut db = vec![T::zero(); k * n];
                matmul_acc(&at, up.data(), k, m, n, &mut db);
                self.accumulate(*a, Tensor::new(vec![m, k], da)?);
                self.accumulate(*b, Tensor::new(vec![k, n], db)?);
            }

            Op::Transpose { x } => {
                let (m, n) = self.m2("transpose", *x)?;
                let mut dx = vec![T::zero(); m * n];
                transpose_into(up.data(), n, m, &mut dx);
                self.accumulate(*x, Tensor::new(vec![m, n], dx)?);
            }

            Op::Add { a, b } => {
                self.accumulate(*a, up.clone());
                self.accumulate(*b, up.clone());
            }

            Op::AddConst { x } => {
                self.accumulate(*x, up.clone());
            }

            Op::AddRow { x, row } => {
                let (n, d) = self.m2("add-row", *x)?;
                self.accumulate(*x, up.clone());
                let mut dr = vec![T::zero(); d];
                for r in 0..n {
                    for j in 0..d {
                        dr[j] = dr[j] + up.data()[r * d + j];
                    }
                }
                self.accumulate(*row, Tensor::new(vec![d], dr)?);
            }

            Op::Mul { a, b } => {
                let da: Vec<T> = up
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&u, &bv)| u * bv)
                    .collect();
                let db: Vec<T> = up
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&u, &av)| u * av)
                    .collect();
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                self.accumulate(*a, Tensor::new(sa, da)?);
                self.accumulate(*b, Tensor::new(sb, db)?);
            }

            Op::MulRow { x, row } => {
                let (n, d) = self.m2("mul-row", *x)?;
                let rowv = self.value(*row).data().to_vec();
                let xv = self.value(*x).data().to_vec();
                let dx: Vec<T> =
                    up.data().iter().enumerate().map(|(i, &u)| u * rowv[i % d]).collect();
                let mut dr = vec![T::zero(); d];
                for r in 0..n {
                    for j in 0..d {
                        dr[j] = dr[j] + up.data()[r * d + j] * xv[r * d + j];
                    }
                }
                self.accumulate(*x, Tensor::new(vec![n, d], dx)?);
                self.accumulate(*row, Tensor::new(vec![d], dr)?);
            }

            Op::Scale { x, c } => {
                let dx = up.map(|u| u * *c);
                self.accumulate(*x, dx);
            }

            // Shared VJP for plain, masked, and selective softmax: with the
            // support frozen, renormalized selection is exactly a masked
            // softmax, so dX_j = w_j * (dW_j - sum_l dW_l * w_l) per row.
            Op::SoftmaxMasked { x, .. } | Op::SelSoftmax { x } => {
                let (r, c) = self.m2("softmax", *x)?;
                let w = self.value(out).data().to_vec();
                let mut dx = vec![T::zero(); r * c];
                for q in 0..r {
                    let wr = &w[q * c..(q + 1) * c];
                    let ur = &up.data()[q * c..(q + 1) * c];
                    let mut dot = T::zero();
                    for j in 0..c {
                        dot = dot + ur[j] * wr[j];
                    }
                    for j in 0..c {
                        dx[q * c + j] = wr[j] * (ur[j] - dot);
                    }
                }
                self.accumulate(*x, Tensor::new(vec![r, c], dx)?);
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let (n, d) = self.m2("layernorm", *x)?;
                let xv = self.value(*x).data().to_vec();
                let g = self.value(*gamma).data().to_vec();
                let dn = T::from_usize(d);
                let mut dx = vec![T::zero(); n * d];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for r in 0..n {
                    let row = &xv[r * d..(r + 1) * d];
                    let urow = &up.data()[r * d..(r + 1) * d];
                    let (mean, rstd) = row_mean_rstd(row, *eps);
                    // xhat and reductions for the row
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    let mut xhat = vec![T::zero(); d];
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rstd;
                        let dxh = urow[j] * g[j];
                        sum_dxhat = sum_dxhat + dxh;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxh * xhat[j];
                        dgamma[j] = dgamma[j] + urow[j] * xhat[j];
                        dbeta[j] = dbeta[j] + urow[j];
                    }
                    for j in 0..d {
                        let dxh = urow[j] * g[j];
                        dx[r * d + j] =
                            rstd * (dxh - sum_dxhat / dn - xhat[j] * sum_dxhat_xhat / dn);
                    }
                }
                self.accumulate(*x, Tensor::new(vec![n, d], dx)?);
                self.accumulate(*gamma, Tensor::new(vec![d], dgamma)?);
                self.accumulate(*beta, Tensor::new(vec![d], dbeta)?);
            }

            Op::Gelu { x } => {
                let dx: Vec<T> = up
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&u, &v)| u * gelu_grad_scalar(v))
                    .collect();
                let s = self.value(*x).shape().to_vec();
                self.accumulate(*x, Tensor::new(s, dx)?);
            }

            Op::Reshape { x } => {
                let s = self.value(*x).shape().to_vec();
                self.accumulate(*x, up.reshaped(s)?);
            }

            Op::Patchify { x, patch } => {
                let (h, w, c) = self.value(*x).dims3()?;
                let mut dx = vec![T::zero(); h * w * c];
                unpatchify_into(up.data(), h, w, c, *patch, &mut dx);
                self.accumulate(*x, Tensor::new(vec![h, w, c], dx)?);
            }

            Op::Unpatchify { x, h, w, patch } => {
                let (np, cols) = self.m2("unpatchify", *x)?;
                let c = cols / (patch * patch);
                let mut dx = vec![T::zero(); np * cols];
                patchify_into(up.data(), *h, *w, c, *patch, &mut dx);
                self.accumulate(*x, Tensor::new(vec![np, cols], dx)?);
            }

            Op::ConcatRows { a, b } => {
                let (na, d) = self.m2("concat-rows", *a)?;
                let (nb, _) = self.m2("concat-rows", *b)?;
                let da = up.data()[..na * d].to_vec();
                let db = up.data()[na * d..(na + nb) * d].to_vec();
                self.accumulate(*a, Tensor::new(vec![na, d], da)?);
                self.accumulate(*b, Tensor::new(vec![nb, d], db)?);
            }

            Op::ConcatCols { xs } => {
                let (n, total) = up.dims2()?;
                let mut off = 0;
                for &x in xs {
                    let (_, dx) = self.m2("concat-cols", x)?;
                    let mut part = vec![T::zero(); n * dx];
                    for r in 0..n {
                        part[r * dx..(r + 1) * dx]
                            .copy_from_slice(&up.data()[r * total + off..r * total + off + dx]);
                    }
                    self.accumulate(x, Tensor::new(vec![n, dx], part)?);
                    off += dx;
                }
            }

            Op::SliceRows { x, start } => {
                let (n, d) = self.m2("slice-rows", *x)?;
                let (len, _) = up.dims2()?;
                let mut dx = vec![T::zero(); n * d];
                dx[start * d..(start + len) * d].copy_from_slice(up.data());
                self.accumulate(*x, Tensor::new(vec![n, d], dx)?);
            }

            Op::SliceCols { x, start } => {
                let (n, d) = self.m2("slice-cols", *x)?;
                let (_, len) = up.dims2()?;
                let mut dx = vec![T::zero(); n * d];
                for r in 0..n {
                    dx[r * d + start..r * d + start + len]
                        .copy_from_slice(&up.data()[r * len..(r + 1) * len]);
                }
                self.accumulate(*x, Tensor::new(vec![n, d], dx)?);
            }

            Op::Mean { x } => {
                let v = self.value(*x);
                let scale = up.data()[0] / T::from_usize(v.numel());
                let dx = Tensor::filled(v.shape().to_vec(), scale);
                self.accumulate(*x, dx);
            }

            Op::SumSq { x } => {
                let two = T::from_f64(2.0);
                let u = up.data()[0];
                let dx = self.value(*x).map(|v| two * v * u);
                self.accumulate(*x, dx);
            }

            Op::EmbedLookup { table, ids } => {
                let (v, d) = self.m2("embed-lookup", *table)?;
                let mut dt = vec![T::zero(); v * d];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] = dt[i * d + j] + up.data()[r * d + j];
                    }
                }
                self.accumulate(*table, Tensor::new(vec![v, d], dt)?);
            }
        }
        Ok(())
    }
}

// ── Scalar kernels ───────────────────────────────────────────────────

fn matmul_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

fn transpose_into<T: Real>(a: &[T], m: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

fn patchify_into<T: Real>(src: &[T], h: usize, w: usize, c: usize, p: usize, out: &mut [T]) {
    let gw = w / p;
    let cols = p * p * c;
    for gi in 0..h / p {
        for gj in 0..gw {
            let tok = gi * gw + gj;
            for pr in 0..p {
                for pc in 0..p {
                    for ch in 0..c {
                        out[tok * cols + (pr * p + pc) * c + ch] =
                            src[((gi * p + pr) * w + (gj * p + pc)) * c + ch];
                    }
                }
            }
        }
    }
}

fn unpatchify_into<T: Real>(src: &[T], h: usize, w: usize, c: usize, p: usize, out: &mut [T]) {
    let gw = w / p;
    let cols = p * p * c;
    for gi in 0..h / p {
        for gj in 0..gw {
            let tok = gi * gw + gj;
            for pr in 0..p {
                for pc in 0..p {
                    for ch in 0..c {
                        out[((gi * p + pr) * w + (gj * p + pc)) * c + ch] =
                            src[tok * cols + (pr * p + pc) * c + ch];
                    }
                }
            }
        }
    }
}

fn row_mean_rstd<T: Real>(row: &[T], eps: T) -> (T, T) {
    let dn = T::from_usize(row.len());
    let mut mean = T::zero();
    for &v in row {
        mean = mean + v;
    }
    mean = mean / dn;
    let mut var = T::zero();
    for &v in row {
        let d = v - mean;
        var = var + d * d;
    }
    var = var / dn;
    (mean, T::one() / (var + eps).sqrt())
}

/// GELU, tanh approximation.
fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::from_f64(0.044_715);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044_715);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

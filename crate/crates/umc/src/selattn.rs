//! Selective attention: sparsified softmax over condition tokens, the
//! selection strategies (full / top-k / top-p / top-p-tau / top-pk), and the
//! joint-attention mask for the concatenated condition-noise sequence.

use std::rc::Rc;

use crate::diffcore::tape::{softmax_row_into, AttnMask, Tape, VarId};
use crate::diffcore::tensor::{Real, Tensor};
use crate::error::{Error, Result};

// ── Strategy ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionKind {
    Full,
    TopK,
    TopP,
    TopPTau,
    TopPK,
}

impl SelectionKind {
    pub const ALL: [SelectionKind; 5] = [
        SelectionKind::Full,
        SelectionKind::TopK,
        SelectionKind::TopP,
        SelectionKind::TopPTau,
        SelectionKind::TopPK,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionKind::Full => "full",
            SelectionKind::TopK => "top-k",
            SelectionKind::TopP => "top-p",
            SelectionKind::TopPTau => "top-p-tau",
            SelectionKind::TopPK => "top-pk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SelectionKind::Full),
            "top-k" => Ok(SelectionKind::TopK),
            "top-p" => Ok(SelectionKind::TopP),
            "top-p-tau" => Ok(SelectionKind::TopPTau),
            "top-pk" => Ok(SelectionKind::TopPK),
            other => Err(Error::Config(format!(
                "unknown selection strategy '{}' (expected full|top-k|top-p|top-p-tau|top-pk)",
                other
            ))),
        }
    }
}

impl std::fmt::Display for SelectionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Selection policy with its hyperparameters. `k` and `p` are ignored by the
/// kinds that do not use them; the temperature applies to `full`, `top-k`,
/// and `top-p-tau` (plain `top-p` and `top-pk` always run at temperature 1).
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionStrategy {
    pub kind: SelectionKind,
    pub k: usize,
    pub p: f64,
    pub tau: f64,
}

impl SelectionStrategy {
    pub const DEFAULT_K: usize = 8;
    pub const DEFAULT_P: f64 = 0.2;
    pub const DEFAULT_TAU: f64 = 1.0;
    /// Grid-searched temperature for the top-p-tau variant.
    pub const TOP_P_TAU_BEST: f64 = 0.8;

    pub fn new(kind: SelectionKind, k: usize, p: f64, tau: f64) -> Result<Self> {
        let s = SelectionStrategy { kind, k, p, tau };
        s.validate()?;
        Ok(s)
    }

    pub fn full() -> Self {
        SelectionStrategy {
            kind: SelectionKind::Full,
            k: Self::DEFAULT_K,
            p: Self::DEFAULT_P,
            tau: Self::DEFAULT_TAU,
        }
    }

    pub fn top_k(k: usize) -> Self {
        SelectionStrategy { kind: SelectionKind::TopK, k, p: Self::DEFAULT_P, tau: Self::DEFAULT_TAU }
    }

    pub fn top_p(p: f64) -> Self {
        SelectionStrategy { kind: SelectionKind::TopP, k: Self::DEFAULT_K, p, tau: Self::DEFAULT_TAU }
    }

    pub fn top_p_tau(p: f64, tau: f64) -> Self {
        SelectionStrategy { kind: SelectionKind::TopPTau, k: Self::DEFAULT_K, p, tau }
    }

    pub fn top_pk(p: f64, k: usize) -> Self {
        SelectionStrategy { kind: SelectionKind::TopPK, k, p, tau: Self::DEFAULT_TAU }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config(format!("selection k must be >= 1, got {}", self.k)));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Config(format!("selection p must be in (0,1], got {}", self.p)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("selection tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

// ── sel_softmax ──────────────────────────────────────────────────────

/// Indices ordered by score descending, ties broken by lowest index.
/// Softmax is strictly monotone, so this is also the probability order.
fn score_order<T: Real>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j].partial_cmp(&scores[i]).expect("scores validated finite").then(i.cmp(&j))
    });
    order
}

fn validate_scores<T: Real>(scores: &[T]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Numeric("sel_softmax on an empty score vector".into()));
    }
    if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("sel_softmax: non-finite score at index {}", i)));
    }
    Ok(())
}

fn full_softmax<T: Real>(scores: &[T], tau: T) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); scores.len()];
    softmax_row_into(scores, tau, |_| false, &mut out)?;
    Ok(out)
}

/// Walks the probability order and returns how many entries are needed to
/// reach cumulative mass `p`, always at least one.
fn nucleus_size<T: Real>(probs: &[T], order: &[usize], p: T) -> usize {
    let mut cum = T::zero();
    for (taken, &idx) in order.iter().enumerate() {
        cum = cum + probs[idx];
        if cum >= p {
            return taken + 1;
        }
    }
    order.len()
}

/// Selection weights plus the boolean support the strategy kept.
///
/// Semantics per kind:
/// - `full`: softmax(scores/tau) over everything.
/// - `top-k`: block all but the k top scores, then softmax survivors at tau.
/// - `top-p`: softmax first (tau fixed at 1), keep the smallest prefix of the
///   probability order reaching mass p, zero the rest, renormalize.
/// - `top-p-tau`: top-p applied to softmax(scores/tau).
/// - `top-pk`: keep min(|top-p set|, k) highest-probability entries, renormalize.
///
/// Whenever the support ends up being the whole vector the renormalization is
/// skipped, so reductions to the full softmax are bit-exact.
pub fn sel_softmax_with_support<T: Real>(
    scores: &[T],
    strategy: &SelectionStrategy,
) -> Result<(Vec<T>, Vec<bool>)> {
    validate_scores(scores)?;
    strategy.validate()?;
    let n = scores.len();
    let tau = T::from_f64(strategy.tau);

    match strategy.kind {
        SelectionKind::Full => Ok((full_softmax(scores, tau)?, vec![true; n])),

        SelectionKind::TopK => {
            if strategy.k >= n {
                return Ok((full_softmax(scores, tau)?, vec![true; n]));
            }
            let order = score_order(scores);
            let mut keep = vec![false; n];
            for &idx in order.iter().take(strategy.k) {
                keep[idx] = true;
            }
            let mut out = vec![T::zero(); n];
            softmax_row_into(scores, tau, |j| !keep[j], &mut out)?;
            Ok((out, keep))
        }

        SelectionKind::TopP | SelectionKind::TopPTau => {
            let tau_eff = if strategy.kind == SelectionKind::TopPTau { tau } else { T::one() };
            let probs = full_softmax(scores, tau_eff)?;
            if strategy.p >= 1.0 {
                return Ok((probs, vec![true; n]));
            }
            let order = score_order(scores);
            let m = nucleus_size(&probs, &order, T::from_f64(strategy.p));
            renormalized_prefix(&probs, &order, m)
        }

        SelectionKind::TopPK => {
            let probs = full_softmax(scores, T::one())?;
            let order = score_order(scores);
            let m_p = if strategy.p >= 1.0 {
                n
            } else {
                nucleus_size(&probs, &order, T::from_f64(strategy.p))
            };
            let m = m_p.min(strategy.k);
            renormalized_prefix(&probs, &order, m)
        }
    }
}

fn renormalized_prefix<T: Real>(
    probs: &[T],
    order: &[usize],
    m: usize,
) -> Result<(Vec<T>, Vec<bool>)> {
    let n = probs.len();
    if m >= n {
        return Ok((probs.to_vec(), vec![true; n]));
    }
    let mut keep = vec![false; n];
    let mut mass = T::zero();
    for &idx in order.iter().take(m) {
        keep[idx] = true;
        mass = mass + probs[idx];
    }
    let mut out = vec![T::zero(); n];
    for j in 0..n {
        if keep[j] {
            out[j] = probs[j] / mass;
        }
    }
    Ok((out, keep))
}

/// Nonnegative weights summing to 1 under the given selection strategy.
pub fn sel_softmax<T: Real>(scores: &[T], strategy: &SelectionStrategy) -> Result<Vec<T>> {
    sel_softmax_with_support(scores, strategy).map(|(w, _)| w)
}

// ── Joint mask ───────────────────────────────────────────────────────

/// Mask over the concatenated `[condition || noise]` sequence: queries in the
/// condition block are cut off from noise keys, so condition tokens stay an
/// anchor that noise cannot write into. Noise queries may attend everywhere.
pub fn build_joint_mask(n_cond: usize, n_noise: usize) -> AttnMask {
    joint_mask_with(n_cond, n_noise, true)
}

/// Variant with a switch for the reverse direction: when `noise_to_cond` is
/// false, noise queries are additionally blocked from condition keys, leaving
/// the selective-attention branch as the only noise-condition pathway.
pub fn joint_mask_with(n_cond: usize, n_noise: usize, noise_to_cond: bool) -> AttnMask {
    joint_mask_parts(n_cond, n_noise, true, !noise_to_cond)
}

/// Fully general form: each cross-block rectangle can be blocked separately.
pub fn joint_mask_parts(
    n_cond: usize,
    n_noise: usize,
    block_cond_to_noise: bool,
    block_noise_to_cond: bool,
) -> AttnMask {
    let total = n_cond + n_noise;
    AttnMask::from_fn(total, total, |q, k| {
        let q_cond = q < n_cond;
        let k_cond = k < n_cond;
        (block_cond_to_noise && q_cond && !k_cond) || (block_noise_to_cond && !q_cond && k_cond)
    })
}

// ── Graph builders ───────────────────────────────────────────────────

/// Bound projection weights for one attention module.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub wq: VarId,
    pub bq: VarId,
    pub wk: VarId,
    pub bk: VarId,
    pub wv: VarId,
    pub bv: VarId,
    pub wo: VarId,
    pub bo: VarId,
}

/// Multi-head self-attention over one `[n,d]` sequence with an optional
/// blocked mask on the `[n,n]` score grid.
pub fn multi_head_self_attention<T: Real>(
    tape: &mut Tape<T>,
    x: VarId,
    w: &AttnWeights,
    heads: usize,
    mask: Option<Rc<AttnMask>>,
) -> Result<VarId> {
    attention_core(tape, x, x, w, heads, &ScoreNorm::Masked(mask)).map(|o| o.out)
}

/// Selective cross-attention output plus the per-head weight matrices
/// (`[n_query, n_key]`) for probing and visualization.
pub struct SelAttnOut {
    pub out: VarId,
    pub head_weights: Vec<VarId>,
}

/// Cross-attention with noise tokens as queries and condition tokens as
/// keys/values; per-head scores are `Q Kᵀ / sqrt(d_head)` and the selection
/// strategy (which owns the temperature) sparsifies each query row.
pub fn selective_attention<T: Real>(
    tape: &mut Tape<T>,
    queries: VarId,
    keys_values: VarId,
    w: &AttnWeights,
    heads: usize,
    strategy: &SelectionStrategy,
) -> Result<SelAttnOut> {
    let nk = tape.value(keys_values).shape()[0];
    if nk == 0 {
        return Err(Error::shape("selective-attention", "empty key/value sequence".into()));
    }
    attention_core(tape, queries, keys_values, w, heads, &ScoreNorm::Selective(strategy.clone()))
}

enum ScoreNorm {
    Masked(Option<Rc<AttnMask>>),
    Selective(SelectionStrategy),
}

fn attention_core<T: Real>(
    tape: &mut Tape<T>,
    q_tokens: VarId,
    kv_tokens: VarId,
    w: &AttnWeights,
    heads: usize,
    norm: &ScoreNorm,
) -> Result<SelAttnOut> {
    let d = tape.value(q_tokens).shape()[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(
            "attention",
            format!("model dim {} not divisible by {} heads", d, heads),
        ));
    }
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).sqrt();

    let qp = tape.matmul(q_tokens, w.wq)?;
    let qp = tape.add_row(qp, w.bq)?;
    let kp = tape.matmul(kv_tokens, w.wk)?;
    let kp = tape.add_row(kp, w.bk)?;
    let vp = tape.matmul(kv_tokens, w.wv)?;
    let vp = tape.add_row(vp, w.bv)?;

    let mut head_outs = Vec::with_capacity(heads);
    let mut head_weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(qp, h * dh, dh)?;
        let kh = tape.slice_cols(kp, h * dh, dh)?;
        let vh = tape.slice_cols(vp, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = match norm {
            ScoreNorm::Masked(mask) => tape.softmax_masked(scores, mask.clone())?,
            ScoreNorm::Selective(strategy) => tape.sel_softmax(scores, strategy)?,
        };
        head_weights.push(weights);
        head_outs.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&head_outs)?;
    let out = tape.matmul(merged, w.wo)?;
    let out = tape.add_row(out, w.bo)?;
    Ok(SelAttnOut { out, head_weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(values: &[f32]) -> Vec<f32> {
        values.to_vec()
    }

    /// Independent scalar reference: plain nested loops, no shared helpers
    /// beyond libm, mirroring the documented strategy semantics.
    pub(crate) fn reference_sel_softmax(scores: &[f32], st: &SelectionStrategy) -> Vec<f32> {
        let n = scores.len();
        let softmax = |tau: f32, blocked: &[bool]| -> Vec<f32> {
            let mut max = f32::NEG_INFINITY;
            for j in 0..n {
                if !blocked[j] && scores[j] / tau > max {
                    max = scores[j] / tau;
                }
            }
            let mut e = vec![0.0f32; n];
            let mut sum = 0.0f32;
            for j in 0..n {
                if !blocked[j] {
                    e[j] = (scores[j] / tau - max).exp();
                    sum += e[j];
                }
            }
            for v in e.iter_mut() {
                *v /= sum;
            }
            e
        };
        let order = {
            let mut o: Vec<usize> = (0..n).collect();
            o.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
            o
        };
        let prefix_for_mass = |probs: &[f32], p: f32| -> usize {
            let mut cum = 0.0f32;
            for (m, &idx) in order.iter().enumerate() {
                cum += probs[idx];
                if cum >= p {
                    return m + 1;
                }
            }
            n
        };
        let renorm = |probs: &[f32], m: usize| -> Vec<f32> {
            if m >= n {
                return probs.to_vec();
            }
            let mut out = vec![0.0f32; n];
            let mut mass = 0.0f32;
            for &idx in order.iter().take(m) {
                mass += probs[idx];
            }
            for &idx in order.iter().take(m) {
                out[idx] = probs[idx] / mass;
            }
            out
        };
        match st.kind {
            SelectionKind::Full => softmax(st.tau as f32, &vec![false; n]),
            SelectionKind::TopK => {
                if st.k >= n {
                    return softmax(st.tau as f32, &vec![false; n]);
                }
                let mut blocked = vec![true; n];
                for &idx in order.iter().take(st.k) {
                    blocked[idx] = false;
                }
                softmax(st.tau as f32, &blocked)
            }
            SelectionKind::TopP | SelectionKind::TopPTau => {
                let tau = if st.kind == SelectionKind::TopPTau { st.tau as f32 } else { 1.0 };
                let probs = softmax(tau, &vec![false; n]);
                if st.p >= 1.0 {
                    return probs;
                }
                let m = prefix_for_mass(&probs, st.p as f32);
                renorm(&probs, m)
            }
            SelectionKind::TopPK => {
                let probs = softmax(1.0, &vec![false; n]);
                let m_p = if st.p >= 1.0 { n } else { prefix_for_mass(&probs, st.p as f32) };
                renorm(&probs, m_p.min(st.k))
            }
        }
    }

    #[test]
    fn top_k_covering_everything_is_uniform_on_equal_scores() {
        let w = sel_softmax(&s(&[0.0, 0.0, 0.0]), &SelectionStrategy::top_k(3)).unwrap();
        for v in &w {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn top_k_two_of_three_matches_reference_masked_softmax() {
        let scores = s(&[2.0, 1.0, 0.0]);
        let w = sel_softmax(&scores, &SelectionStrategy::top_k(2)).unwrap();
        let e2 = 2.0f32.exp();
        let e1 = 1.0f32.exp();
        assert!((w[0] - e2 / (e2 + e1)).abs() < 1e-6);
        assert!((w[1] - e1 / (e2 + e1)).abs() < 1e-6);
        assert_eq!(w[2], 0.0);
        assert!((w[0] - 0.7311).abs() < 1e-4 && (w[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn top_p_keeps_single_dominant_entry() {
        // softmax([5,0,0,0]) puts ~0.98 on the first entry, far above p=0.2.
        let w = sel_softmax(&s(&[5.0, 0.0, 0.0, 0.0]), &SelectionStrategy::top_p(0.2)).unwrap();
        assert_eq!(w, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn reduction_identities_are_bit_exact() {
        let scores = s(&[0.3, -1.2, 2.0, 0.7, 0.1]);
        let full = sel_softmax(&scores, &SelectionStrategy::full()).unwrap();
        let topk = sel_softmax(&scores, &SelectionStrategy::top_k(5)).unwrap();
        let topk_large = sel_softmax(&scores, &SelectionStrategy::top_k(64)).unwrap();
        assert_eq!(full, topk);
        assert_eq!(full, topk_large);

        let topp1 = sel_softmax(&scores, &SelectionStrategy::top_p(1.0)).unwrap();
        assert_eq!(full, topp1);

        let topp = sel_softmax(&scores, &SelectionStrategy::top_p(0.5)).unwrap();
        let topptau1 = sel_softmax(&scores, &SelectionStrategy::top_p_tau(0.5, 1.0)).unwrap();
        assert_eq!(topp, topptau1);
    }

    #[test]
    fn supports_have_documented_sizes() {
        let scores = s(&[0.9, -0.3, 0.2, 1.4, -1.0, 0.05]);
        for k in 1..=6 {
            let (_, keep) = sel_softmax_with_support(&scores, &SelectionStrategy::top_k(k)).unwrap();
            assert_eq!(keep.iter().filter(|&&b| b).count(), k.min(6));
        }
        let (_, keep) = sel_softmax_with_support(&scores, &SelectionStrategy::top_p(0.01)).unwrap();
        assert!(keep.iter().filter(|&&b| b).count() >= 1);
    }

    #[test]
    fn top_pk_takes_smaller_of_the_two_supports() {
        let scores = s(&[3.0, 2.5, 2.0, 1.5, 1.0, 0.5]);
        // top-p mass 0.9 needs several entries; k=2 caps the support.
        let (_, keep) = sel_softmax_with_support(&scores, &SelectionStrategy::top_pk(0.9, 2)).unwrap();
        assert_eq!(keep.iter().filter(|&&b| b).count(), 2);
        // generous k: nucleus size decides
        let (_, keep_p) =
            sel_softmax_with_support(&scores, &SelectionStrategy::top_pk(0.3, 100)).unwrap();
        let (_, keep_plain) =
            sel_softmax_with_support(&scores, &SelectionStrategy::top_p(0.3)).unwrap();
        assert_eq!(keep_p, keep_plain);
    }

    #[test]
    fn errors_on_empty_and_non_finite() {
        assert!(sel_softmax::<f32>(&[], &SelectionStrategy::full()).is_err());
        assert!(sel_softmax(&[1.0, f32::NAN], &SelectionStrategy::full()).is_err());
    }

    #[test]
    fn ties_break_by_lowest_index() {
        let scores = s(&[1.0, 2.0, 2.0, 0.5]);
        let (_, keep) = sel_softmax_with_support(&scores, &SelectionStrategy::top_k(1)).unwrap();
        assert_eq!(keep, vec![false, true, false, false]);
    }

    #[test]
    fn matches_scalar_reference_on_random_vectors() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let strategies = [
            SelectionStrategy::full(),
            SelectionStrategy::top_k(4),
            SelectionStrategy::top_p(0.2),
            SelectionStrategy::top_p_tau(0.2, 0.8),
            SelectionStrategy::top_pk(0.6, 3),
        ];
        for _ in 0..200 {
            let n = rng.gen_range(1..=16);
            let scores: Vec<f32> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            for st in &strategies {
                let (w, keep) = sel_softmax_with_support(&scores, st).unwrap();
                let r = reference_sel_softmax(&scores, st);
                let sum: f32 = w.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                for j in 0..n {
                    assert_eq!(keep[j], r[j] != 0.0 || (keep[j] && r[j] == 0.0), "support mismatch");
                    assert!((w[j] - r[j]).abs() < 1e-6, "{} vs {}", w[j], r[j]);
                }
            }
        }
    }

    #[test]
    fn joint_mask_blocks_condition_queries_from_noise_keys() {
        let m = build_joint_mask(2, 2);
        let mut blocked = Vec::new();
        for q in 0..4 {
            for k in 0..4 {
                if m.is_blocked(q, k) {
                    blocked.push((q, k));
                }
            }
        }
        assert_eq!(blocked, vec![(0, 2), (0, 3), (1, 2), (1, 3)]);
    }

    #[test]
    fn joint_mask_without_noise_blocks_nothing() {
        let m = build_joint_mask(3, 0);
        assert_eq!(m.blocked_count(), 0);
    }

    #[test]
    fn joint_mask_blocked_count_is_product() {
        for (nc, nz) in [(1, 1), (2, 5), (7, 3), (20, 16)] {
            assert_eq!(build_joint_mask(nc, nz).blocked_count(), nc * nz);
        }
        // with the reverse direction also blocked, both rectangles count
        assert_eq!(joint_mask_with(4, 6, false).blocked_count(), 2 * 4 * 6);
    }

    #[test]
    fn gradient_is_exactly_zero_outside_top_k_support() {
        // Scores with wide gaps so a tiny FD step cannot flip the selection.
        let scores = [3.0f64, 2.0, 1.0, 0.0, -1.0];
        let strategy = SelectionStrategy::top_k(2);
        let weight: Vec<f64> = vec![0.7, -0.4, 0.9, 0.3, -0.2];

        let loss_of = |sc: &[f64]| -> f64 {
            let w = sel_softmax(sc, &strategy).unwrap();
            w.iter().zip(&weight).map(|(a, b)| a * b).sum()
        };

        // analytic via tape
        let mut tape = Tape::<f64>::new();
        let x = tape.param("scores", &Tensor::new(vec![1, 5], scores.to_vec()).unwrap());
        let sel = tape.sel_softmax(x, &strategy).unwrap();
        let r = tape.input(Tensor::new(vec![1, 5], weight.clone()).unwrap());
        let prod = tape.mul(sel, r).unwrap();
        let loss = tape.scale(prod, 1.0);
        let loss = {
            let m = tape.mean(loss);
            tape.scale(m, 5.0) // mean * n == sum
        };
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().data().to_vec();

        let h = 1e-5;
        for i in 0..5 {
            let mut plus = scores.to_vec();
            plus[i] += h;
            let mut minus = scores.to_vec();
            minus[i] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            if i < 2 {
                assert!((analytic[i] - fd).abs() < 1e-7, "coord {}: {} vs {}", i, analytic[i], fd);
            } else {
                assert_eq!(analytic[i], 0.0, "non-selected coordinate must have zero gradient");
                assert!(fd.abs() < 1e-12, "fd leak at non-selected coord {}: {}", i, fd);
            }
        }
    }
}

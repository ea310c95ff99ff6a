//! Multi-modal conditioning: learned text/garment encoders and the embedding
//! refiner that turns them into the unified condition sequence the backbone
//! consumes. Attention inside the refiner is masked so that image-tagged
//! tokens never read from text-tagged tokens: garment appearance stays an
//! exact function of the visual prompt.

use std::rc::Rc;

use crate::backbone::params::Graph;
use crate::diffcore::tape::AttnMask;
use crate::diffcore::{Real, Tensor, VarId};
use crate::error::{Error, Result};
use crate::selattn::{multi_head_self_attention, AttnWeights};
use crate::worldgen::{StructuredPrompt, PROMPT_VOCAB};

// ── Refiner configuration ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefinerVariant {
    None,
    Mlp,
    JointTransformer,
    ParallelTransformer,
    FusionTransformer,
}

impl RefinerVariant {
    pub const ALL: [RefinerVariant; 5] = [
        RefinerVariant::None,
        RefinerVariant::Mlp,
        RefinerVariant::JointTransformer,
        RefinerVariant::ParallelTransformer,
        RefinerVariant::FusionTransformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RefinerVariant::None => "none",
            RefinerVariant::Mlp => "mlp",
            RefinerVariant::JointTransformer => "joint-transformer",
            RefinerVariant::ParallelTransformer => "parallel-transformer",
            RefinerVariant::FusionTransformer => "fusion-transformer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RefinerVariant::None),
            "mlp" => Ok(RefinerVariant::Mlp),
            "joint-transformer" | "joint" => Ok(RefinerVariant::JointTransformer),
            "parallel-transformer" | "parallel" => Ok(RefinerVariant::ParallelTransformer),
            "fusion-transformer" | "fusion" => Ok(RefinerVariant::FusionTransformer),
            other => Err(Error::Config(format!("unknown refiner variant '{}'", other))),
        }
    }
}

impl std::fmt::Display for RefinerVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerConfig {
    pub variant: RefinerVariant,
    /// Blocks per stage (per branch and per shared stack for fusion).
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// Mask text keys away from image queries inside refiner attention.
    pub masked: bool,
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "refiner dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.variant != RefinerVariant::None && self.depth < 1 {
            return Err(Error::Config("refiner depth must be >= 1".into()));
        }
        Ok(())
    }
}

// ── Tagged sequences ─────────────────────────────────────────────────

/// A token sequence with per-token modality tags, in the canonical order:
/// text tokens first, then image tokens.
#[derive(Debug, Clone, Copy)]
pub struct ModalityTaggedSequence {
    pub tokens: VarId,
    pub n_text: usize,
    pub n_image: usize,
}

impl ModalityTaggedSequence {
    pub fn len(&self) -> usize {
        self.n_text + self.n_image
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The unified condition sequence C: refined text tokens then garment-patch
/// tokens, modality tags carried through.
pub type ConditionEmbedding = ModalityTaggedSequence;

/// Blocked entries of refiner self-attention: image-tagged queries may not
/// read text-tagged keys. Text queries see everything, and image queries
/// always see the image block, so no row is ever fully blocked.
pub fn modality_mask(n_text: usize, n_image: usize) -> AttnMask {
    let total = n_text + n_image;
    AttnMask::from_fn(total, total, |q, k| q >= n_text && k < n_text)
}

// ── Encoders ─────────────────────────────────────────────────────────

/// Embed the 4 prompt token ids and add learned positional offsets.
pub fn encode_text<T: Real>(g: &mut Graph<T>, prompt: &StructuredPrompt) -> Result<VarId> {
    if let Some(&bad) = prompt.tokens.iter().find(|&&t| t >= PROMPT_VOCAB) {
        return Err(Error::Data(format!("prompt token id {} out of range", bad)));
    }
    let table = g.p("text.embed")?;
    let tok = g.tape.embed_lookup(table, &prompt.tokens)?;
    let pos = g.p("text.pos")?;
    g.tape.add(tok, pos)
}

/// Patchify the garment image into non-overlapping square patches, project
/// each flattened patch to the model dimension, add positional offsets.
pub fn encode_garment<T: Real>(
    g: &mut Graph<T>,
    image: &Tensor<T>,
    garment_size: usize,
    patch: usize,
) -> Result<VarId> {
    if image.shape() != [garment_size, garment_size, 3] {
        return Err(Error::shape(
            "encode-garment",
            format!("expected [{0},{0},3] image, got {1:?}", garment_size, image.shape()),
        ));
    }
    if let Some(i) = image.first_non_finite() {
        return Err(Error::Numeric(format!("garment image has non-finite value at {}", i)));
    }
    let x = g.tape.input(image.clone());
    let patches = g.tape.patchify(x, patch)?;
    let w = g.p("garment.proj.w")?;
    let b = g.p("garment.proj.b")?;
    let proj = g.tape.matmul(patches, w)?;
    let proj = g.tape.add_row(proj, b)?;
    let pos = g.p("garment.pos")?;
    g.tape.add(proj, pos)
}

// ── Attention / block building ───────────────────────────────────────

pub(crate) fn bind_attn<T: Real>(g: &mut Graph<T>, prefix: &str) -> Result<AttnWeights> {
    Ok(AttnWeights {
        wq: g.p(&format!("{prefix}.wq"))?,
        bq: g.p(&format!("{prefix}.bq"))?,
        wk: g.p(&format!("{prefix}.wk"))?,
        bk: g.p(&format!("{prefix}.bk"))?,
        wv: g.p(&format!("{prefix}.wv"))?,
        bv: g.p(&format!("{prefix}.bv"))?,
        wo: g.p(&format!("{prefix}.wo"))?,
        bo: g.p(&format!("{prefix}.bo"))?,
    })
}

pub(crate) fn layernorm_at<T: Real>(g: &mut Graph<T>, x: VarId, prefix: &str) -> Result<VarId> {
    let gamma = g.p(&format!("{prefix}.g"))?;
    let beta = g.p(&format!("{prefix}.b"))?;
    g.tape.layernorm(x, gamma, beta, T::from_f64(1e-5))
}

pub(crate) fn token_mlp<T: Real>(g: &mut Graph<T>, x: VarId, prefix: &str) -> Result<VarId> {
    let w1 = g.p(&format!("{prefix}.fc1.w"))?;
    let b1 = g.p(&format!("{prefix}.fc1.b"))?;
    let w2 = g.p(&format!("{prefix}.fc2.w"))?;
    let b2 = g.p(&format!("{prefix}.fc2.b"))?;
    let h = g.tape.matmul(x, w1)?;
    let h = g.tape.add_row(h, b1)?;
    let h = g.tape.gelu(h);
    let h = g.tape.matmul(h, w2)?;
    g.tape.add_row(h, b2)
}

/// Masked multi-head self-attention over a tagged sequence: image-tagged
/// queries are blocked from text-tagged keys (excluded from normalization,
/// exactly zero weight); text queries attend everywhere.
pub fn masked_self_attention<T: Real>(
    g: &mut Graph<T>,
    seq: &ModalityTaggedSequence,
    prefix: &str,
    heads: usize,
) -> Result<ModalityTaggedSequence> {
    self_attention(g, seq, prefix, heads, true)
}

fn self_attention<T: Real>(
    g: &mut Graph<T>,
    seq: &ModalityTaggedSequence,
    prefix: &str,
    heads: usize,
    masked: bool,
) -> Result<ModalityTaggedSequence> {
    let w = bind_attn(g, prefix)?;
    // A fully-blocked query row is impossible: image queries always see the
    // image block and text queries are never masked.
    let mask = if masked && seq.n_text > 0 && seq.n_image > 0 {
        Some(Rc::new(modality_mask(seq.n_text, seq.n_image)))
    } else {
        None
    };
    let out = multi_head_self_attention(&mut g.tape, seq.tokens, &w, heads, mask)?;
    Ok(ModalityTaggedSequence { tokens: out, ..*seq })
}

/// Pre-norm transformer block with residuals:
/// `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
fn refiner_block<T: Real>(
    g: &mut Graph<T>,
    seq: &ModalityTaggedSequence,
    prefix: &str,
    heads: usize,
    masked: bool,
) -> Result<ModalityTaggedSequence> {
    let normed = layernorm_at(g, seq.tokens, &format!("{prefix}.ln1"))?;
    let normed_seq = ModalityTaggedSequence { tokens: normed, ..*seq };
    let attn = self_attention(g, &normed_seq, &format!("{prefix}.attn"), heads, masked)?;
    let x = g.tape.add(seq.tokens, attn.tokens)?;
    let normed2 = layernorm_at(g, x, &format!("{prefix}.ln2"))?;
    let mlp = token_mlp(g, normed2, &format!("{prefix}.mlp"))?;
    let x = g.tape.add(x, mlp)?;
    Ok(ModalityTaggedSequence { tokens: x, ..*seq })
}

// ── Refiner ──────────────────────────────────────────────────────────

/// Produce the unified condition sequence from encoded text and garment
/// tokens under the configured refiner variant.
pub fn refine<T: Real>(
    g: &mut Graph<T>,
    text: VarId,
    image: VarId,
    cfg: &RefinerConfig,
) -> Result<ConditionEmbedding> {
    cfg.validate()?;
    let n_text = g.tape.value(text).shape()[0];
    let n_image = g.tape.value(image).shape()[0];

    match cfg.variant {
        RefinerVariant::None => {
            let tokens = g.tape.concat_rows(text, image)?;
            Ok(ConditionEmbedding { tokens, n_text, n_image })
        }

        RefinerVariant::Mlp => {
            let x = g.tape.concat_rows(text, image)?;
            let normed = layernorm_at(g, x, "refiner.mlp.ln")?;
            let mlp = token_mlp(g, normed, "refiner.mlp")?;
            let tokens = g.tape.add(x, mlp)?;
            Ok(ConditionEmbedding { tokens, n_text, n_image })
        }

        RefinerVariant::JointTransformer => {
            let tokens = g.tape.concat_rows(text, image)?;
            let mut seq = ModalityTaggedSequence { tokens, n_text, n_image };
            for i in 0..cfg.depth {
                seq = refiner_block(g, &seq, &format!("refiner.joint.{i}"), cfg.heads, cfg.masked)?;
            }
            let tokens = layernorm_at(g, seq.tokens, "refiner.joint.out_ln")?;
            Ok(ConditionEmbedding { tokens, n_text, n_image })
        }

        RefinerVariant::ParallelTransformer => {
            let mut t_seq = ModalityTaggedSequence { tokens: text, n_text, n_image: 0 };
            let mut i_seq = ModalityTaggedSequence { tokens: image, n_text: 0, n_image };
            for i in 0..cfg.depth {
                t_seq = refiner_block(g, &t_seq, &format!("refiner.par.text.{i}"), cfg.heads, false)?;
                i_seq = refiner_block(g, &i_seq, &format!("refiner.par.img.{i}"), cfg.heads, false)?;
            }
            let t_out = layernorm_at(g, t_seq.tokens, "refiner.par.text.out_ln")?;
            let i_out = layernorm_at(g, i_seq.tokens, "refiner.par.img.out_ln")?;
            let tokens = g.tape.concat_rows(t_out, i_out)?;
            Ok(ConditionEmbedding { tokens, n_text, n_image })
        }

        RefinerVariant::FusionTransformer => {
            // stage A: weight-independent per-modality branches
            let mut t_seq = ModalityTaggedSequence { tokens: text, n_text, n_image: 0 };
            let mut i_seq = ModalityTaggedSequence { tokens: image, n_text: 0, n_image };
            for i in 0..cfg.depth {
                t_seq = refiner_block(g, &t_seq, &format!("refiner.fus.text.{i}"), cfg.heads, false)?;
                i_seq = refiner_block(g, &i_seq, &format!("refiner.fus.img.{i}"), cfg.heads, false)?;
            }
            // stage B: shared blocks over the concatenation, masked
            let tokens = g.tape.concat_rows(t_seq.tokens, i_seq.tokens)?;
            let mut seq = ModalityTaggedSequence { tokens, n_text, n_image };
            for i in 0..cfg.depth {
                seq =
                    refiner_block(g, &seq, &format!("refiner.fus.shared.{i}"), cfg.heads, cfg.masked)?;
            }
            let tokens = layernorm_at(g, seq.tokens, "refiner.fus.out_ln")?;
            Ok(ConditionEmbedding { tokens, n_text, n_image })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::params::Parameters;
    use crate::backbone::DiTConfig;
    use crate::worldgen;

    fn tiny_cfg(variant: RefinerVariant) -> DiTConfig {
        let mut cfg = DiTConfig::tiny();
        cfg.refiner.variant = variant;
        cfg
    }

    fn prompt() -> StructuredPrompt {
        StructuredPrompt { tokens: [0, 5, 8, 15] }
    }

    fn garment_image(cfg: &DiTConfig, scale: f32) -> Tensor<f32> {
        Tensor::from_fn(vec![cfg.garment_size, cfg.garment_size, 3], |i| {
            ((i * 13 % 97) as f32 / 97.0) * scale
        })
    }

    #[test]
    fn encode_text_is_deterministic_and_validates_ids() {
        let cfg = DiTConfig::tiny();
        let params = Parameters::init(&cfg, 5);
        let run = || {
            let mut g = Graph::<f32>::new(&params);
            let id = encode_text(&mut g, &prompt()).unwrap();
            g.tape.value(id).clone()
        };
        assert_eq!(run(), run());

        let mut g = Graph::<f32>::new(&params);
        let bad = StructuredPrompt { tokens: [0, 5, 8, 16] };
        assert!(encode_text(&mut g, &bad).is_err());
    }

    #[test]
    fn zeroed_embedding_row_leaves_positional_offset() {
        let cfg = DiTConfig::tiny();
        let mut params = Parameters::init(&cfg, 5);
        let d = cfg.dim;
        // zero the table row for token id 5 (the prompt's second token)
        let mut table = params.get("text.embed").unwrap().clone();
        for j in 0..d {
            table.data_mut()[5 * d + j] = 0.0;
        }
        params.insert("text.embed".into(), table);
        let mut g = Graph::<f32>::new(&params);
        let id = encode_text(&mut g, &prompt()).unwrap();
        let tokens = g.tape.value(id).clone();
        let pos = params.get("text.pos").unwrap();
        for j in 0..d {
            assert_eq!(tokens.data()[d + j], pos.data()[d + j]);
        }
    }

    #[test]
    fn text_gradient_touches_only_used_table_rows() {
        let cfg = DiTConfig::tiny();
        let params = Parameters::init(&cfg, 5);
        let mut g = Graph::<f32>::new(&params);
        let id = encode_text(&mut g, &prompt()).unwrap();
        let loss = g.tape.sum_sq(id);
        g.tape.backward(loss).unwrap();
        let grads = g.tape.param_grads();
        let gt = &grads["text.embed"];
        let d = cfg.dim;
        let used = [0usize, 5, 8, 15];
        for row in 0..worldgen::PROMPT_VOCAB {
            let row_norm: f32 = (0..d).map(|j| gt.data()[row * d + j].abs()).sum();
            if used.contains(&row) {
                assert!(row_norm > 0.0, "used row {} should receive gradient", row);
            } else {
                assert_eq!(row_norm, 0.0, "unused row {} must stay at zero gradient", row);
            }
        }
    }

    #[test]
    fn zero_image_and_zero_bias_yield_positional_tokens() {
        let cfg = DiTConfig::tiny();
        let params = Parameters::init(&cfg, 5);
        let mut g = Graph::<f32>::new(&params);
        let img = Tensor::zeros(vec![cfg.garment_size, cfg.garment_size, 3]);
        let id = encode_garment(&mut g, &img, cfg.garment_size, cfg.patch).unwrap();
        assert_eq!(g.tape.value(id), params.get("garment.pos").unwrap());
    }

    #[test]
    fn garment_projection_matches_scalar_loop() {
        let cfg = DiTConfig::tiny();
        let params = Parameters::init(&cfg, 5);
        let img = garment_image(&cfg, 1.0);
        let mut g = Graph::<f32>::new(&params);
        let id = encode_garment(&mut g, &img, cfg.garment_size, cfg.patch).unwrap();
        let got = g.tape.value(id).clone();

        // scalar reference: explicit patch gather + matrix-vector products
        let p = cfg.patch;
        let gs = cfg.garment_size;
        let d = cfg.dim;
        let w = params.get("garment.proj.w").unwrap();
        let b = params.get("garment.proj.b").unwrap();
        let pos = params.get("garment.pos").unwrap();
        let grid = gs / p;
        for gi in 0..grid {
            for gj in 0..grid {
                let tok = gi * grid + gj;
                let mut flat = Vec::new();
                for pr in 0..p {
                    for pc in 0..p {
                        for ch in 0..3 {
                            flat.push(img.data()[((gi * p + pr) * gs + (gj * p + pc)) * 3 + ch]);
                        }
                    }
                }
                for j in 0..d {
                    let mut acc = 0.0f32;
                    for (k, &fv) in flat.iter().enumerate() {
                        acc += fv * w.data()[k * d + j];
                    }
                    acc += b.data()[j] + pos.data()[tok * d + j];
                    let have = got.data()[tok * d + j];
                    assert!((have - acc).abs() < 1e-5, "token {} dim {}: {} vs {}", tok, j, have, acc);
                }
            }
        }
    }

    #[test]
    fn permuting_patches_permutes_tokens_modulo_positions() {
        let cfg = DiTConfig::tiny();
        let params = Parameters::init(&cfg, 5);
        let p = cfg.patch;
        let gs = cfg.garment_size;
        let d = cfg.dim;
        let img = garment_image(&cfg, 1.0);
        // build a copy with the first two patches swapped (tiny config has a
        // single patch per row, so use two different grid rows)
        let grid = gs / p;
        if grid < 2 {
            return; // tiny config with one patch: nothing to permute
        }
        let mut swapped = img.clone();
        for pr in 0..p {
            for pc in 0..p {
                for ch in 0..3 {
                    let a = ((pr) * gs + pc) * 3 + ch;
                    let b = ((pr) * gs + (p + pc)) * 3 + ch;
                    swapped.data_mut().swap(a, b);
                }
            }
        }
        let tok = |img: &Tensor<f32>| {
            let mut g = Graph::<f32>::new(&params);
            let id = encode_garment(&mut g, img, gs, p).unwrap();
            g.tape.value(id).clone()
        };
        let t1 = tok(&img);
        let t2 = tok(&swapped);
        let pos = params.get("garment.pos").unwrap();
        // token 0 of the swapped encoding minus pos0 equals token 1 of the
        // original minus pos1, and vice versa; all other tokens unchanged
        for j in 0..d {
            let p0 = pos.data()[j];
            let p1 = pos.data()[d + j];
            assert!((t2.data()[j] - p0 - (t1.data()[d + j] - p1)).abs() < 1e-6);
            assert!((t2.data()[d + j] - p1 - (t1.data()[j] - p0)).abs() < 1e-6);
        }
        for tok_i in 2..t1.shape()[0] {
            for j in 0..d {
                assert_eq!(t1.data()[tok_i * d + j], t2.data()[tok_i * d + j]);
            }
        }
    }

    /// Build a tagged sequence from a raw token matrix.
    fn seq_input(g: &mut Graph<f32>, tokens: Tensor<f32>, n_text: usize) -> ModalityTaggedSequence {
        let n = tokens.shape()[0];
        let tokens = g.tape.input(tokens);
        ModalityTaggedSequence { tokens, n_text, n_image: n - n_text }
    }

    #[test]
    fn image_outputs_ignore_text_perturbations_exactly() {
        let cfg = tiny_cfg(RefinerVariant::JointTransformer);
        let params = Parameters::init(&cfg, 11);
        let d = cfg.dim;
        let base = Tensor::from_fn(vec![4, d], |i| ((i as f32) * 0.37).sin());
        let mut poked = base.clone();
        poked.data_mut()[2] += 3.5; // text token 0, some dim

        let run = |tokens: &Tensor<f32>| {
            let params = &params;
            let mut g = Graph::<f32>::new(params);
            let seq = seq_input(&mut g, tokens.clone(), 2);
            let out = masked_self_attention(&mut g, &seq, "refiner.joint.0.attn", cfg.heads).unwrap();
            g.tape.value(out.tokens).clone()
        };
        let a = run(&base);
        let b = run(&poked);
        for i in 2 * d..4 * d {
            assert_eq!(a.data()[i].to_bits(), b.data()[i].to_bits(), "image row bits differ at {i}");
        }
        // text rows do change
        assert_ne!(a.data()[..2 * d], b.data()[..2 * d]);
    }

    #[test]
    fn image_only_sequence_equals_unmasked_attention() {
        let cfg = tiny_cfg(RefinerVariant::JointTransformer);
        let params = Parameters::init(&cfg, 11);
        let tokens = Tensor::from_fn(vec![3, cfg.dim], |i| ((i as f32) * 0.11).cos());
        let masked = {
            let mut g = Graph::<f32>::new(&params);
            let seq = seq_input(&mut g, tokens.clone(), 0);
            let out = masked_self_attention(&mut g, &seq, "refiner.joint.0.attn", cfg.heads).unwrap();
            g.tape.value(out.tokens).clone()
        };
        let unmasked = {
            let mut g = Graph::<f32>::new(&params);
            let seq = seq_input(&mut g, tokens.clone(), 0);
            let out = self_attention(&mut g, &seq, "refiner.joint.0.attn", cfg.heads, false).unwrap();
            g.tape.value(out.tokens).clone()
        };
        assert_eq!(masked, unmasked);
    }

    #[test]
    fn toy_masked_attention_matches_scalar_reference() {
        let cfg = tiny_cfg(RefinerVariant::JointTransformer);
        let params = Parameters::init(&cfg, 23);
        let d = cfg.dim;
        let heads = cfg.heads;
        let dh = d / heads;
        let tokens = Tensor::from_fn(vec![4, d], |i| ((i * 7 % 23) as f32 - 11.0) * 0.1);
        let n_text = 2;

        let got = {
            let mut g = Graph::<f32>::new(&params);
            let seq = seq_input(&mut g, tokens.clone(), n_text);
            let out = masked_self_attention(&mut g, &seq, "refiner.joint.0.attn", heads).unwrap();
            g.tape.value(out.tokens).clone()
        };

        // scalar reference with plain loops
        let w = |n: &str| params.get(&format!("refiner.joint.0.attn.{n}")).unwrap().data().to_vec();
        let (wq, bq, wk, bk) = (w("wq"), w("bq"), w("wk"), w("bk"));
        let (wv, bv, wo, bo) = (w("wv"), w("bv"), w("wo"), w("bo"));
        let proj = |x: &[f32], wm: &[f32], bm: &[f32]| -> Vec<f32> {
            let mut out = vec![0.0f32; 4 * d];
            for r in 0..4 {
                for c in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += x[r * d + k] * wm[k * d + c];
                    }
                    out[r * d + c] = acc + bm[c];
                }
            }
            out
        };
        let q = proj(tokens.data(), &wq, &bq);
        let k = proj(tokens.data(), &wk, &bk);
        let v = proj(tokens.data(), &wv, &bv);
        let mut merged = vec![0.0f32; 4 * d];
        for h in 0..heads {
            for qi in 0..4 {
                let blocked = |kj: usize| qi >= n_text && kj < n_text;
                let mut scores = [0.0f32; 4];
                for (kj, s) in scores.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for c in 0..dh {
                        acc += q[qi * d + h * dh + c] * k[kj * d + h * dh + c];
                    }
                    *s = acc / (dh as f32).sqrt();
                }
                let mut mx = f32::NEG_INFINITY;
                for (kj, &s) in scores.iter().enumerate() {
                    if !blocked(kj) && s > mx {
                        mx = s;
                    }
                }
                let mut weights = [0.0f32; 4];
                let mut sum = 0.0;
                for kj in 0..4 {
                    if !blocked(kj) {
                        weights[kj] = (scores[kj] - mx).exp();
                        sum += weights[kj];
                    }
                }
                for wv_ in weights.iter_mut() {
                    *wv_ /= sum;
                }
                for c in 0..dh {
                    let mut acc = 0.0;
                    for kj in 0..4 {
                        acc += weights[kj] * v[kj * d + h * dh + c];
                    }
                    merged[qi * d + h * dh + c] = acc;
                }
            }
        }
        for r in 0..4 {
            for c in 0..d {
                let mut acc = 0.0;
                for kk in 0..d {
                    acc += merged[r * d + kk] * wo[kk * d + c];
                }
                acc += bo[c];
                let have = got.data()[r * d + c];
                assert!((have - acc).abs() < 1e-4, "({r},{c}): {have} vs {acc}");
            }
        }
    }

    #[test]
    fn refine_none_is_identity() {
        let cfg = tiny_cfg(RefinerVariant::None);
        let params = Parameters::init(&cfg, 3);
        let d = cfg.dim;
        let text = Tensor::from_fn(vec![4, d], |i| i as f32 * 0.01);
        let image = Tensor::from_fn(vec![2, d], |i| 1.0 - i as f32 * 0.02);
        let mut g = Graph::<f32>::new(&params);
        let t = g.tape.input(text.clone());
        let im = g.tape.input(image.clone());
        let c = refine(&mut g, t, im, &cfg.refiner).unwrap();
        let out = g.tape.value(c.tokens);
        assert_eq!(&out.data()[..4 * d], text.data());
        assert_eq!(&out.data()[4 * d..], image.data());
        assert_eq!((c.n_text, c.n_image), (4, 2));
    }

    #[test]
    fn every_variant_preserves_shape_and_tags() {
        for variant in RefinerVariant::ALL {
            let cfg = tiny_cfg(variant);
            let params = Parameters::init(&cfg, 3);
            let d = cfg.dim;
            let text = Tensor::from_fn(vec![4, d], |i| (i as f32 * 0.3).sin());
            let image = Tensor::from_fn(vec![2, d], |i| (i as f32 * 0.7).cos());
            let mut g = Graph::<f32>::new(&params);
            let t = g.tape.input(text);
            let im = g.tape.input(image);
            let c = refine(&mut g, t, im, &cfg.refiner).unwrap();
            assert_eq!(g.tape.value(c.tokens).shape(), &[6, d], "{variant}");
            assert_eq!((c.n_text, c.n_image), (4, 2), "{variant}");
        }
    }

    #[test]
    fn fusion_image_outputs_are_text_blind() {
        for variant in [RefinerVariant::JointTransformer, RefinerVariant::FusionTransformer] {
            let cfg = tiny_cfg(variant);
            let params = Parameters::init(&cfg, 31);
            let d = cfg.dim;
            let text = Tensor::from_fn(vec![4, d], |i| (i as f32 * 0.05).sin());
            let image = Tensor::from_fn(vec![2, d], |i| (i as f32 * 0.02).cos());
            let mut poked = text.clone();
            poked.data_mut()[7] -= 2.0;

            let run = |tx: &Tensor<f32>| {
                let mut g = Graph::<f32>::new(&params);
                let t = g.tape.input(tx.clone());
                let im = g.tape.input(image.clone());
                let c = refine(&mut g, t, im, &cfg.refiner).unwrap();
                g.tape.value(c.tokens).clone()
            };
            let a = run(&text);
            let b = run(&poked);
            for i in 4 * d..6 * d {
                assert_eq!(
                    a.data()[i].to_bits(),
                    b.data()[i].to_bits(),
                    "{variant}: image-tagged output changed at {i}"
                );
            }
        }
    }

    #[test]
    fn joint_variant_matches_scalar_block_reference() {
        // depth-1 joint refiner on a 3-token toy input, checked against a
        // step-by-step scalar implementation of [ln -> masked attn -> res ->
        // ln -> mlp -> res] plus the output layernorm.
        let mut cfg = tiny_cfg(RefinerVariant::JointTransformer);
        cfg.refiner.depth = 1;
        let params = Parameters::init(&cfg, 99);
        let d = cfg.dim;
        let heads = cfg.heads;
        let text = Tensor::from_fn(vec![1, d], |i| (i as f32 * 0.21).sin());
        let image = Tensor::from_fn(vec![2, d], |i| (i as f32 * 0.13).cos());

        let got = {
            let mut g = Graph::<f32>::new(&params);
            let t = g.tape.input(text.clone());
            let im = g.tape.input(image.clone());
            let c = refine(&mut g, t, im, &cfg.refiner).unwrap();
            g.tape.value(c.tokens).clone()
        };

        // ---- scalar reference ----
        let n = 3usize;
        let n_text = 1usize;
        let pd = |name: &str| params.get(name).unwrap().data().to_vec();
        let ln = |x: &[f32], g_: &[f32], b_: &[f32]| -> Vec<f32> {
            let mut out = vec![0.0f32; x.len()];
            for r in 0..x.len() / d {
                let row = &x[r * d..(r + 1) * d];
                let mean: f32 = row.iter().sum::<f32>() / d as f32;
                let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
                let rstd = 1.0 / (var + 1e-5).sqrt();
                for j in 0..d {
                    out[r * d + j] = (row[j] - mean) * rstd * g_[j] + b_[j];
                }
            }
            out
        };
        let matvec = |x: &[f32], rows: usize, w: &[f32], cin: usize, cout: usize, b: &[f32]| {
            let mut out = vec![0.0f32; rows * cout];
            for r in 0..rows {
                for c in 0..cout {
                    let mut acc = 0.0;
                    for k in 0..cin {
                        acc += x[r * cin + k] * w[k * cout + c];
                    }
                    out[r * cout + c] = acc + b[c];
                }
            }
            out
        };
        let mut x: Vec<f32> = text.data().iter().chain(image.data()).copied().collect();
        // block
        let h1 = ln(&x, &pd("refiner.joint.0.ln1.g"), &pd("refiner.joint.0.ln1.b"));
        let q = matvec(&h1, n, &pd("refiner.joint.0.attn.wq"), d, d, &pd("refiner.joint.0.attn.bq"));
        let k = matvec(&h1, n, &pd("refiner.joint.0.attn.wk"), d, d, &pd("refiner.joint.0.attn.bk"));
        let v = matvec(&h1, n, &pd("refiner.joint.0.attn.wv"), d, d, &pd("refiner.joint.0.attn.bv"));
        let dh = d / heads;
        let mut merged = vec![0.0f32; n * d];
        for h in 0..heads {
            for qi in 0..n {
                let blocked = |kj: usize| qi >= n_text && kj < n_text;
                let mut scores = vec![0.0f32; n];
                for kj in 0..n {
                    let mut acc = 0.0;
                    for c in 0..dh {
                        acc += q[qi * d + h * dh + c] * k[kj * d + h * dh + c];
                    }
                    scores[kj] = acc / (dh as f32).sqrt();
                }
                let mut mx = f32::NEG_INFINITY;
                for kj in 0..n {
                    if !blocked(kj) && scores[kj] > mx {
                        mx = scores[kj];
                    }
                }
                let mut wrow = vec![0.0f32; n];
                let mut sum = 0.0;
                for kj in 0..n {
                    if !blocked(kj) {
                        wrow[kj] = (scores[kj] - mx).exp();
                        sum += wrow[kj];
                    }
                }
                for wv_ in wrow.iter_mut() {
                    *wv_ /= sum;
                }
                for c in 0..dh {
                    let mut acc = 0.0;
                    for kj in 0..n {
                        acc += wrow[kj] * v[kj * d + h * dh + c];
                    }
                    merged[qi * d + h * dh + c] = acc;
                }
            }
        }
        let attn = matvec(&merged, n, &pd("refiner.joint.0.attn.wo"), d, d, &pd("refiner.joint.0.attn.bo"));
        for i in 0..n * d {
            x[i] += attn[i];
        }
        let h2 = ln(&x, &pd("refiner.joint.0.ln2.g"), &pd("refiner.joint.0.ln2.b"));
        let f1 = matvec(&h2, n, &pd("refiner.joint.0.mlp.fc1.w"), d, 4 * d, &pd("refiner.joint.0.mlp.fc1.b"));
        let f1g: Vec<f32> = f1
            .iter()
            .map(|&u| {
                0.5 * u * (1.0 + (0.7978845608f32 * (u + 0.044715 * u * u * u)).tanh())
            })
            .collect();
        let f2 = matvec(&f1g, n, &pd("refiner.joint.0.mlp.fc2.w"), 4 * d, d, &pd("refiner.joint.0.mlp.fc2.b"));
        for i in 0..n * d {
            x[i] += f2[i];
        }
        let want = ln(&x, &pd("refiner.joint.out_ln.g"), &pd("refiner.joint.out_ln.b"));

        for i in 0..n * d {
            assert!(
                (got.data()[i] - want[i]).abs() < 1e-4,
                "coord {}: {} vs {}",
                i,
                got.data()[i],
                want[i]
            );
        }
    }
}

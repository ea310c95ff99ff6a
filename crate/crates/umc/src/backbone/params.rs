//! Named parameter tensors, deterministic initialization, and the graph
//! binder that registers parameters on a tape by name.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::backbone::DiTConfig;
use crate::conditioning::RefinerVariant;
use crate::diffcore::{Real, Tape, Tensor, VarId};
use crate::error::{Error, Result};

/// The full named-tensor set of the model. Iteration order is the sorted
/// name order (BTreeMap), which fixes checkpoint byte layout and gradient
/// reduction order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T: Real = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Parameters<T> {
    pub fn from_map(map: BTreeMap<String, Tensor<T>>) -> Self {
        Parameters { map }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter '{}'", name)))
    }

    pub fn insert(&mut self, name: String, value: Tensor<T>) {
        self.map.insert(name, value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.map
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Refiner parameters are the stage-1 trainable set.
    pub fn is_refiner_name(name: &str) -> bool {
        name.starts_with("refiner.")
    }
}

// ── Initialization ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
enum ParamInit {
    Normal(f64),
    Zeros,
    Ones,
}

type ParamSpec = (String, Vec<usize>, ParamInit);

fn attn_specs(prefix: &str, d: usize, out: &mut Vec<ParamSpec>) {
    for proj in ["wq", "wk", "wv", "wo"] {
        out.push((format!("{prefix}.{proj}"), vec![d, d], ParamInit::Normal(0.02)));
    }
    for bias in ["bq", "bk", "bv", "bo"] {
        out.push((format!("{prefix}.{bias}"), vec![d], ParamInit::Zeros));
    }
}

fn layernorm_specs(prefix: &str, d: usize, out: &mut Vec<ParamSpec>) {
    out.push((format!("{prefix}.g"), vec![d], ParamInit::Ones));
    out.push((format!("{prefix}.b"), vec![d], ParamInit::Zeros));
}

fn mlp_specs(prefix: &str, d: usize, out: &mut Vec<ParamSpec>) {
    out.push((format!("{prefix}.fc1.w"), vec![d, 4 * d], ParamInit::Normal(0.02)));
    out.push((format!("{prefix}.fc1.b"), vec![4 * d], ParamInit::Zeros));
    out.push((format!("{prefix}.fc2.w"), vec![4 * d, d], ParamInit::Normal(0.02)));
    out.push((format!("{prefix}.fc2.b"), vec![d], ParamInit::Zeros));
}

/// A pre-norm transformer block: two layernorms, attention, and an MLP.
fn block_specs(prefix: &str, d: usize, out: &mut Vec<ParamSpec>) {
    layernorm_specs(&format!("{prefix}.ln1"), d, out);
    attn_specs(&format!("{prefix}.attn"), d, out);
    layernorm_specs(&format!("{prefix}.ln2"), d, out);
    mlp_specs(&format!("{prefix}.mlp"), d, out);
}

/// Every parameter the configuration implies, in a fixed creation order.
fn param_specs(cfg: &DiTConfig) -> Vec<ParamSpec> {
    let d = cfg.dim;
    let mut out = Vec::new();

    // text encoder: embedding table plus learned positional offsets
    out.push(("text.embed".into(), vec![crate::worldgen::PROMPT_VOCAB, d], ParamInit::Normal(0.02)));
    out.push(("text.pos".into(), vec![crate::worldgen::PROMPT_LEN, d], ParamInit::Normal(0.02)));

    // garment encoder: patch projection plus 2-D positional offsets
    let patch_dim = cfg.patch * cfg.patch * 3;
    let n_gtokens = (cfg.garment_size / cfg.patch) * (cfg.garment_size / cfg.patch);
    out.push(("garment.proj.w".into(), vec![patch_dim, d], ParamInit::Normal(0.02)));
    out.push(("garment.proj.b".into(), vec![d], ParamInit::Zeros));
    out.push(("garment.pos".into(), vec![n_gtokens, d], ParamInit::Normal(0.02)));

    // refiner
    match cfg.refiner.variant {
        RefinerVariant::None => {}
        RefinerVariant::Mlp => {
            layernorm_specs("refiner.mlp.ln", d, &mut out);
            mlp_specs("refiner.mlp", d, &mut out);
        }
        RefinerVariant::JointTransformer => {
            for i in 0..cfg.refiner.depth {
                block_specs(&format!("refiner.joint.{i}"), d, &mut out);
            }
            layernorm_specs("refiner.joint.out_ln", d, &mut out);
        }
        RefinerVariant::ParallelTransformer => {
            for branch in ["text", "img"] {
                for i in 0..cfg.refiner.depth {
                    block_specs(&format!("refiner.par.{branch}.{i}"), d, &mut out);
                }
                layernorm_specs(&format!("refiner.par.{branch}.out_ln"), d, &mut out);
            }
        }
        RefinerVariant::FusionTransformer => {
            for branch in ["text", "img"] {
                for i in 0..cfg.refiner.depth {
                    block_specs(&format!("refiner.fus.{branch}.{i}"), d, &mut out);
                }
            }
            for i in 0..cfg.refiner.depth {
                block_specs(&format!("refiner.fus.shared.{i}"), d, &mut out);
            }
            layernorm_specs("refiner.fus.out_ln", d, &mut out);
        }
    }

    // backbone
    out.push(("bb.patch.w".into(), vec![patch_dim, d], ParamInit::Normal(0.02)));
    out.push(("bb.patch.b".into(), vec![d], ParamInit::Zeros));
    for (i, &(h, w)) in cfg.buckets.iter().enumerate() {
        let n = (h / cfg.patch) * (w / cfg.patch);
        out.push((format!("bb.pos.{i}"), vec![n, d], ParamInit::Normal(0.02)));
    }
    out.push(("bb.tmlp.fc1.w".into(), vec![cfg.time_dim, d], ParamInit::Normal(0.02)));
    out.push(("bb.tmlp.fc1.b".into(), vec![d], ParamInit::Zeros));
    out.push(("bb.tmlp.fc2.w".into(), vec![d, d], ParamInit::Normal(0.02)));
    out.push(("bb.tmlp.fc2.b".into(), vec![d], ParamInit::Zeros));
    for i in 0..cfg.depth {
        let p = format!("bb.blk{i}");
        // AdaLN modulation producing 9 d-vectors; zero-init so every gated
        // branch contributes exactly nothing at initialization
        out.push((format!("{p}.adaln.w"), vec![d, 9 * d], ParamInit::Zeros));
        out.push((format!("{p}.adaln.b"), vec![9 * d], ParamInit::Zeros));
        attn_specs(&format!("{p}.jattn"), d, &mut out);
        attn_specs(&format!("{p}.sattn"), d, &mut out);
        for ln in ["ln_c1", "ln_c2", "ln_c3", "ln_z1", "ln_z2", "ln_z3"] {
            layernorm_specs(&format!("{p}.{ln}"), d, &mut out);
        }
        mlp_specs(&format!("{p}.mlp_c"), d, &mut out);
        mlp_specs(&format!("{p}.mlp_z"), d, &mut out);
    }
    layernorm_specs("bb.out_ln", d, &mut out);
    out.push(("bb.head.w".into(), vec![d, patch_dim], ParamInit::Normal(0.02)));
    out.push(("bb.head.b".into(), vec![patch_dim], ParamInit::Zeros));

    out
}

impl Parameters<f32> {
    /// Fresh parameters for a configuration, deterministic in the seed.
    pub fn init(cfg: &DiTConfig, init_seed: u64) -> Parameters<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut map = BTreeMap::new();
        for (name, shape, init) in param_specs(cfg) {
            let tensor = match init {
                ParamInit::Zeros => Tensor::zeros(shape),
                ParamInit::Ones => Tensor::filled(shape, 1.0),
                ParamInit::Normal(std) => {
                    let dist = rand_distr::Normal::new(0.0f32, std as f32)
                        .expect("valid normal distribution");
                    Tensor::from_fn(shape, |_| dist.sample(&mut rng))
                }
            };
            map.insert(name, tensor);
        }
        Parameters { map }
    }
}

// ── Graph binder ─────────────────────────────────────────────────────

/// A tape plus the parameter set it reads from. Model builders bind
/// parameters by name through this, so a missing name is a structured error
/// and every parameter appears once per graph.
pub struct Graph<'p, T: Real> {
    pub tape: Tape<T>,
    params: &'p Parameters<T>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p Parameters<T>) -> Self {
        Graph { tape: Tape::new(), params }
    }

    /// Bind a named parameter onto the tape.
    pub fn p(&mut self, name: &str) -> Result<VarId> {
        let tensor = self.params.get(name)?;
        Ok(self.tape.param(name, tensor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::DiTConfig;

    #[test]
    fn init_is_deterministic_in_seed() {
        let cfg = DiTConfig::tiny();
        let a = Parameters::init(&cfg, 7);
        let b = Parameters::init(&cfg, 7);
        assert_eq!(a, b);
        let c = Parameters::init(&cfg, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn parallel_and_fusion_branches_share_no_parameters() {
        for variant in [RefinerVariant::ParallelTransformer, RefinerVariant::FusionTransformer] {
            let mut cfg = DiTConfig::tiny();
            cfg.refiner.variant = variant;
            let params = Parameters::init(&cfg, 1);
            let text: Vec<&String> =
                params.iter().map(|(n, _)| n).filter(|n| n.contains(".text.")).collect();
            let img: Vec<&String> =
                params.iter().map(|(n, _)| n).filter(|n| n.contains(".img.")).collect();
            assert!(!text.is_empty() && !img.is_empty());
            for t in &text {
                assert!(!img.contains(t));
            }
        }
    }

    #[test]
    fn adaln_gates_start_at_zero() {
        let cfg = DiTConfig::tiny();
        let params = Parameters::init(&cfg, 3);
        let w = params.get("bb.blk0.adaln.w").unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
        let b = params.get("bb.blk0.adaln.b").unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn graph_binding_is_cached_per_name() {
        let cfg = DiTConfig::tiny();
        let params = Parameters::init(&cfg, 3);
        let mut g = Graph::<f32>::new(&params);
        let a = g.p("bb.patch.w").unwrap();
        let b = g.p("bb.patch.w").unwrap();
        assert_eq!(a, b);
        assert!(g.p("no.such.param").is_err());
    }
}

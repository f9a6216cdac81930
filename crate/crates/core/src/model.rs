//! Dual-stream transformer blocks with reference-image adapters.
//!
//! Each block runs joint attention over the concatenated text and noisy
//! image token streams, then adds a reference cross-attention term whose
//! routing depends on the [`AttentionMode`]:
//!
//! * `TrainJoint` — reference keys/values attend against the joint query
//!   `[Q_T, Q_X]`; the scaled result is added to both streams. Used during
//!   training so the text branch can absorb pose/lighting-style content.
//! * `InferImageOnly` — reference attention uses the image query only, with
//!   per-subject binary token masks and weights; the text stream is left
//!   untouched. Default at inference.
//! * `BothBranchesLegacy` — the train-mode joint form applied at inference
//!   (ablation baseline).
//! * `TextOnlyProbe` — adapter term added to the text stream only
//!   (diagnostic setting).

use crate::attention::{head_mean_attention_probs, multi_head_attention, rope_tables};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::params::{join, VisitParams};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMode {
    TrainJoint,
    InferImageOnly,
    BothBranchesLegacy,
    TextOnlyProbe,
}

impl AttentionMode {
    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::TrainJoint => "train_joint",
            AttentionMode::InferImageOnly => "infer_image_only",
            AttentionMode::BothBranchesLegacy => "both_branches_legacy",
            AttentionMode::TextOnlyProbe => "text_only_probe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Transformer width d.
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    pub time_dim: usize,
    pub text_vocab: usize,
    pub router_hidden: usize,
    pub use_rope: bool,
    pub seed: u64,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn desk_default() -> Self {
        ModelConfig {
            image_size: 24,
            patch_size: 4,
            width: 48,
            heads: 4,
            depth: 2,
            mlp_hidden: 96,
            time_dim: 16,
            text_vocab: 16,
            router_hidden: 32,
            use_rope: true,
            seed: 1,
            encoder: EncoderConfig::desk_default(24),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0
            || self.patch_size == 0
            || self.image_size % self.patch_size != 0
        {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.width % self.heads != 0 || (self.width / self.heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "width {} must split into heads {} with even head width",
                self.width, self.heads
            )));
        }
        if self.depth == 0 || self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config("depth >= 1 and even time_dim >= 2 required".into()));
        }
        self.encoder.validate()
    }

    /// Noisy-image token count m.
    pub fn image_tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn token_channels(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

// ---- parameters --------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LinearParams<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> LinearParams<S> {
    fn init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearParams {
            w: Tensor::randn(vec![rows, cols], 0.02, rng),
            b: Tensor::zeros(vec![1, cols]),
        }
    }
}

impl<S: Scalar> VisitParams<S> for LinearParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

/// One token stream's attention projections.
#[derive(Debug, Clone)]
pub struct StreamAttnParams<S: Scalar> {
    pub wq: LinearParams<S>,
    pub wk: LinearParams<S>,
    pub wv: LinearParams<S>,
    pub wo: LinearParams<S>,
}

impl<S: Scalar> StreamAttnParams<S> {
    fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        StreamAttnParams {
            wq: LinearParams::init(d, d, rng),
            wk: LinearParams::init(d, d, rng),
            wv: LinearParams::init(d, d, rng),
            wo: LinearParams::init(d, d, rng),
        }
    }
}

impl<S: Scalar> VisitParams<S> for StreamAttnParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.wo.visit(&join(prefix, "wo"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.wq.visit_mut(&join(prefix, "wq"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.wo.visit_mut(&join(prefix, "wo"), f);
    }
}

#[derive(Debug, Clone)]
pub struct MlpParams<S: Scalar> {
    pub fc1: LinearParams<S>,
    pub fc2: LinearParams<S>,
}

impl<S: Scalar> MlpParams<S> {
    fn init(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        MlpParams {
            fc1: LinearParams::init(d, hidden, rng),
            fc2: LinearParams::init(hidden, d, rng),
        }
    }
}

impl<S: Scalar> VisitParams<S> for MlpParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams<S: Scalar> {
    pub t_attn: StreamAttnParams<S>,
    pub x_attn: StreamAttnParams<S>,
    pub t_mlp: MlpParams<S>,
    pub x_mlp: MlpParams<S>,
    /// Timestep-modulation projections (scale, shift) per site and branch.
    pub t_mod_attn: LinearParams<S>,
    pub x_mod_attn: LinearParams<S>,
    pub t_mod_mlp: LinearParams<S>,
    pub x_mod_mlp: LinearParams<S>,
    /// Adapter key/value projections for reference tokens (no bias).
    pub adapter_k: Tensor<S>,
    pub adapter_v: Tensor<S>,
}

impl<S: Scalar> BlockParams<S> {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.width;
        BlockParams {
            t_attn: StreamAttnParams::init(d, rng),
            x_attn: StreamAttnParams::init(d, rng),
            t_mlp: MlpParams::init(d, cfg.mlp_hidden, rng),
            x_mlp: MlpParams::init(d, cfg.mlp_hidden, rng),
            t_mod_attn: LinearParams::init(cfg.time_dim, 2 * d, rng),
            x_mod_attn: LinearParams::init(cfg.time_dim, 2 * d, rng),
            t_mod_mlp: LinearParams::init(cfg.time_dim, 2 * d, rng),
            x_mod_mlp: LinearParams::init(cfg.time_dim, 2 * d, rng),
            adapter_k: Tensor::randn(vec![d, d], 0.02, rng),
            adapter_v: Tensor::randn(vec![d, d], 0.02, rng),
        }
    }
}

impl<S: Scalar> VisitParams<S> for BlockParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.t_attn.visit(&join(prefix, "t_attn"), f);
        self.x_attn.visit(&join(prefix, "x_attn"), f);
        self.t_mlp.visit(&join(prefix, "t_mlp"), f);
        self.x_mlp.visit(&join(prefix, "x_mlp"), f);
        self.t_mod_attn.visit(&join(prefix, "t_mod_attn"), f);
        self.x_mod_attn.visit(&join(prefix, "x_mod_attn"), f);
        self.t_mod_mlp.visit(&join(prefix, "t_mod_mlp"), f);
        self.x_mod_mlp.visit(&join(prefix, "x_mod_mlp"), f);
        f(&join(prefix, "adapter_k"), &self.adapter_k);
        f(&join(prefix, "adapter_v"), &self.adapter_v);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.t_attn.visit_mut(&join(prefix, "t_attn"), f);
        self.x_attn.visit_mut(&join(prefix, "x_attn"), f);
        self.t_mlp.visit_mut(&join(prefix, "t_mlp"), f);
        self.x_mlp.visit_mut(&join(prefix, "x_mlp"), f);
        self.t_mod_attn.visit_mut(&join(prefix, "t_mod_attn"), f);
        self.x_mod_attn.visit_mut(&join(prefix, "x_mod_attn"), f);
        self.t_mod_mlp.visit_mut(&join(prefix, "t_mod_mlp"), f);
        self.x_mod_mlp.visit_mut(&join(prefix, "x_mod_mlp"), f);
        f(&join(prefix, "adapter_k"), &mut self.adapter_k);
        f(&join(prefix, "adapter_v"), &mut self.adapter_v);
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams<S: Scalar> {
    pub cfg: ModelConfig,
    pub patch_embed: LinearParams<S>,
    /// Tag-vocabulary embedding table, frozen after init.
    pub text_table: Tensor<S>,
    /// Learned stand-in for dropped text conditioning.
    pub null_text: Tensor<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub final_gamma: Tensor<S>,
    pub final_beta: Tensor<S>,
    pub head: LinearParams<S>,
    pub fusion: FusionParams<S>,
}

/// Which optimizer/freeze group a named parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Base,
    Adapter,
    Expert,
    Router,
    Frozen,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name == "text_table" {
        ParamGroup::Frozen
    } else if name.contains("adapter_") {
        ParamGroup::Adapter
    } else if name.starts_with("fusion.expert") {
        ParamGroup::Expert
    } else if name.starts_with("fusion.router") {
        ParamGroup::Router
    } else {
        ParamGroup::Base
    }
}

impl<S: Scalar> ModelParams<S> {
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.width;
        let pch = cfg.token_channels();
        let patch_embed = LinearParams::init(pch, d, &mut rng);
        let text_table = Tensor::randn(vec![cfg.text_vocab, d], 0.02, &mut rng);
        let null_text = Tensor::randn(vec![1, d], 0.02, &mut rng);
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams::init(&cfg, &mut rng))
            .collect();
        let final_gamma = Tensor::full(vec![1, d], S::one());
        let final_beta = Tensor::zeros(vec![1, d]);
        let head = LinearParams::init(d, pch, &mut rng);
        let fusion = FusionParams::init(cfg.encoder.width, d, cfg.router_hidden, &mut rng);
        Ok(ModelParams {
            cfg,
            patch_embed,
            text_table,
            null_text,
            blocks,
            final_gamma,
            final_beta,
            head,
            fusion,
        })
    }
}

impl<S: Scalar> VisitParams<S> for ModelParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "text_table"), &self.text_table);
        f(&join(prefix, "null_text"), &self.null_text);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        f(&join(prefix, "final.gamma"), &self.final_gamma);
        f(&join(prefix, "final.beta"), &self.final_beta);
        self.head.visit(&join(prefix, "head"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "text_table"), &mut self.text_table);
        f(&join(prefix, "null_text"), &mut self.null_text);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        f(&join(prefix, "final.gamma"), &mut self.final_gamma);
        f(&join(prefix, "final.beta"), &mut self.final_beta);
        self.head.visit_mut(&join(prefix, "head"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
    }
}

// ---- tape-side handles ---------------------------------------------------------

pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    fn register<S: Scalar>(tape: &mut Tape<S>, p: &LinearParams<S>) -> Self {
        LinearVars {
            w: tape.leaf(p.w.clone()),
            b: tape.leaf(p.b.clone()),
        }
    }
}

pub struct StreamAttnVars {
    pub wq: LinearVars,
    pub wk: LinearVars,
    pub wv: LinearVars,
    pub wo: LinearVars,
}

pub struct MlpVars {
    pub fc1: LinearVars,
    pub fc2: LinearVars,
}

pub struct BlockVars {
    pub t_attn: StreamAttnVars,
    pub x_attn: StreamAttnVars,
    pub t_mlp: MlpVars,
    pub x_mlp: MlpVars,
    pub t_mod_attn: LinearVars,
    pub x_mod_attn: LinearVars,
    pub t_mod_mlp: LinearVars,
    pub x_mod_mlp: LinearVars,
    pub adapter_k: Var,
    pub adapter_v: Var,
}

pub struct ModelVars {
    pub patch_embed: LinearVars,
    pub text_table: Var,
    pub null_text: Var,
    pub blocks: Vec<BlockVars>,
    pub final_gamma: Var,
    pub final_beta: Var,
    pub head: LinearVars,
    pub fusion: crate::fusion::FusionVars,
}

impl ModelVars {
    pub fn register<S: Scalar>(tape: &mut Tape<S>, p: &ModelParams<S>) -> Self {
        let stream = |tape: &mut Tape<S>, s: &StreamAttnParams<S>| StreamAttnVars {
            wq: LinearVars::register(tape, &s.wq),
            wk: LinearVars::register(tape, &s.wk),
            wv: LinearVars::register(tape, &s.wv),
            wo: LinearVars::register(tape, &s.wo),
        };
        let mlp = |tape: &mut Tape<S>, m: &MlpParams<S>| MlpVars {
            fc1: LinearVars::register(tape, &m.fc1),
            fc2: LinearVars::register(tape, &m.fc2),
        };
        let blocks = p
            .blocks
            .iter()
            .map(|b| BlockVars {
                t_attn: stream(tape, &b.t_attn),
                x_attn: stream(tape, &b.x_attn),
                t_mlp: mlp(tape, &b.t_mlp),
                x_mlp: mlp(tape, &b.x_mlp),
                t_mod_attn: LinearVars::register(tape, &b.t_mod_attn),
                x_mod_attn: LinearVars::register(tape, &b.x_mod_attn),
                t_mod_mlp: LinearVars::register(tape, &b.t_mod_mlp),
                x_mod_mlp: LinearVars::register(tape, &b.x_mod_mlp),
                adapter_k: tape.leaf(b.adapter_k.clone()),
                adapter_v: tape.leaf(b.adapter_v.clone()),
            })
            .collect();
        ModelVars {
            patch_embed: LinearVars::register(tape, &p.patch_embed),
            text_table: tape.leaf(p.text_table.clone()),
            null_text: tape.leaf(p.null_text.clone()),
            blocks,
            final_gamma: tape.leaf(p.final_gamma.clone()),
            final_beta: tape.leaf(p.final_beta.clone()),
            head: LinearVars::register(tape, &p.head),
            fusion: crate::fusion::FusionVars::register(tape, &p.fusion),
        }
    }

    /// Vars in the same order as `VisitParams::visit`, for gradient lookup
    /// by parameter name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        let lin = |out: &mut Vec<(String, Var)>, prefix: &str, l: &LinearVars| {
            out.push((format!("{prefix}.w"), l.w));
            out.push((format!("{prefix}.b"), l.b));
        };
        lin(&mut out, "patch_embed", &self.patch_embed);
        out.push(("text_table".into(), self.text_table));
        out.push(("null_text".into(), self.null_text));
        for (i, b) in self.blocks.iter().enumerate() {
            for (sn, s) in [("t_attn", &b.t_attn), ("x_attn", &b.x_attn)] {
                lin(&mut out, &format!("blocks.{i}.{sn}.wq"), &s.wq);
                lin(&mut out, &format!("blocks.{i}.{sn}.wk"), &s.wk);
                lin(&mut out, &format!("blocks.{i}.{sn}.wv"), &s.wv);
                lin(&mut out, &format!("blocks.{i}.{sn}.wo"), &s.wo);
            }
            for (mn, m) in [("t_mlp", &b.t_mlp), ("x_mlp", &b.x_mlp)] {
                lin(&mut out, &format!("blocks.{i}.{mn}.fc1"), &m.fc1);
                lin(&mut out, &format!("blocks.{i}.{mn}.fc2"), &m.fc2);
            }
            lin(&mut out, &format!("blocks.{i}.t_mod_attn"), &b.t_mod_attn);
            lin(&mut out, &format!("blocks.{i}.x_mod_attn"), &b.x_mod_attn);
            lin(&mut out, &format!("blocks.{i}.t_mod_mlp"), &b.t_mod_mlp);
            lin(&mut out, &format!("blocks.{i}.x_mod_mlp"), &b.x_mod_mlp);
            out.push((format!("blocks.{i}.adapter_k"), b.adapter_k));
            out.push((format!("blocks.{i}.adapter_v"), b.adapter_v));
        }
        out.push(("final.gamma".into(), self.final_gamma));
        out.push(("final.beta".into(), self.final_beta));
        lin(&mut out, "head", &self.head);
        for l in crate::encoder::LEVELS {
            let e = &self.fusion.experts[l.index()];
            let p = format!("fusion.expert.{}", l.name());
            out.push((format!("{p}.weight"), e.weight));
            out.push((format!("{p}.bias"), e.bias));
            out.push((format!("{p}.gamma"), e.gamma));
            out.push((format!("{p}.beta"), e.beta));
        }
        for l in crate::encoder::LEVELS {
            let r = &self.fusion.routers[l.index()];
            let p = format!("fusion.router.{}", l.name());
            out.push((format!("{p}.fc1_w"), r.fc1_w));
            out.push((format!("{p}.fc1_b"), r.fc1_b));
            out.push((format!("{p}.fc2_w"), r.fc2_w));
            out.push((format!("{p}.fc2_b"), r.fc2_b));
        }
        out
    }
}

// ---- conditioning inputs -------------------------------------------------------

/// One reference subject on the tape: fused tokens `[h, d]`, a binary
/// token mask `[m, 1]`, and its injection weight.
pub struct SubjectTokens {
    pub tokens: Var,
    pub mask: Var,
    pub lambda: f64,
}

/// Validate a 0/1 token mask of length m and register it as a leaf.
pub fn register_mask<S: Scalar>(tape: &mut Tape<S>, bits: &[u8], m: usize) -> Result<Var> {
    if bits.len() != m {
        return Err(Error::Contract(format!(
            "mask length {} does not match token count {m}",
            bits.len()
        )));
    }
    if bits.iter().any(|&b| b > 1) {
        return Err(Error::Contract("mask entries must be 0 or 1".into()));
    }
    let data: Vec<S> = bits.iter().map(|&b| S::of_f64(b as f64)).collect();
    Ok(tape.leaf(Tensor::new(vec![m, 1], data)?))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TextCond {
    /// No text rows at all (n = 0).
    None,
    /// The learned null embedding (classifier-free unconditional branch).
    Null,
    /// Vocabulary tag ids.
    Tags(Vec<usize>),
}

/// Extra knobs for a forward pass; defaults are the normal path.
#[derive(Debug, Clone)]
pub struct ForwardOptions {
    /// Scales the text-branch adapter term in joint modes. Diagnostic knob
    /// for decoupling probes; 1.0 is the normal path.
    pub text_adapter_scale: f64,
    pub collect_diagnostics: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            text_adapter_scale: 1.0,
            collect_diagnostics: false,
        }
    }
}

/// Per-block probe points captured when diagnostics are on.
pub struct BlockDiag {
    pub q_t: Option<Var>,
    pub q_x: Var,
    /// Adapter term added to the image stream (pre output-projection).
    pub adapter_x_term: Option<Var>,
    /// Adapter term added to the text stream, joint/probe modes only.
    pub adapter_t_term: Option<Var>,
}

#[derive(Default)]
pub struct Diagnostics {
    pub blocks: Vec<BlockDiag>,
}

// ---- forward pieces ------------------------------------------------------------

pub struct MmaOut {
    pub t_mma: Option<Var>,
    pub x_mma: Var,
    pub q_t: Option<Var>,
    pub q_x: Var,
}

/// Joint attention over the concatenated `[T, X]` sequence with per-stream
/// projections; queries are cached for the adapter. Rotary encoding is
/// applied to Q and K over joint sequence positions when enabled.
pub fn mma<S: Scalar>(
    tape: &mut Tape<S>,
    t: Option<Var>,
    x: Var,
    bv: &BlockVars,
    cfg: &ModelConfig,
) -> Result<MmaOut> {
    let n = t.map(|v| tape.value(v).rows()).unwrap_or(0);
    let m = tape.value(x).rows();
    let d = cfg.width;

    let mut q_x = tape.linear(x, bv.x_attn.wq.w, Some(bv.x_attn.wq.b))?;
    let mut k_x = tape.linear(x, bv.x_attn.wk.w, Some(bv.x_attn.wk.b))?;
    let v_x = tape.linear(x, bv.x_attn.wv.w, Some(bv.x_attn.wv.b))?;
    if cfg.use_rope {
        let pos: Vec<usize> = (n..n + m).collect();
        let (cos, sin) = rope_tables::<S>(&pos, d, cfg.heads, 10000.0);
        q_x = tape.rope(q_x, cos.clone(), sin.clone())?;
        k_x = tape.rope(k_x, cos, sin)?;
    }

    let (q_t, k_t, v_t) = match t {
        Some(t) => {
            let mut q_t = tape.linear(t, bv.t_attn.wq.w, Some(bv.t_attn.wq.b))?;
            let mut k_t = tape.linear(t, bv.t_attn.wk.w, Some(bv.t_attn.wk.b))?;
            let v_t = tape.linear(t, bv.t_attn.wv.w, Some(bv.t_attn.wv.b))?;
            if cfg.use_rope {
                let pos: Vec<usize> = (0..n).collect();
                let (cos, sin) = rope_tables::<S>(&pos, d, cfg.heads, 10000.0);
                q_t = tape.rope(q_t, cos.clone(), sin.clone())?;
                k_t = tape.rope(k_t, cos, sin)?;
            }
            (Some(q_t), Some(k_t), Some(v_t))
        }
        None => (None, None, None),
    };

    let (q, k, v) = match (q_t, k_t, v_t) {
        (Some(qt), Some(kt), Some(vt)) => (
            tape.concat_rows(&[qt, q_x])?,
            tape.concat_rows(&[kt, k_x])?,
            tape.concat_rows(&[vt, v_x])?,
        ),
        _ => (q_x, k_x, v_x),
    };
    let joint = multi_head_attention(tape, q, k, v, cfg.heads)?;
    let (t_mma, x_mma) = if n > 0 {
        (
            Some(tape.slice_rows(joint, 0, n)?),
            tape.slice_rows(joint, n, m)?,
        )
    } else {
        (None, joint)
    };
    Ok(MmaOut {
        t_mma,
        x_mma,
        q_t,
        q_x,
    })
}

/// Reference cross-attention: keys/values are linear projections of the
/// reference tokens (no bias, no position encoding), queried by cached
/// multimodal-attention queries.
pub fn adapter_ca<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    ref_tokens: Var,
    bv: &BlockVars,
    heads: usize,
) -> Result<Var> {
    let k_c = tape.matmul(ref_tokens, bv.adapter_k)?;
    let v_c = tape.matmul(ref_tokens, bv.adapter_v)?;
    multi_head_attention(tape, q, k_c, v_c, heads)
}

/// Head-averaged adapter attention map `[rows(q), h]`; each row sums to 1.
pub fn attention_map<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    ref_tokens: Var,
    bv: &BlockVars,
    heads: usize,
) -> Result<Var> {
    let k_c = tape.matmul(ref_tokens, bv.adapter_k)?;
    head_mean_attention_probs(tape, q, k_c, heads)
}

pub struct DcaOut {
    pub t_out: Option<Var>,
    pub x_out: Var,
    pub adapter_x_term: Option<Var>,
    pub adapter_t_term: Option<Var>,
}

/// Decoupled cross-attention: multimodal attention output plus the
/// mode-dependent adapter term.
pub fn dca<S: Scalar>(
    tape: &mut Tape<S>,
    mma_out: &MmaOut,
    subjects: &[SubjectTokens],
    mode: AttentionMode,
    bv: &BlockVars,
    cfg: &ModelConfig,
    opts: &ForwardOptions,
) -> Result<DcaOut> {
    let heads = cfg.heads;
    match mode {
        AttentionMode::TrainJoint | AttentionMode::BothBranchesLegacy => {
            if subjects.len() != 1 {
                return Err(Error::Contract(format!(
                    "{} mode requires exactly one condition, got {}",
                    mode.name(),
                    subjects.len()
                )));
            }
            let s = &subjects[0];
            if s.lambda == 0.0 {
                return Ok(DcaOut {
                    t_out: mma_out.t_mma,
                    x_out: mma_out.x_mma,
                    adapter_x_term: None,
                    adapter_t_term: None,
                });
            }
            let lam = S::of_f64(s.lambda);
            match mma_out.q_t {
                Some(q_t) => {
                    let q = tape.concat_rows(&[q_t, mma_out.q_x])?;
                    let ca = adapter_ca(tape, q, s.tokens, bv, heads)?;
                    let n = tape.value(q_t).rows();
                    let m = tape.value(mma_out.q_x).rows();
                    let ca_t = tape.slice_rows(ca, 0, n)?;
                    let ca_x = tape.slice_rows(ca, n, m)?;
                    let mut term_t = tape.scale(ca_t, lam);
                    if opts.text_adapter_scale != 1.0 {
                        term_t = tape.scale(term_t, S::of_f64(opts.text_adapter_scale));
                    }
                    let term_x = tape.scale(ca_x, lam);
                    let t_out = tape.add(mma_out.t_mma.expect("text stream"), term_t)?;
                    let x_out = tape.add(mma_out.x_mma, term_x)?;
                    Ok(DcaOut {
                        t_out: Some(t_out),
                        x_out,
                        adapter_x_term: Some(term_x),
                        adapter_t_term: Some(term_t),
                    })
                }
                // no text rows: the joint form degenerates to the
                // image-only form
                None => {
                    let ca = adapter_ca(tape, mma_out.q_x, s.tokens, bv, heads)?;
                    let term_x = tape.scale(ca, lam);
                    let x_out = tape.add(mma_out.x_mma, term_x)?;
                    Ok(DcaOut {
                        t_out: None,
                        x_out,
                        adapter_x_term: Some(term_x),
                        adapter_t_term: None,
                    })
                }
            }
        }
        AttentionMode::InferImageOnly => {
            let mut x_out = mma_out.x_mma;
            let mut total_term: Option<Var> = None;
            for s in subjects {
                if s.lambda == 0.0 {
                    continue;
                }
                let ca = adapter_ca(tape, mma_out.q_x, s.tokens, bv, heads)?;
                let masked = tape.scale_rows(ca, s.mask)?;
                let term = tape.scale(masked, S::of_f64(s.lambda));
                total_term = Some(match total_term {
                    None => term,
                    Some(t) => tape.add(t, term)?,
                });
            }
            if let Some(term) = total_term {
                x_out = tape.add(x_out, term)?;
            }
            Ok(DcaOut {
                t_out: mma_out.t_mma,
                x_out,
                adapter_x_term: total_term,
                adapter_t_term: None,
            })
        }
        AttentionMode::TextOnlyProbe => {
            if subjects.len() != 1 {
                return Err(Error::Contract(
                    "text_only_probe requires exactly one condition".into(),
                ));
            }
            let q_t = mma_out.q_t.ok_or_else(|| {
                Error::Contract("text_only_probe requires text tokens".into())
            })?;
            let s = &subjects[0];
            if s.lambda == 0.0 {
                return Ok(DcaOut {
                    t_out: mma_out.t_mma,
                    x_out: mma_out.x_mma,
                    adapter_x_term: None,
                    adapter_t_term: None,
                });
            }
            let ca = adapter_ca(tape, q_t, s.tokens, bv, heads)?;
            let term_t = tape.scale(ca, S::of_f64(s.lambda));
            let t_out = tape.add(mma_out.t_mma.expect("text stream"), term_t)?;
            Ok(DcaOut {
                t_out: Some(t_out),
                x_out: mma_out.x_mma,
                adapter_x_term: None,
                adapter_t_term: Some(term_t),
            })
        }
    }
}

fn modulation<S: Scalar>(
    tape: &mut Tape<S>,
    proj: &LinearVars,
    temb: Var,
    d: usize,
) -> Result<(Var, Var)> {
    let both = tape.linear(temb, proj.w, Some(proj.b))?;
    let scale = tape.slice_cols(both, 0, d)?;
    let shift = tape.slice_cols(both, d, d)?;
    Ok((scale, shift))
}

/// Pre-norm with timestep modulation: `ln(h) * (1 + scale) + shift`.
fn modulated_norm<S: Scalar>(
    tape: &mut Tape<S>,
    h: Var,
    scale: Var,
    shift: Var,
    ones: Var,
    zeros: Var,
) -> Result<Var> {
    let normed = tape.layer_norm(h, ones, zeros, S::of_f64(1e-5))?;
    let gain = tape.add(scale, ones)?;
    let scaled = tape.mul_row(normed, gain)?;
    tape.add_row(scaled, shift)
}

fn mlp_forward<S: Scalar>(tape: &mut Tape<S>, h: Var, mlp: &MlpVars) -> Result<Var> {
    let h = tape.linear(h, mlp.fc1.w, Some(mlp.fc1.b))?;
    let h = tape.gelu(h);
    tape.linear(h, mlp.fc2.w, Some(mlp.fc2.b))
}

/// One transformer block: modulated pre-norm, decoupled cross-attention,
/// per-branch output projection and residual, then a per-branch MLP with
/// its own modulated pre-norm and residual.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    t: Option<Var>,
    x: Var,
    temb: Var,
    subjects: &[SubjectTokens],
    mode: AttentionMode,
    bv: &BlockVars,
    cfg: &ModelConfig,
    opts: &ForwardOptions,
    diag: Option<&mut Diagnostics>,
) -> Result<(Option<Var>, Var)> {
    let d = cfg.width;
    let ones = tape.leaf(Tensor::full(vec![1, d], S::one()));
    let zeros = tape.leaf(Tensor::zeros(vec![1, d]));

    // attention site
    let x_modp = modulation(tape, &bv.x_mod_attn, temb, d)?;
    let x_n = modulated_norm(tape, x, x_modp.0, x_modp.1, ones, zeros)?;
    let t_n = match t {
        Some(t) => {
            let t_modp = modulation(tape, &bv.t_mod_attn, temb, d)?;
            Some(modulated_norm(tape, t, t_modp.0, t_modp.1, ones, zeros)?)
        }
        None => None,
    };
    let mma_out = mma(tape, t_n, x_n, bv, cfg)?;
    let dca_out = dca(tape, &mma_out, subjects, mode, bv, cfg, opts)?;
    if let Some(diag) = diag {
        diag.blocks.push(BlockDiag {
            q_t: mma_out.q_t,
            q_x: mma_out.q_x,
            adapter_x_term: dca_out.adapter_x_term,
            adapter_t_term: dca_out.adapter_t_term,
        });
    }
    let x_attn = tape.linear(dca_out.x_out, bv.x_attn.wo.w, Some(bv.x_attn.wo.b))?;
    let mut x = tape.add(x, x_attn)?;
    let mut t = match (t, dca_out.t_out) {
        (Some(t0), Some(ta)) => {
            let t_attn = tape.linear(ta, bv.t_attn.wo.w, Some(bv.t_attn.wo.b))?;
            Some(tape.add(t0, t_attn)?)
        }
        (t0, _) => t0,
    };

    // mlp site
    let x_modp = modulation(tape, &bv.x_mod_mlp, temb, d)?;
    let x_n = modulated_norm(tape, x, x_modp.0, x_modp.1, ones, zeros)?;
    let x_mlp = mlp_forward(tape, x_n, &bv.x_mlp)?;
    x = tape.add(x, x_mlp)?;
    if let Some(t0) = t {
        let t_modp = modulation(tape, &bv.t_mod_mlp, temb, d)?;
        let t_n = modulated_norm(tape, t0, t_modp.0, t_modp.1, ones, zeros)?;
        let t_mlp = mlp_forward(tape, t_n, &bv.t_mlp)?;
        t = Some(tape.add(t0, t_mlp)?);
    }
    Ok((t, x))
}

// ---- full velocity network -----------------------------------------------------

/// Sinusoidal embedding of a diffusion time in [0, 1], `[1, dim]`.
pub fn time_embedding<S: Scalar>(t: f64, dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = 1000.0 * 10000f64.powf(-(i as f64) / half as f64);
        data.push(S::of_f64((t * freq).sin()));
        data.push(S::of_f64((t * freq).cos()));
    }
    Tensor::new(vec![1, dim], data).expect("time embedding shape")
}

/// Permutation sending patch-token data `[m, patch*patch*3]` back to pixel
/// rows `[side*side, 3]`.
pub fn unpatch_perm(side: usize, patch: usize) -> Vec<usize> {
    let grid = side / patch;
    let pch = patch * patch * 3;
    let mut perm = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                let token = (y / patch) * grid + x / patch;
                let col = ((y % patch) * patch + x % patch) * 3 + c;
                perm.push(token * pch + col);
            }
        }
    }
    perm
}

/// Resolve text conditioning to a token matrix on the tape.
pub fn text_rows<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    text: &TextCond,
) -> Result<Option<Var>> {
    match text {
        TextCond::None => Ok(None),
        TextCond::Null => Ok(Some(vars.null_text)),
        TextCond::Tags(ids) => {
            if ids.is_empty() {
                return Ok(None);
            }
            let mut rows = Vec::with_capacity(ids.len());
            for &id in ids {
                if id >= cfg.text_vocab {
                    return Err(Error::Contract(format!(
                        "tag id {id} outside vocabulary of {}",
                        cfg.text_vocab
                    )));
                }
                rows.push(tape.slice_rows(vars.text_table, id, 1)?);
            }
            Ok(Some(if rows.len() == 1 {
                rows[0]
            } else {
                tape.concat_rows(&rows)?
            }))
        }
    }
}

pub struct ForwardOut {
    /// Predicted velocity over pixels, `[side*side, 3]`.
    pub velocity: Var,
    pub diagnostics: Option<Diagnostics>,
}

/// Full velocity network: patchify + embed, run the block stack under the
/// given attention mode, final norm + head, un-patchify.
#[allow(clippy::too_many_arguments)]
pub fn velocity_forward<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    x_pixels: &Tensor<S>,
    t: f64,
    text: &TextCond,
    subjects: &[SubjectTokens],
    mode: AttentionMode,
    opts: &ForwardOptions,
) -> Result<ForwardOut> {
    let side = cfg.image_size;
    if x_pixels.shape() != [side * side, 3] {
        return Err(Error::Config(format!(
            "state shape {:?} does not match [{}, 3]",
            x_pixels.shape(),
            side * side
        )));
    }
    let patches = tape.leaf(crate::encoder::patchify(x_pixels, side, cfg.patch_size)?);
    let mut x = tape.linear(patches, vars.patch_embed.w, Some(vars.patch_embed.b))?;
    let temb = tape.leaf(time_embedding(t, cfg.time_dim));
    let mut t_rows = text_rows(tape, vars, cfg, text)?;

    let mut diag = if opts.collect_diagnostics {
        Some(Diagnostics::default())
    } else {
        None
    };
    for bv in &vars.blocks {
        let (nt, nx) = block_forward(
            tape,
            t_rows,
            x,
            temb,
            subjects,
            mode,
            bv,
            cfg,
            opts,
            diag.as_mut(),
        )?;
        t_rows = nt;
        x = nx;
    }

    let normed = tape.layer_norm(x, vars.final_gamma, vars.final_beta, S::of_f64(1e-5))?;
    let tokens = tape.linear(normed, vars.head.w, Some(vars.head.b))?;
    let velocity = tape.gather(
        tokens,
        unpatch_perm(side, cfg.patch_size),
        vec![side * side, 3],
    )?;
    Ok(ForwardOut {
        velocity,
        diagnostics: diag,
    })
}

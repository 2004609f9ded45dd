//! Dual-expert decoder.
//!
//! Every token is routed to one of two full parameter sets by modality;
//! attention runs once over all tokens so both experts share one context.

mod params;

use std::ops::Range;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use params::{read_arrays, write_arrays, ArrayFileError, ParamStore, ARRAYS_FILE, MANIFEST_FILE};

use crate::mape::{sequence_positions, MapeConfig, MapeError, RotaryTable};
use crate::mask::{build_mask, AttentionMask, MaskError};
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::sequence::{Modality, MultimodalSequence, Slot};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("rows {start}..{end} attend past their own range (token {query} -> {key})")]
    OpenRange {
        start: usize,
        end: usize,
        query: usize,
        key: usize,
    },
    #[error("kv cache holds {cached} tokens but the forward starts at {start}")]
    CacheLength { cached: usize, start: usize },
    #[error("sequence has a noisy segment but no timestep was given")]
    MissingTimestep,
    #[error("payload width {got} does not match expected {expected}")]
    PayloadWidth { expected: usize, got: usize },
    #[error("context of {len} tokens exceeds the limit {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Mape(#[from] MapeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub latent_channels: usize,
    /// Width of the semantic encoder output fed to the input connector.
    pub semantic_dim: usize,
    pub max_context: usize,
    /// Apply the per-head QK norm to rotated rather than raw projections.
    pub qk_norm_after_rotary: bool,
    pub mape: MapeConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let dim = 128;
        let heads = 4;
        ModelConfig {
            layers: 4,
            dim,
            heads,
            ffn: 512,
            vocab: crate::sequence::VOCAB_SIZE,
            latent_channels: 96,
            semantic_dim: dim,
            max_context: 512,
            qk_norm_after_rotary: false,
            mape: MapeConfig::for_head_dim(dim / heads),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.layers == 0 || self.dim == 0 || self.ffn == 0 || self.vocab == 0 || self.latent_channels == 0 {
            return bad("layers, dim, ffn, vocab and latent_channels must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} is not a multiple of heads {}", self.dim, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head_dim {} must be even", self.head_dim()));
        }
        self.mape.validate(self.head_dim())?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExpertId {
    Und,
    Gen,
}

impl ExpertId {
    pub const BOTH: [ExpertId; 2] = [ExpertId::Und, ExpertId::Gen];

    pub fn index(self) -> usize {
        match self {
            ExpertId::Und => 0,
            ExpertId::Gen => 1,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            ExpertId::Und => "und",
            ExpertId::Gen => "gen",
        }
    }
}

/// Text (delimiters included) and semantic tokens go to the understanding
/// expert, autoencoder latents to the generation expert.
pub fn route(modality: Modality) -> ExpertId {
    match modality {
        Modality::Text | Modality::VitSemantic => ExpertId::Und,
        Modality::VaeClean | Modality::VaeNoisy => ExpertId::Gen,
    }
}

pub fn sequence_routes(seq: &MultimodalSequence) -> Vec<ExpertId> {
    seq.modalities().into_iter().map(route).collect()
}

#[derive(Clone, Copy, Debug)]
struct LayerIds {
    attn_norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    q_norm: usize,
    k_norm: usize,
    ffn_norm: usize,
    w1: usize,
    w2: usize,
}

#[derive(Clone, Debug)]
struct ParamIds {
    embed: usize,
    /// `[expert][layer]`
    layers: [Vec<LayerIds>; 2],
    final_norm: [usize; 2],
    lm_head: usize,
    semantic_in: usize,
    latent_in: usize,
    latent_in_bias: usize,
    time_w: usize,
    time_b: usize,
    flow_w1: usize,
    flow_b1: usize,
    flow_w2: usize,
    flow_b2: usize,
    flow_out: usize,
    flow_out_bias: usize,
}

/// Configuration plus weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: ParamIds,
}

impl Model {
    /// Fresh weights drawn from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let (d, f, v, c) = (config.dim, config.ffn, config.vocab, config.latent_channels);
        let hd = config.head_dim();
        let mut p = ParamStore::new();
        let mut mat = |p: &mut ParamStore, name: String, rows: usize, cols: usize, std: f64| {
            p.push(name, Tensor::randn(&[rows, cols], std, &mut rng))
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let out_std = fan(d) / (2.0 * config.layers as f64).sqrt();
        let embed = mat(&mut p, "embed".into(), v, d, 1.0);
        let mut layers: [Vec<LayerIds>; 2] = [Vec::new(), Vec::new()];
        for l in 0..config.layers {
            for e in ExpertId::BOTH {
                let pre = format!("layer{l}.{}", e.prefix());
                let attn_norm = p.push(format!("{pre}.attn_norm"), Tensor::ones(&[d]));
                let wq = mat(&mut p, format!("{pre}.wq"), d, d, fan(d));
                let wk = mat(&mut p, format!("{pre}.wk"), d, d, fan(d));
                let wv = mat(&mut p, format!("{pre}.wv"), d, d, fan(d));
                let wo = mat(&mut p, format!("{pre}.wo"), d, d, out_std);
                let q_norm = p.push(format!("{pre}.q_norm"), Tensor::ones(&[hd]));
                let k_norm = p.push(format!("{pre}.k_norm"), Tensor::ones(&[hd]));
                let ffn_norm = p.push(format!("{pre}.ffn_norm"), Tensor::ones(&[d]));
                let w1 = mat(&mut p, format!("{pre}.w1"), d, f, fan(d));
                let w2 = mat(&mut p, format!("{pre}.w2"), f, d, fan(f) / (2.0 * config.layers as f64).sqrt());
                layers[e.index()].push(LayerIds {
                    attn_norm,
                    wq,
                    wk,
                    wv,
                    wo,
                    q_norm,
                    k_norm,
                    ffn_norm,
                    w1,
                    w2,
                });
            }
        }
        let final_norm = [p.push("und.final_norm", Tensor::ones(&[d])), p.push("gen.final_norm", Tensor::ones(&[d]))];
        let lm_head = mat(&mut p, "lm_head".into(), d, v, fan(d));
        let semantic_in = mat(&mut p, "semantic_in".into(), config.semantic_dim, d, fan(config.semantic_dim));
        let latent_in = mat(&mut p, "latent_in".into(), c, d, fan(c));
        let latent_in_bias = p.push("latent_in.bias", Tensor::zeros(&[d]));
        let time_w = mat(&mut p, "time.w".into(), d, d, fan(d));
        let time_b = p.push("time.b", Tensor::zeros(&[d]));
        let flow_w1 = mat(&mut p, "flow.w1".into(), d, d, fan(d));
        let flow_b1 = p.push("flow.b1", Tensor::zeros(&[d]));
        let flow_w2 = mat(&mut p, "flow.w2".into(), d, d, fan(d));
        let flow_b2 = p.push("flow.b2", Tensor::zeros(&[d]));
        let flow_out = mat(&mut p, "flow.out".into(), d, c, fan(d));
        let flow_out_bias = p.push("flow.out.bias", Tensor::zeros(&[c]));
        let ids = ParamIds {
            embed,
            layers,
            final_norm,
            lm_head,
            semantic_in,
            latent_in,
            latent_in_bias,
            time_w,
            time_b,
            flow_w1,
            flow_b1,
            flow_w2,
            flow_b2,
            flow_out,
            flow_out_bias,
        };
        Ok(Model { config, params: p, ids })
    }

    /// Parameter ids belonging to one expert's transformer layers and final norm.
    pub fn expert_param_ids(&self, e: ExpertId) -> Vec<usize> {
        let mut out: Vec<usize> = self.ids.layers[e.index()]
            .iter()
            .flat_map(|l| [l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.q_norm, l.k_norm, l.ffn_norm, l.w1, l.w2])
            .collect();
        out.push(self.ids.final_norm[e.index()]);
        out
    }

    /// Exchanges the two experts' weights.
    pub fn swap_experts(&mut self) {
        let und = self.expert_param_ids(ExpertId::Und);
        let gen = self.expert_param_ids(ExpertId::Gen);
        let tensors = self.params.tensors_mut();
        for (a, b) in und.into_iter().zip(gen) {
            tensors.swap(a, b);
        }
    }

    /// Overwrites the generation expert with a copy of the understanding expert.
    pub fn tie_experts(&mut self) {
        let und = self.expert_param_ids(ExpertId::Und);
        let gen = self.expert_param_ids(ExpertId::Gen);
        for (a, b) in und.into_iter().zip(gen) {
            let t = self.params.get(a).clone();
            *self.params.get_mut(b) = t;
        }
    }

    pub fn bind(&self, trainable: bool) -> Bound<'_> {
        Bound {
            model: self,
            vars: vec![None; self.params.len()],
            trainable,
        }
    }
}

/// Lazily registers parameters on a tape; only what a forward touches is copied.
pub struct Bound<'m> {
    model: &'m Model,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl Bound<'_> {
    pub fn var(&mut self, tape: &mut Tape, id: usize) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let v = tape.leaf(self.model.params.get(id).clone(), self.trainable);
        self.vars[id] = Some(v);
        v
    }

    /// Gradient for every parameter (zeros for untouched ones) after `tape.backward`.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .enumerate()
            .map(|(id, v)| {
                v.and_then(|v| tape.grad(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.model.params.get(id).shape()))
            })
            .collect()
    }

    pub fn lm_head(&mut self, tape: &mut Tape) -> Var {
        self.var(tape, self.model.ids.lm_head)
    }

    pub fn flow_head(&mut self, tape: &mut Tape) -> FlowHeadVars {
        let ids = &self.model.ids;
        let (w1, b1, w2, b2, out, out_bias) =
            (ids.flow_w1, ids.flow_b1, ids.flow_w2, ids.flow_b2, ids.flow_out, ids.flow_out_bias);
        FlowHeadVars {
            w1: self.var(tape, w1),
            b1: self.var(tape, b1),
            w2: self.var(tape, w2),
            b2: self.var(tape, b2),
            out: self.var(tape, out),
            out_bias: self.var(tape, out_bias),
        }
    }
}

/// Flow head (two-layer SiLU MLP) followed by the linear connector to latent channels.
#[derive(Clone, Copy, Debug)]
pub struct FlowHeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub out: Var,
    pub out_bias: Var,
}

impl FlowHeadVars {
    pub fn apply(&self, tape: &mut Tape, h: Var) -> Result<Var, NumericsError> {
        let a = tape.matmul(h, self.w1)?;
        let a = tape.add_bias(a, self.b1)?;
        let a = tape.silu(a)?;
        let a = tape.matmul(a, self.w2)?;
        let a = tape.add_bias(a, self.b2)?;
        let v = tape.matmul(a, self.out)?;
        tape.add_bias(v, self.out_bias)
    }
}

/// Positions, rotary angles and mask for one sequence.
#[derive(Clone, Debug)]
pub struct SequenceContext {
    pub rotary: RotaryTable,
    pub mask: AttentionMask,
}

impl SequenceContext {
    pub fn new(seq: &MultimodalSequence, cfg: &ModelConfig) -> Result<Self, ModelError> {
        if seq.len() > cfg.max_context {
            return Err(ModelError::ContextOverflow {
                len: seq.len(),
                max: cfg.max_context,
            });
        }
        let positions = sequence_positions(seq, &cfg.mape)?;
        Ok(SequenceContext {
            rotary: RotaryTable::new(&positions, cfg.head_dim(), &cfg.mape)?,
            mask: build_mask(seq.segments(), seq.len())?,
        })
    }

    /// Additive bias of `rows` against keys `0..rows.end`, after checking
    /// that no row needs a later key.
    fn bias(&self, rows: &Range<usize>) -> Result<Rc<[f64]>, ModelError> {
        let n = self.mask.len();
        let mut bias = Vec::with_capacity(rows.len() * rows.end);
        for q in rows.clone() {
            let row = self.mask.row(q);
            if let Some(k) = (rows.end..n).find(|&k| row[k]) {
                return Err(ModelError::OpenRange {
                    start: rows.start,
                    end: rows.end,
                    query: q,
                    key: k,
                });
            }
            bias.extend(row[..rows.end].iter().map(|&a| if a { 0.0 } else { crate::numerics::MASKED_LOGIT }));
        }
        Ok(bias.into())
    }
}

/// Rotated keys and values of already processed tokens, per layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvCache {
    pub len: usize,
    pub layers: Vec<(Tensor, Tensor)>,
}

impl KvCache {
    fn append(&mut self, tape: &Tape, new: &[(Var, Var)]) {
        let rows = tape.value(new[0].0).rows();
        if self.layers.is_empty() {
            self.layers = new.iter().map(|&(k, v)| (tape.value(k).clone(), tape.value(v).clone())).collect();
        } else {
            for ((ck, cv), &(k, v)) in self.layers.iter_mut().zip(new) {
                *ck = stack(ck, tape.value(k));
                *cv = stack(cv, tape.value(v));
            }
        }
        self.len += rows;
    }
}

fn stack(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(vec![a.rows() + b.rows(), a.last_dim()], data).expect("stack widths")
}

/// Keys and values the rows of a forward may attend to besides their own.
#[derive(Clone, Copy)]
pub enum Past<'a> {
    None,
    /// Values from an earlier forward, treated as constants.
    Cache(&'a KvCache),
    /// Per-layer keys and values still on the tape, so gradients flow
    /// back into the forward that produced them.
    Vars { len: usize, kv: &'a [(Var, Var)] },
}

impl Past<'_> {
    pub fn len(&self) -> usize {
        match self {
            Past::None => 0,
            Past::Cache(c) => c.len,
            Past::Vars { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result of a forward over a row range.
pub struct ForwardOutput {
    /// `[rows, d]` hidden states after each expert's final norm.
    pub hidden: Var,
    /// Rotated keys and values for the rows, per layer.
    pub kv: Vec<(Var, Var)>,
}

/// Sinusoidal features of `t` (scaled by 1000 so the unit interval spans
/// the usual frequency range).
pub fn timestep_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let a = 1000.0 * t * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

struct Partition {
    routes: Vec<ExpertId>,
    /// Local row indices per expert.
    rows: [Vec<usize>; 2],
}

impl Partition {
    fn new(routes: Vec<ExpertId>) -> Self {
        let mut rows = [Vec::new(), Vec::new()];
        for (i, r) in routes.iter().enumerate() {
            rows[r.index()].push(i);
        }
        Partition { routes, rows }
    }

    fn present(&self) -> impl Iterator<Item = ExpertId> + '_ {
        ExpertId::BOTH.into_iter().filter(|e| !self.rows[e.index()].is_empty())
    }

    fn single(&self) -> bool {
        self.present().count() == 1
    }

    /// Applies `f` to each expert's rows of `x` and reassembles.
    fn map<F>(&self, tape: &mut Tape, x: Var, mut f: F) -> Result<Var, ModelError>
    where
        F: FnMut(&mut Tape, ExpertId, Var) -> Result<Var, ModelError>,
    {
        if self.single() {
            let e = self.routes[0];
            return f(tape, e, x);
        }
        let mut parts = Vec::with_capacity(2);
        for e in self.present() {
            let rows = &self.rows[e.index()];
            let xe = tape.gather_rows(x, rows)?;
            parts.push((f(tape, e, xe)?, rows.as_slice()));
        }
        Ok(tape.scatter_rows(self.routes.len(), &parts)?)
    }
}

impl Model {
    /// Input embeddings for `rows`: token table lookups, connector projections
    /// of semantic and latent payloads, plus the timestep embedding on noisy latents.
    pub fn embed_rows(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        seq: &MultimodalSequence,
        rows: Range<usize>,
        t: Option<f64>,
    ) -> Result<Var, ModelError> {
        let d = self.config.dim;
        let mut token_rows = Vec::new();
        let mut token_ids = Vec::new();
        let mut parts: Vec<(Var, Vec<usize>)> = Vec::new();
        let mut i = rows.start;
        while i < rows.end {
            match seq.slots()[i] {
                Slot::Token(id) => {
                    token_rows.push(i - rows.start);
                    token_ids.push(id as usize);
                    i += 1;
                }
                Slot::Visual { segment, .. } => {
                    let seg = seq.segments()[segment];
                    let end = seg.end().min(rows.end);
                    let payload = seq.payload(segment).expect("visual payload");
                    let sub: Vec<usize> = (i - seg.start..end - seg.start).collect();
                    let x = if sub.len() == payload.rows() {
                        tape.constant(payload.clone())
                    } else {
                        let p = tape.constant(payload.clone());
                        tape.gather_rows(p, &sub)?
                    };
                    let (weight, expected) = match seg.modality {
                        Modality::VitSemantic => (self.ids.semantic_in, self.config.semantic_dim),
                        _ => (self.ids.latent_in, self.config.latent_channels),
                    };
                    if payload.last_dim() != expected {
                        return Err(ModelError::PayloadWidth {
                            expected,
                            got: payload.last_dim(),
                        });
                    }
                    let w = bound.var(tape, weight);
                    let mut h = tape.matmul(x, w)?;
                    if seg.modality != Modality::VitSemantic {
                        let b = bound.var(tape, self.ids.latent_in_bias);
                        h = tape.add_bias(h, b)?;
                    }
                    if seg.modality == Modality::VaeNoisy {
                        let t = t.ok_or(ModelError::MissingTimestep)?;
                        let feats = tape.constant(Tensor::new(vec![1, d], timestep_features(t, d))?);
                        let tw = bound.var(tape, self.ids.time_w);
                        let tb = bound.var(tape, self.ids.time_b);
                        let te = tape.matmul(feats, tw)?;
                        let te = tape.reshape(te, &[d])?;
                        let te = tape.add(te, tb)?;
                        h = tape.add_bias(h, te)?;
                    }
                    parts.push((h, (i - rows.start..end - rows.start).collect()));
                    i = end;
                }
            }
        }
        if !token_rows.is_empty() {
            let embed = bound.var(tape, self.ids.embed);
            let x = tape.gather_rows(embed, &token_ids)?;
            parts.push((x, token_rows));
        }
        let refs: Vec<(Var, &[usize])> = parts.iter().map(|(v, r)| (*v, r.as_slice())).collect();
        if refs.len() == 1 {
            return Ok(refs[0].0);
        }
        Ok(tape.scatter_rows(rows.len(), &refs)?)
    }

    /// Runs the backbone over `rows` of `seq`. With a cache, the rows attend to
    /// the cached tokens `0..rows.start` as well; the cache is not modified.
    pub fn forward_rows(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        seq: &MultimodalSequence,
        ctx: &SequenceContext,
        rows: Range<usize>,
        past: Past,
        t: Option<f64>,
    ) -> Result<ForwardOutput, ModelError> {
        let cached = past.len();
        if cached != rows.start {
            return Err(ModelError::CacheLength {
                cached,
                start: rows.start,
            });
        }
        let x = self.embed_rows(tape, bound, seq, rows.clone(), t)?;
        let routes = sequence_routes(seq)[rows.clone()].to_vec();
        let rotary = ctx.rotary.select(&rows.clone().collect::<Vec<_>>());
        let bias = ctx.bias(&rows)?;
        self.forward_core(tape, bound, x, routes, &rotary, &bias, past)
    }

    /// Backbone body on explicit inputs and routes.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_core(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        mut x: Var,
        routes: Vec<ExpertId>,
        rotary: &RotaryTable,
        bias: &Rc<[f64]>,
        past: Past,
    ) -> Result<ForwardOutput, ModelError> {
        let cfg = &self.config;
        let (heads, hd) = (cfg.heads, cfg.head_dim());
        let m = routes.len();
        let part = Partition::new(routes);
        let qk_norm = |tape: &mut Tape, v: Var, gain: Var| -> Result<Var, ModelError> {
            let rows = tape.value(v).rows();
            let r = tape.reshape(v, &[rows * heads, hd])?;
            let r = tape.rms_norm(r, gain)?;
            Ok(tape.reshape(r, &[rows, heads * hd])?)
        };
        let mut kv = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let ids = |e: ExpertId| self.ids.layers[e.index()][l];
            let mut proj = |tape: &mut Tape, which: usize| -> Result<Var, ModelError> {
                part.map(tape, x, |tape, e, xe| {
                    let li = ids(e);
                    let g = bound.var(tape, li.attn_norm);
                    let h = tape.rms_norm(xe, g)?;
                    let w = bound.var(tape, [li.wq, li.wk, li.wv][which]);
                    let p = tape.matmul(h, w)?;
                    if which < 2 && !cfg.qk_norm_after_rotary {
                        let gain = bound.var(tape, [li.q_norm, li.k_norm][which]);
                        return qk_norm(tape, p, gain);
                    }
                    Ok(p)
                })
            };
            let mut q = proj(tape, 0)?;
            let mut k = proj(tape, 1)?;
            let v = proj(tape, 2)?;
            q = tape.rotate_pairs(q, &rotary.cos, &rotary.sin, hd)?;
            k = tape.rotate_pairs(k, &rotary.cos, &rotary.sin, hd)?;
            if cfg.qk_norm_after_rotary {
                for (which, target) in [(0, &mut q), (1, &mut k)] {
                    *target = part.map(tape, *target, |tape, e, xe| {
                        let li = ids(e);
                        let gain = bound.var(tape, [li.q_norm, li.k_norm][which]);
                        qk_norm(tape, xe, gain)
                    })?;
                }
            }
            kv.push((k, v));
            let past_kv = match past {
                Past::Cache(cache) if cache.len > 0 => {
                    let (pk, pv) = &cache.layers[l];
                    Some((tape.constant(pk.clone()), tape.constant(pv.clone())))
                }
                Past::Vars { len, kv } if len > 0 => Some(kv[l]),
                _ => None,
            };
            let (k_all, v_all) = match past_kv {
                Some((pk, pv)) => {
                    let p = past.len();
                    let old: Vec<usize> = (0..p).collect();
                    let new: Vec<usize> = (p..p + m).collect();
                    let ka = tape.scatter_rows(p + m, &[(pk, &old), (k, &new)])?;
                    let va = tape.scatter_rows(p + m, &[(pv, &old), (v, &new)])?;
                    (ka, va)
                }
                None => (k, v),
            };
            let a = tape.attention(q, k_all, v_all, heads, bias)?;
            let o = part.map(tape, a, |tape, e, ae| {
                let w = bound.var(tape, ids(e).wo);
                Ok(tape.matmul(ae, w)?)
            })?;
            x = tape.add(x, o)?;
            let f = part.map(tape, x, |tape, e, xe| {
                let li = ids(e);
                let g = bound.var(tape, li.ffn_norm);
                let h = tape.rms_norm(xe, g)?;
                let w1 = bound.var(tape, li.w1);
                let h = tape.matmul(h, w1)?;
                let h = tape.silu(h)?;
                let w2 = bound.var(tape, li.w2);
                Ok(tape.matmul(h, w2)?)
            })?;
            x = tape.add(x, f)?;
        }
        let hidden = part.map(tape, x, |tape, e, xe| {
            let g = bound.var(tape, self.ids.final_norm[e.index()]);
            Ok(tape.rms_norm(xe, g)?)
        })?;
        Ok(ForwardOutput { hidden, kv })
    }

    /// Full-sequence forward.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        seq: &MultimodalSequence,
        t: Option<f64>,
    ) -> Result<ForwardOutput, ModelError> {
        let ctx = SequenceContext::new(seq, &self.config)?;
        self.forward_rows(tape, bound, seq, &ctx, 0..seq.len(), Past::None, t)
    }

    /// Forward over `rows` that also appends their keys and values to `cache`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_cached(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        seq: &MultimodalSequence,
        ctx: &SequenceContext,
        rows: Range<usize>,
        cache: &mut KvCache,
        t: Option<f64>,
    ) -> Result<Var, ModelError> {
        let out = self.forward_rows(tape, bound, seq, ctx, rows, Past::Cache(cache), t)?;
        cache.append(tape, &out.kv);
        Ok(out.hidden)
    }
}

//! Text decoding with a key/value cache and Euler flow sampling with
//! classifier-free guidance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{KvCache, Model, ModelError, Past, SequenceContext};
use crate::encoders::{EncoderError, LatentGrid, ToyEncoders, VisualArray};
use crate::heads::time_grid;
use crate::numerics::{softmax_in_place, Tape, Tensor};
use crate::prepare::{cfg_pair, understanding_prompt, PrepareError, Prepared};
use crate::sequence::tokenizer::decode;
use crate::sequence::{MultimodalSequence, SequenceError, TokenId, EOT};
use crate::synth::Sample;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("sequence has no noisy segment to generate")]
    NoNoisySegment,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prepare(#[from] PrepareError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub shift: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 20,
            cfg_scale: 4.0,
            shift: 4.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.steps == 0 {
            return Err(InferenceError::Config("steps must be at least 1".into()));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(InferenceError::Config(format!("cfg_scale {} must be non-negative", self.cfg_scale)));
        }
        if !(self.shift >= 1.0 && self.shift.is_finite()) {
            return Err(InferenceError::Config(format!("shift {} must be at least 1", self.shift)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    /// Samples among the `k` most likely tokens; temperature 0 is greedy.
    TopK { k: usize, temperature: f64, seed: u64 },
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn pick_token(logits: &[f64], mode: DecodeMode, rng: &mut ChaCha8Rng) -> usize {
    match mode {
        DecodeMode::Greedy => argmax(logits),
        DecodeMode::TopK { temperature, .. } if temperature <= 0.0 => argmax(logits),
        DecodeMode::TopK { k, temperature, .. } => {
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            order.truncate(k.max(1));
            let mut p: Vec<f64> = order.iter().map(|&i| logits[i] / temperature).collect();
            softmax_in_place(&mut p);
            let mut u: f64 = rng.random();
            for (&i, &pi) in order.iter().zip(&p) {
                if u < pi {
                    return i;
                }
                u -= pi;
            }
            *order.last().expect("k is at least 1")
        }
    }
}

/// Continues `prompt` (which must end inside an open text span) until EOT
/// or `max_new` tokens. Returns the new tokens without the EOT.
pub fn decode_text(
    model: &Model,
    prompt: &MultimodalSequence,
    max_new: usize,
    mode: DecodeMode,
) -> Result<Vec<TokenId>, InferenceError> {
    let seed = match mode {
        DecodeMode::TopK { seed, .. } => seed,
        DecodeMode::Greedy => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = prompt.clone();
    let mut cache = KvCache::default();
    let mut out = Vec::new();
    let lm_id = model.params.id("lm_head").expect("model has an lm head");
    let lm = model.params.get(lm_id);
    while out.len() < max_new {
        let ctx = SequenceContext::new(&seq, &model.config)?;
        let mut tape = Tape::new();
        let mut bound = model.bind(false);
        let hidden = model.forward_cached(&mut tape, &mut bound, &seq, &ctx, cache.len..seq.len(), &mut cache, None)?;
        let h = tape.value(hidden);
        let last = h.row(h.rows() - 1);
        let mut logits = vec![0.0; model.config.vocab];
        for (j, l) in logits.iter_mut().enumerate() {
            *l = last.iter().enumerate().map(|(i, x)| x * lm.data()[i * model.config.vocab + j]).sum();
        }
        let id = pick_token(&logits, mode, &mut rng) as TokenId;
        if id == EOT {
            break;
        }
        out.push(id);
        seq.push_text_token(id);
    }
    Ok(out)
}

/// `v_c + (s − 1)(v_c − v_u)`, the guidance formula arranged so that s = 1
/// and v_c = v_u both return `v_c` exactly.
pub fn guide(v_cond: &Tensor, v_uncond: &Tensor, scale: f64) -> Tensor {
    let data = v_cond
        .data()
        .iter()
        .zip(v_uncond.data())
        .map(|(c, u)| c + (scale - 1.0) * (c - u))
        .collect();
    Tensor::new(v_cond.shape().to_vec(), data).expect("same shape")
}

/// Integrates `dx/dt = field(x, t)` with forward Euler over `grid`.
pub fn euler_sample<F>(x0: Tensor, grid: &[f64], mut field: F) -> Result<Tensor, InferenceError>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor, InferenceError>,
{
    let mut x = x0;
    for w in grid.windows(2) {
        let v = field(&x, w[0])?;
        let dt = w[1] - w[0];
        x.data_mut().iter_mut().zip(v.data()).for_each(|(a, b)| *a += dt * b);
    }
    Ok(x)
}

/// Velocity predictions for one sequence. The clean context before the
/// noisy segment never sees noisy tokens, so it runs once and is cached;
/// only the noisy rows are recomputed at each step.
pub struct VelocityField<'a> {
    model: &'a Model,
    seq: MultimodalSequence,
    ctx: SequenceContext,
    cache: KvCache,
    segment: usize,
}

impl<'a> VelocityField<'a> {
    pub fn new(model: &'a Model, seq: &MultimodalSequence) -> Result<Self, InferenceError> {
        let segment = seq.noisy_segment().ok_or(InferenceError::NoNoisySegment)?;
        let start = seq.segments()[segment].start;
        let ctx = SequenceContext::new(seq, &model.config)?;
        let mut cache = KvCache::default();
        if start > 0 {
            let mut tape = Tape::new();
            let mut bound = model.bind(false);
            model.forward_cached(&mut tape, &mut bound, seq, &ctx, 0..start, &mut cache, None)?;
        }
        Ok(VelocityField {
            model,
            seq: seq.clone(),
            ctx,
            cache,
            segment,
        })
    }

    /// Predicted velocity for noisy latents `x` at time `t`.
    pub fn eval(&mut self, x: &Tensor, t: f64) -> Result<Tensor, InferenceError> {
        self.seq.set_payload(self.segment, x.clone())?;
        let seg = self.seq.segments()[self.segment];
        let mut tape = Tape::new();
        let mut bound = self.model.bind(false);
        let start = self.cache.len;
        let out = self.model.forward_rows(
            &mut tape,
            &mut bound,
            &self.seq,
            &self.ctx,
            start..self.seq.len(),
            Past::Cache(&self.cache),
            Some(t),
        )?;
        let rows: Vec<usize> = (seg.start - start..seg.end() - start).collect();
        let h = tape.gather_rows(out.hidden, &rows).map_err(ModelError::from)?;
        let head = bound.flow_head(&mut tape);
        let v = head.apply(&mut tape, h).map_err(ModelError::from)?;
        Ok(tape.value(v).clone())
    }
}

/// Samples target latents for `cond`, guided against `uncond` when given
/// and different from `cond`.
pub fn generate_latents(
    model: &Model,
    cond: &Prepared,
    uncond: Option<&Prepared>,
    cfg: &SamplerConfig,
) -> Result<Tensor, InferenceError> {
    cfg.validate()?;
    let target = cond.flow_target.as_ref().ok_or(InferenceError::NoNoisySegment)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x0 = Tensor::randn(target.shape(), 1.0, &mut rng);
    let grid = time_grid(cfg.steps, cfg.shift);
    let mut vc = VelocityField::new(model, &cond.seq)?;
    let mut vu = match uncond {
        Some(u) if u.seq != cond.seq => Some(VelocityField::new(model, &u.seq)?),
        _ => None,
    };
    euler_sample(x0, &grid, |x, t| {
        let c = vc.eval(x, t)?;
        match &mut vu {
            Some(u) => Ok(guide(&c, &u.eval(x, t)?, cfg.cfg_scale)),
            None => Ok(c),
        }
    })
}

/// Generates the target of a generation sample and decodes it to pixels.
pub fn generate_visual(
    model: &Model,
    enc: &ToyEncoders,
    sample: &Sample,
    cfg: &SamplerConfig,
) -> Result<(LatentGrid, VisualArray), InferenceError> {
    let (cond, uncond) = cfg_pair(sample, enc)?;
    let tokens = generate_latents(model, &cond, Some(&uncond), cfg)?;
    let layout = cond.noisy_layout.expect("generation samples have a layout");
    let frames = match &sample.target {
        crate::synth::Target::Visual(v) => v.frames,
        crate::synth::Target::Text(_) => unreachable!("cfg_pair only accepts generation samples"),
    };
    let grid = LatentGrid { layout, frames, tokens };
    let pixels = enc.decode_model_latents(&grid)?;
    Ok((grid, pixels))
}

/// Greedy answer to an understanding sample.
pub fn answer(model: &Model, enc: &ToyEncoders, sample: &Sample, max_new: usize) -> Result<String, InferenceError> {
    let prompt = understanding_prompt(sample, enc)?;
    let ids = decode_text(model, &prompt, max_new, DecodeMode::Greedy)?;
    Ok(decode(&ids))
}

//! Optimization loop: batches, gradients, AdamW, checkpoints and metrics.
//!
//! A step's data is a pure function of `(seed, global step)`, so a resumed
//! run replays exactly the batches the continuous run would have seen.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{
    read_arrays, write_arrays, ArrayFileError, Model, ModelConfig, ModelError, Past, SequenceContext,
};
use crate::encoders::{EncoderConfig, ToyEncoders};
use crate::heads::{cfg_drop_decision, flow_loss, lm_loss, make_flow_state, total_loss, CondDrop, FlowState, HeadError, LossWeights};
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::prepare::{prepare, PrepareError, Prepared};
use crate::schedule::{lr_at, AdamConfig, Stage, StagePlan, TaskKind};
use crate::synth::{sample_at, sample_rng, Sample};
use crate::sequence::Slot;

/// Environment variable bounding the number of gradient worker threads.
pub const THREADS_ENV: &str = "LANCE_TOY_THREADS";
/// Mixed into the seed for per-sample noise and drop draws so they do not
/// share a stream with sample content.
const NOISE_SALT: u64 = 0x6e6f_6973_6500;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {what} at step {step} ({stage}); tasks {tasks:?}, l_und {l_und:?}, l_gen {l_gen:?}")]
    NonFinite {
        what: &'static str,
        step: u64,
        stage: Stage,
        tasks: Vec<TaskKind>,
        l_und: Option<f64>,
        l_gen: Option<f64>,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Prepare(#[from] PrepareError),
    #[error(transparent)]
    Arrays(#[from] ArrayFileError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// First and second moments of every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Global L2 norm of `grads`.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One bias-corrected AdamW update with decoupled weight decay.
pub fn adamw_update(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig, lr: f64) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let p = p.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            if lr == 0.0 {
                continue;
            }
            let step = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps) + cfg.weight_decay * p[i];
            p[i] -= lr * step;
        }
    }
}

/// A prepared sample with its flow draw applied to the noisy segment.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub prepared: Prepared,
    pub flow: Option<FlowState>,
    pub drop: CondDrop,
}

impl TrainItem {
    /// Draws the condition drop and the flow state for `sample` from `rng`.
    pub fn new(sample: &Sample, enc: &ToyEncoders, plan: &StagePlan, rng: &mut ChaCha8Rng) -> Result<Self, TrainError> {
        let drop = if sample.task.is_generation() {
            cfg_drop_decision(plan.stage.kind(), rng)
        } else {
            CondDrop::Keep
        };
        Self::with_drop(sample, enc, drop, plan.shift, rng)
    }

    pub fn with_drop(
        sample: &Sample,
        enc: &ToyEncoders,
        drop: CondDrop,
        shift: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TrainError> {
        let mut prepared = prepare(sample, enc, drop)?;
        let flow = match &prepared.flow_target {
            Some(x1) => {
                let state = make_flow_state(x1, shift, rng);
                let noisy = prepared.seq.noisy_segment().expect("generation samples have a noisy segment");
                prepared
                    .seq
                    .set_payload(noisy, state.x_t.clone())
                    .map_err(PrepareError::from)?;
                Some(state)
            }
            None => None,
        };
        Ok(TrainItem { prepared, flow, drop })
    }
}

/// The batch of global step `step`.
pub fn make_batch(
    plan: &StagePlan,
    enc: &ToyEncoders,
    seed: u64,
    step: u64,
    batch: usize,
) -> Result<Vec<TrainItem>, TrainError> {
    (0..batch as u64)
        .map(|i| {
            let index = step * batch as u64 + i;
            let sample = sample_at(&plan.mixture, seed, index);
            let mut rng = sample_rng(seed ^ NOISE_SALT, index);
            TrainItem::new(&sample, enc, plan, &mut rng)
        })
        .collect()
}

/// Per-term means over the batch and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub l_und: Option<f64>,
    pub l_gen: Option<f64>,
    pub total: f64,
}

struct GroupResult {
    und: f64,
    gen: f64,
    grads: Option<Vec<Tensor>>,
}

/// Samples sharing a template prefix, in first-appearance order. Each
/// group runs its common prefix once.
fn prefix_groups(items: &[TrainItem]) -> Vec<Vec<usize>> {
    let mut keys: HashMap<Vec<Slot>, usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, it) in items.iter().enumerate() {
        let p = it.prepared.shared_prefix;
        if p == 0 {
            groups.push(vec![i]);
            continue;
        }
        let key = it.prepared.seq.slots()[..p].to_vec();
        match keys.get(&key) {
            Some(&g) => groups[g].push(i),
            None => {
                keys.insert(key, groups.len());
                groups.push(vec![i]);
            }
        }
    }
    groups
}

fn group_loss(
    model: &Model,
    items: &[TrainItem],
    group: &[usize],
    scale_und: f64,
    scale_gen: f64,
    want_grads: bool,
) -> Result<GroupResult, TrainError> {
    let mut tape = Tape::new();
    let mut bound = model.bind(want_grads);
    let first = &items[group[0]].prepared;
    let p = if group.len() > 1 { first.shared_prefix } else { 0 };
    let head = if p > 0 {
        let ctx = SequenceContext::new(&first.seq, &model.config)?;
        Some(model.forward_rows(&mut tape, &mut bound, &first.seq, &ctx, 0..p, Past::None, None)?)
    } else {
        None
    };
    let (mut und, mut gen) = (0.0, 0.0);
    let mut terms: Vec<Var> = Vec::new();
    for &i in group {
        let it = &items[i];
        let seq = &it.prepared.seq;
        let ctx = SequenceContext::new(seq, &model.config)?;
        let t = it.flow.as_ref().map(|f| f.t);
        let out = match &head {
            Some(h) => {
                let past = Past::Vars { len: p, kv: &h.kv };
                model.forward_rows(&mut tape, &mut bound, seq, &ctx, p..seq.len(), past, t)?
            }
            None => model.forward_rows(&mut tape, &mut bound, seq, &ctx, 0..seq.len(), Past::None, t)?,
        };
        if let Some(lm) = &it.prepared.lm {
            let positions: Vec<usize> = lm.positions.iter().map(|&x| x - p).collect();
            let targets: Vec<usize> = lm.targets.iter().map(|&x| x as usize).collect();
            let w = bound.lm_head(&mut tape);
            let ce = lm_loss(&mut tape, out.hidden, w, &positions, &targets)?;
            und += tape.value(ce).item();
            terms.push(tape.scale(ce, scale_und).map_err(HeadError::from)?);
        }
        if let Some(state) = &it.flow {
            let seg = seq.segments()[seq.noisy_segment().expect("flow items have a noisy segment")];
            let rows: Vec<usize> = (seg.start - p..seg.end() - p).collect();
            let h = tape.gather_rows(out.hidden, &rows).map_err(HeadError::from)?;
            let vars = bound.flow_head(&mut tape);
            let mse = flow_loss(&mut tape, h, &vars, state)?;
            gen += tape.value(mse).item();
            terms.push(tape.scale(mse, scale_gen).map_err(HeadError::from)?);
        }
    }
    let grads = if want_grads {
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t).map_err(HeadError::from)?;
        }
        tape.backward(loss).map_err(HeadError::from)?;
        Some(bound.grads(&tape))
    } else {
        None
    };
    Ok(GroupResult { und, gen, grads })
}

/// Threads used for gradient work: `LANCE_TOY_THREADS` if set, else all cores.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Loss of `items` under `weights`, and its gradient when `want_grads`.
///
/// Each term is averaged over the samples that carry it. Groups may run on
/// several threads; their gradients are summed in group order, so the
/// result does not depend on the thread count.
pub fn batch_loss(
    model: &Model,
    items: &[TrainItem],
    weights: LossWeights,
    want_grads: bool,
    threads: usize,
) -> Result<(LossParts, Option<Vec<Tensor>>), TrainError> {
    if items.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let n_und = items.iter().filter(|i| i.prepared.lm.is_some()).count();
    let n_gen = items.iter().filter(|i| i.flow.is_some()).count();
    let scale_und = if n_und > 0 { weights.lambda_u / n_und as f64 } else { 0.0 };
    let scale_gen = if n_gen > 0 { weights.lambda_g / n_gen as f64 } else { 0.0 };
    let groups = prefix_groups(items);
    let run = |g: &Vec<usize>| group_loss(model, items, g, scale_und, scale_gen, want_grads);
    let results: Vec<GroupResult> = if threads > 1 && groups.len() > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        pool.install(|| groups.par_iter().map(run).collect::<Result<_, _>>())?
    } else {
        groups.iter().map(run).collect::<Result<_, _>>()?
    };
    let mut und = 0.0;
    let mut gen = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for r in results {
        und += r.und;
        gen += r.gen;
        if let Some(g) = r.grads {
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
    }
    let l_und = (n_und > 0).then(|| und / n_und as f64);
    let l_gen = (n_gen > 0).then(|| gen / n_gen as f64);
    let parts = LossParts {
        l_und,
        l_gen,
        total: total_loss(l_und, l_gen, weights),
    };
    Ok((parts, grads))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: u64,
    pub stage: Stage,
    pub lr: f64,
    pub l_und: Option<f64>,
    pub l_gen: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
    pub tasks: Vec<TaskKind>,
}

/// The operation that produced a non-finite value, if that is what failed.
fn non_finite_op(e: &TrainError) -> Option<&'static str> {
    match e {
        TrainError::Model(ModelError::Numerics(NumericsError::NonFinite(op)))
        | TrainError::Head(HeadError::Numerics(NumericsError::NonFinite(op))) => Some(op),
        _ => None,
    }
}

/// Knobs of a training run that are not stage hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub seed: u64,
    /// Multiplies every stage learning rate.
    pub lr_scale: f64,
    /// Gradient worker threads; 0 reads the environment.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 4,
            seed: 0,
            lr_scale: 1.0,
            threads: 0,
        }
    }
}

/// Model, optimizer and position in the stage list.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub encoders: ToyEncoders,
    pub encoder_config: EncoderConfig,
    pub adam: AdamState,
    pub plans: Vec<StagePlan>,
    pub config: TrainConfig,
    pub stage_index: usize,
    pub stage_step: usize,
    pub global_step: u64,
}

const STATE_FILE: &str = "trainer.json";

/// Everything in a checkpoint besides arrays.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct CheckpointState {
    model: ModelConfig,
    encoders: EncoderConfig,
    train: TrainConfig,
    plans: Vec<StagePlan>,
    stage_index: usize,
    stage_step: usize,
    global_step: u64,
    adam_t: u64,
}

impl Trainer {
    pub fn new(
        model: Model,
        encoder_config: EncoderConfig,
        plans: Vec<StagePlan>,
        config: TrainConfig,
    ) -> Self {
        let encoders = ToyEncoders::new(encoder_config, model.config.semantic_dim);
        let adam = AdamState::zeros_like(model.params.tensors());
        Trainer {
            model,
            encoders,
            encoder_config,
            adam,
            plans,
            config,
            stage_index: 0,
            stage_step: 0,
            global_step: 0,
        }
    }

    pub fn done(&self) -> bool {
        self.stage_index >= self.plans.len()
    }

    pub fn current_plan(&self) -> Option<&StagePlan> {
        self.plans.get(self.stage_index)
    }

    fn threads(&self) -> usize {
        if self.config.threads > 0 {
            self.config.threads
        } else {
            worker_threads()
        }
    }

    /// Runs one step of the current stage. Weights are left untouched when
    /// the loss or gradient is not finite.
    pub fn step(&mut self) -> Result<TrainMetrics, TrainError> {
        let plan = *self.current_plan().expect("training is not finished");
        let items = make_batch(&plan, &self.encoders, self.config.seed, self.global_step, self.config.batch)?;
        let tasks: Vec<TaskKind> = items.iter().map(|i| i.prepared.task).collect();
        let bad = |what, parts: Option<LossParts>| TrainError::NonFinite {
            what,
            step: self.global_step,
            stage: plan.stage,
            tasks: tasks.clone(),
            l_und: parts.and_then(|p| p.l_und),
            l_gen: parts.and_then(|p| p.l_gen),
        };
        let (parts, grads) = match batch_loss(&self.model, &items, plan.weights, true, self.threads()) {
            Ok(r) => r,
            Err(e) => return Err(non_finite_op(&e).map_or(e, |op| bad(op, None))),
        };
        let mut grads = grads.expect("gradients were requested");
        let norm = global_norm(&grads);
        if !parts.total.is_finite() {
            return Err(bad("loss", Some(parts)));
        }
        if !norm.is_finite() {
            return Err(bad("gradient", Some(parts)));
        }
        clip_global(&mut grads, plan.clip);
        let lr = lr_at(&plan, self.stage_step) * self.config.lr_scale;
        adamw_update(self.model.params.tensors_mut(), &grads, &mut self.adam, &plan.adam, lr);
        let metrics = TrainMetrics {
            step: self.global_step,
            stage: plan.stage,
            lr,
            l_und: parts.l_und,
            l_gen: parts.l_gen,
            total: parts.total,
            grad_norm: norm,
            tasks,
        };
        self.global_step += 1;
        self.stage_step += 1;
        if self.stage_step >= plan.steps {
            self.stage_index += 1;
            self.stage_step = 0;
        }
        Ok(metrics)
    }

    /// Runs up to `max_steps` steps (all remaining when `None`), passing each
    /// step's metrics to `sink`. Returns the number of steps taken.
    pub fn run(
        &mut self,
        max_steps: Option<u64>,
        mut sink: impl FnMut(&Trainer, &TrainMetrics) -> Result<(), TrainError>,
    ) -> Result<u64, TrainError> {
        let mut taken = 0;
        while !self.done() && max_steps.is_none_or(|m| taken < m) {
            let metrics = self.step()?;
            taken += 1;
            sink(self, &metrics)?;
        }
        Ok(taken)
    }

    /// Writes weights, moments and counters into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        let names: Vec<(String, &Tensor)> = self
            .model
            .params
            .iter()
            .flat_map(|(n, t)| [(format!("param.{n}"), t)])
            .chain(self.model.params.iter().zip(&self.adam.m).map(|((n, _), m)| (format!("adam_m.{n}"), m)))
            .chain(self.model.params.iter().zip(&self.adam.v).map(|((n, _), v)| (format!("adam_v.{n}"), v)))
            .collect();
        write_arrays(dir, names.iter().map(|(n, t)| (n.as_str(), *t)))?;
        let state = CheckpointState {
            model: self.model.config,
            encoders: self.encoder_config,
            train: self.config,
            plans: self.plans.clone(),
            stage_index: self.stage_index,
            stage_step: self.stage_step,
            global_step: self.global_step,
            adam_t: self.adam.t,
        };
        fs::write(dir.join(STATE_FILE), serde_json::to_string_pretty(&state)?)?;
        Ok(())
    }

    /// Restores a trainer from `dir`. All arrays are verified before any
    /// state is built.
    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let state: CheckpointState = serde_json::from_str(&fs::read_to_string(dir.join(STATE_FILE))?)?;
        let arrays = read_arrays(dir)?;
        let mut model = Model::new(state.model)?;
        let mut by_kind: [Vec<(String, Tensor)>; 3] = Default::default();
        for (name, t) in arrays {
            let (slot, rest) = if let Some(r) = name.strip_prefix("param.") {
                (0, r)
            } else if let Some(r) = name.strip_prefix("adam_m.") {
                (1, r)
            } else if let Some(r) = name.strip_prefix("adam_v.") {
                (2, r)
            } else {
                return Err(TrainError::Incompatible(format!("unexpected array {name}")));
            };
            by_kind[slot].push((rest.to_string(), t));
        }
        let [params, m, v] = by_kind;
        model.params.assign(&params)?;
        let mut moments = model.params.clone();
        moments.assign(&m)?;
        let m = moments.tensors().to_vec();
        moments.assign(&v)?;
        let v = moments.tensors().to_vec();
        let mut trainer = Trainer::new(model, state.encoders, state.plans, state.train);
        trainer.adam = AdamState { m, v, t: state.adam_t };
        trainer.stage_index = state.stage_index;
        trainer.stage_step = state.stage_step;
        trainer.global_step = state.global_step;
        Ok(trainer)
    }

    /// Checks that a checkpoint was written for the same model and data.
    pub fn check_compatible(&self, model: &ModelConfig, encoders: &EncoderConfig) -> Result<(), TrainError> {
        if self.model.config != *model {
            return Err(TrainError::Incompatible("model config differs".into()));
        }
        if self.encoder_config != *encoders {
            return Err(TrainError::Incompatible("encoder config differs".into()));
        }
        Ok(())
    }
}

/// Appends metrics as JSON lines.
pub struct MetricsLog {
    file: fs::File,
}

impl MetricsLog {
    pub fn append(path: &Path) -> Result<Self, TrainError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsLog { file })
    }

    pub fn write(&mut self, m: &TrainMetrics) -> Result<(), TrainError> {
        writeln!(self.file, "{}", serde_json::to_string(m)?)?;
        Ok(())
    }
}

/// Deterministic generator for evaluation draws.
pub fn eval_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ NOISE_SALT);
    rng.set_stream(index);
    rng
}

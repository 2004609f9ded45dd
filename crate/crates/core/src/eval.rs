//! Evaluation suites with pass/fail thresholds.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Model, ModelConfig};
use crate::encoders::{EncoderConfig, ToyEncoders};
use crate::heads::{CondDrop, LossWeights};
use crate::inference::{answer, generate_visual, InferenceError, SamplerConfig};
use crate::mask::{build_mask, oracle_mask, AttentionMask, MaskError};
use crate::numerics::Tensor;
use crate::schedule::{Stage, StagePlan, TaskKind};
use crate::sequence::{build_sequence, Block, Layout, Modality, MultimodalSequence};
use crate::synth::{classify_frame, classify_motion, task_sample_at, Target};
use crate::trainer::{batch_loss, eval_rng, TrainConfig, TrainError, TrainItem, Trainer};

/// Held-out streams use this seed offset so they never replay training samples.
pub const HELD_OUT_SALT: u64 = 0x00e7_a100_0000;

pub const QA_THRESHOLD: f64 = 0.90;
pub const T2I_THRESHOLD: f64 = 0.95;
pub const T2V_THRESHOLD: f64 = 0.90;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    /// Lower bound the value must reach, if the metric is judged.
    pub threshold: Option<f64>,
}

impl Metric {
    pub fn passed(&self) -> bool {
        self.threshold.is_none_or(|t| self.value >= t)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub suite: String,
    pub metrics: Vec<Metric>,
    /// Free-form observations that are recorded but not judged.
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn new(suite: &str) -> Self {
        EvalReport {
            suite: suite.to_string(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, name: &str, value: f64, threshold: Option<f64>) {
        self.metrics.push(Metric {
            name: name.to_string(),
            value,
            threshold,
        });
    }

    pub fn passed(&self) -> bool {
        self.metrics.iter().all(Metric::passed)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "suite {}", self.suite)?;
        for m in &self.metrics {
            let verdict = match m.threshold {
                Some(t) => format!(" (threshold {t}) {}", if m.passed() { "PASS" } else { "FAIL" }),
                None => String::new(),
            };
            writeln!(f, "  {}: {:.6}{verdict}", m.name, m.value)?;
        }
        for n in &self.notes {
            writeln!(f, "  note: {n}")?;
        }
        Ok(())
    }
}

/// Exact-match accuracy on `n` held-out questions spread over image,
/// video and two-image understanding.
pub fn qa_accuracy(model: &Model, enc: &ToyEncoders, seed: u64, n: usize) -> Result<f64, EvalError> {
    let tasks = [TaskKind::I2T, TaskKind::V2T, TaskKind::X2T];
    let mut correct = 0;
    let mut asked = 0;
    let mut index = 0;
    while asked < n {
        let task = tasks[asked % tasks.len()];
        let s = task_sample_at(task, seed ^ HELD_OUT_SALT, index);
        index += 1;
        if !s.is_qa() {
            continue;
        }
        let Target::Text(expected) = &s.target else { unreachable!("understanding targets are text") };
        let got = answer(model, enc, &s, 16)?;
        correct += usize::from(got == *expected);
        asked += 1;
    }
    Ok(correct as f64 / n as f64)
}

/// Share of `n` held-out text-to-image samples whose generated color and
/// shape both match the caption.
pub fn t2i_accuracy(
    model: &Model,
    enc: &ToyEncoders,
    seed: u64,
    n: usize,
    sampler: &SamplerConfig,
) -> Result<f64, EvalError> {
    let mut correct = 0;
    for i in 0..n as u64 {
        let s = task_sample_at(TaskKind::T2I, seed ^ HELD_OUT_SALT, i);
        let cfg = SamplerConfig {
            seed: sampler.seed ^ i,
            ..*sampler
        };
        let (_, pixels) = generate_visual(model, enc, &s, &cfg)?;
        let ok = classify_frame(&pixels, 0)
            .is_some_and(|r| Some(r.color) == s.truth.color && Some(r.shape) == s.truth.shape);
        correct += usize::from(ok);
    }
    Ok(correct as f64 / n as f64)
}

/// Share of `n` held-out text-to-video samples whose generated clip moves
/// in the captioned direction.
pub fn t2v_motion_accuracy(
    model: &Model,
    enc: &ToyEncoders,
    seed: u64,
    n: usize,
    sampler: &SamplerConfig,
) -> Result<f64, EvalError> {
    let mut correct = 0;
    for i in 0..n as u64 {
        let s = task_sample_at(TaskKind::T2V, seed ^ HELD_OUT_SALT, i);
        let cfg = SamplerConfig {
            seed: sampler.seed ^ i,
            ..*sampler
        };
        let (_, pixels) = generate_visual(model, enc, &s, &cfg)?;
        correct += usize::from(classify_motion(&pixels).is_some() && classify_motion(&pixels) == s.truth.direction);
    }
    Ok(correct as f64 / n as f64)
}

pub fn understanding_suite(model: &Model, enc: &ToyEncoders, seed: u64, n: usize) -> Result<EvalReport, EvalError> {
    let mut r = EvalReport::new("understanding");
    r.push("qa_exact_match", qa_accuracy(model, enc, seed, n)?, Some(QA_THRESHOLD));
    Ok(r)
}

pub fn generation_suite(
    model: &Model,
    enc: &ToyEncoders,
    seed: u64,
    n: usize,
    sampler: &SamplerConfig,
) -> Result<EvalReport, EvalError> {
    let mut r = EvalReport::new("generation");
    r.push("t2i_color_shape_accuracy", t2i_accuracy(model, enc, seed, n, sampler)?, Some(T2I_THRESHOLD));
    r.push("t2v_motion_accuracy", t2v_motion_accuracy(model, enc, seed, n, sampler)?, Some(T2V_THRESHOLD));
    Ok(r)
}

/// Named layouts with stored golden masks.
pub fn golden_layouts() -> Vec<(&'static str, MultimodalSequence, &'static str)> {
    let rows = |n: usize, c: usize| Tensor::zeros(&[n, c]);
    let seq = |blocks| build_sequence(blocks).expect("golden layouts are valid");
    vec![
        (
            "t2i",
            seq(vec![
                Block::text(vec![1, 2, 3]),
                Block::visual(Modality::VaeNoisy, rows(4, 2), Layout::new(1, 2, 2)),
            ]),
            include_str!("../tests/golden/masks/t2i.txt"),
        ),
        (
            "edit",
            seq(vec![
                Block::text(vec![1, 2]),
                Block::visual(Modality::VitSemantic, rows(2, 2), Layout::new(1, 1, 2)),
                Block::visual(Modality::VaeClean, rows(4, 2), Layout::new(1, 2, 2)),
                Block::text(vec![3]),
                Block::visual(Modality::VaeNoisy, rows(4, 2), Layout::new(1, 2, 2)),
            ]),
            include_str!("../tests/golden/masks/edit.txt"),
        ),
        (
            "understanding",
            seq(vec![
                Block::text(vec![1, 2]),
                Block::visual(Modality::VitSemantic, rows(4, 2), Layout::new(1, 2, 2)),
                Block::text(vec![3, 4, 5]),
            ]),
            include_str!("../tests/golden/masks/understanding.txt"),
        ),
        (
            "video",
            seq(vec![
                Block::text(vec![1]),
                Block::visual(Modality::VaeClean, rows(8, 2), Layout::new(2, 2, 2)),
                Block::visual(Modality::VaeNoisy, rows(8, 2), Layout::new(2, 2, 2)),
                Block::text(vec![2]),
            ]),
            include_str!("../tests/golden/masks/video.txt"),
        ),
    ]
}

/// Mask grid written straight from the pairwise rule.
pub fn oracle_dump(seq: &MultimodalSequence) -> String {
    oracle_mask(seq.segments(), seq.len()).dump()
}

pub fn mask_golden_suite() -> Result<EvalReport, EvalError> {
    let mut r = EvalReport::new("mask_golden");
    for (name, seq, golden) in golden_layouts() {
        let built = build_mask(seq.segments(), seq.len())?;
        let stored = AttentionMask::parse_dump(golden)?;
        let wrong = built.mismatches(&stored).len();
        r.push(&format!("{name}_mismatches_absent"), f64::from(u8::from(wrong == 0)), Some(1.0));
    }
    Ok(r)
}

/// Settings for the twin MaPE runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub steps: usize,
    pub lr: f64,
    /// Held-out samples per loss estimate.
    pub eval_samples: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            steps: 150,
            lr: 1e-3,
            eval_samples: 24,
        }
    }
}

/// Mean flow loss of the model on fixed held-out draws of `tasks`.
fn held_out_flow_loss(
    model: &Model,
    enc: &ToyEncoders,
    tasks: &[TaskKind],
    seed: u64,
    n: usize,
    shift: f64,
) -> Result<f64, EvalError> {
    let weights = LossWeights::new(0.0, 1.0).expect("valid weights");
    let mut total = 0.0;
    for i in 0..n as u64 {
        let task = tasks[i as usize % tasks.len()];
        let s = task_sample_at(task, seed ^ HELD_OUT_SALT, i);
        let item = TrainItem::with_drop(&s, enc, CondDrop::Keep, shift, &mut eval_rng(seed, i))?;
        let (parts, _) = batch_loss(model, &[item], weights, false, 1)?;
        total += parts.l_gen.expect("generation samples carry a flow loss");
    }
    Ok(total / n as f64)
}

/// Twin runs with MaPE on and off from identical seeds and data; reports
/// held-out generation and editing flow losses side by side.
pub fn mape_ablation_suite(
    model: ModelConfig,
    encoders: EncoderConfig,
    train: TrainConfig,
    cfg: &AblationConfig,
) -> Result<EvalReport, EvalError> {
    let plan = StagePlan {
        lr: cfg.lr,
        warmup: 0,
        schedule: crate::schedule::LrSchedule::Constant,
        steps: cfg.steps,
        kind_steps: cfg.steps,
        kind_offset: 0,
        ..crate::schedule::toy_plan(Stage::Ct3)
    };
    let gen_tasks = [TaskKind::T2I, TaskKind::IEdit, TaskKind::S2I, TaskKind::T2V, TaskKind::I2V, TaskKind::VEdit, TaskKind::S2V];
    let edit_tasks = [TaskKind::IEdit, TaskKind::VEdit];
    let mut r = EvalReport::new("mape_ablation");
    let mut losses = Vec::new();
    for (label, enabled) in [("mape_on", true), ("mape_off", false)] {
        let mut config = model;
        config.mape.enabled = enabled;
        let mut t = Trainer::new(Model::new(config).map_err(TrainError::from)?, encoders, vec![plan], train);
        let mut last = 0.0;
        t.run(None, |_, m| {
            last = m.total;
            Ok(())
        })?;
        let l_gen = held_out_flow_loss(&t.model, &t.encoders, &gen_tasks, train.seed, cfg.eval_samples, plan.shift)?;
        let l_edit = held_out_flow_loss(&t.model, &t.encoders, &edit_tasks, train.seed, cfg.eval_samples, plan.shift)?;
        r.push(&format!("{label}_final_train_loss"), last, None);
        r.push(&format!("{label}_l_gen"), l_gen, None);
        r.push(&format!("{label}_l_edit"), l_edit, None);
        losses.push((l_gen, l_edit));
    }
    let (on, off) = (losses[0], losses[1]);
    r.push("delta_l_gen_off_minus_on", off.0 - on.0, None);
    r.push("delta_l_edit_off_minus_on", off.1 - on.1, None);
    let helps_editing_most = off.1 - on.1 > off.0 - on.0;
    r.notes.push(format!(
        "MaPE helps editing more than generation overall: {helps_editing_most} (expected direction, not asserted)"
    ));
    Ok(r)
}

//! Stage plans (optimizer constants, loss weights, timestep shift, task
//! mixtures) and the learning-rate schedule.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heads::LossWeights;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("unknown stage {0:?} (expected pt, ct1, ct2, ct3 or sft)")]
    UnknownStage(String),
    #[error("invalid plan: {0}")]
    Invalid(String),
}

/// Column of the hyperparameter table a stage belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageKind {
    Pt,
    Ct,
    Sft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pt,
    Ct1,
    Ct2,
    Ct3,
    Sft,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Pt, Stage::Ct1, Stage::Ct2, Stage::Ct3, Stage::Sft];

    pub fn kind(self) -> StageKind {
        match self {
            Stage::Pt => StageKind::Pt,
            Stage::Ct1 | Stage::Ct2 | Stage::Ct3 => StageKind::Ct,
            Stage::Sft => StageKind::Sft,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pt => "pt",
            Stage::Ct1 => "ct1",
            Stage::Ct2 => "ct2",
            Stage::Ct3 => "ct3",
            Stage::Sft => "sft",
        }
    }

    /// Stages of the same kind that run before this one.
    fn kind_index(self) -> usize {
        match self {
            Stage::Ct2 => 1,
            Stage::Ct3 => 2,
            _ => 0,
        }
    }

    fn kind_len(self) -> usize {
        if self.kind() == StageKind::Ct {
            3
        } else {
            1
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = ScheduleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.to_ascii_lowercase())
            .ok_or_else(|| ScheduleError::UnknownStage(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// Cosine schedules end at this fraction of the peak rate.
pub const COSINE_FLOOR: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-15,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    T2I,
    IEdit,
    S2I,
    T2V,
    I2V,
    VEdit,
    S2V,
    I2T,
    V2T,
    X2T,
}

impl TaskKind {
    pub const ALL: [TaskKind; 10] = [
        TaskKind::T2I,
        TaskKind::IEdit,
        TaskKind::S2I,
        TaskKind::T2V,
        TaskKind::I2V,
        TaskKind::VEdit,
        TaskKind::S2V,
        TaskKind::I2T,
        TaskKind::V2T,
        TaskKind::X2T,
    ];

    pub fn is_generation(self) -> bool {
        !matches!(self, TaskKind::I2T | TaskKind::V2T | TaskKind::X2T)
    }

    pub fn is_video(self) -> bool {
        matches!(self, TaskKind::T2V | TaskKind::I2V | TaskKind::VEdit | TaskKind::S2V | TaskKind::V2T)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::T2I => "t2i",
            TaskKind::IEdit => "i_edit",
            TaskKind::S2I => "s2i",
            TaskKind::T2V => "t2v",
            TaskKind::I2V => "i2v",
            TaskKind::VEdit => "v_edit",
            TaskKind::S2V => "s2v",
            TaskKind::I2T => "i2t",
            TaskKind::V2T => "v2t",
            TaskKind::X2T => "x2t",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown task {s:?}"))
    }
}

/// Two-level task mixture: a family first, then a task within the family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    /// Vid-Gen : Vid-Und : Img-Gen : Img-Und.
    pub global: [f64; 4],
    /// T2I : I-Edit : S2I.
    pub image_gen: [f64; 3],
    /// T2V : I2V : V-Edit : S2V.
    pub video_gen: [f64; 4],
    /// I2T : X2T.
    pub image_und: [f64; 2],
}

const GLOBAL: [f64; 4] = [64.0, 16.0, 16.0, 4.0];

impl MixtureSpec {
    pub fn for_stage(stage: Stage) -> Self {
        let (image_gen, video_gen) = match stage {
            Stage::Pt => ([100.0, 0.0, 0.0], [100.0, 0.0, 0.0, 0.0]),
            Stage::Ct1 => ([70.0, 15.0, 15.0], [60.0, 10.0, 15.0, 15.0]),
            Stage::Ct2 => ([60.0, 20.0, 20.0], [40.0, 20.0, 20.0, 20.0]),
            Stage::Ct3 => ([50.0, 25.0, 25.0], [25.0, 25.0, 25.0, 25.0]),
            Stage::Sft => ([60.0, 20.0, 20.0], [60.0, 10.0, 15.0, 15.0]),
        };
        // multi-image understanding data enters with continual training
        let image_und = if stage == Stage::Pt { [100.0, 0.0] } else { [50.0, 50.0] };
        MixtureSpec {
            global: GLOBAL,
            image_gen,
            video_gen,
            image_und,
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let lists: [(&str, &[f64]); 4] = [
            ("global", &self.global),
            ("image_gen", &self.image_gen),
            ("video_gen", &self.video_gen),
            ("image_und", &self.image_und),
        ];
        for (name, list) in lists {
            if list.iter().any(|v| !v.is_finite() || *v < 0.0) || list.iter().sum::<f64>() <= 0.0 {
                return Err(ScheduleError::Invalid(format!("{name} ratios must be non-negative with a positive sum")));
            }
        }
        Ok(())
    }

    /// Exact probability of every task.
    pub fn probabilities(&self) -> Vec<(TaskKind, f64)> {
        let norm = |v: &[f64]| -> Vec<f64> {
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect()
        };
        let g = norm(&self.global);
        let ig = norm(&self.image_gen);
        let vg = norm(&self.video_gen);
        let iu = norm(&self.image_und);
        vec![
            (TaskKind::T2I, g[2] * ig[0]),
            (TaskKind::IEdit, g[2] * ig[1]),
            (TaskKind::S2I, g[2] * ig[2]),
            (TaskKind::T2V, g[0] * vg[0]),
            (TaskKind::I2V, g[0] * vg[1]),
            (TaskKind::VEdit, g[0] * vg[2]),
            (TaskKind::S2V, g[0] * vg[3]),
            (TaskKind::I2T, g[3] * iu[0]),
            (TaskKind::V2T, g[1]),
            (TaskKind::X2T, g[3] * iu[1]),
        ]
    }
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // rounding fell off the end; take the last positive entry
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

pub fn sample_task<R: Rng + ?Sized>(spec: &MixtureSpec, rng: &mut R) -> TaskKind {
    match pick(&spec.global, rng) {
        0 => [TaskKind::T2V, TaskKind::I2V, TaskKind::VEdit, TaskKind::S2V][pick(&spec.video_gen, rng)],
        1 => TaskKind::V2T,
        2 => [TaskKind::T2I, TaskKind::IEdit, TaskKind::S2I][pick(&spec.image_gen, rng)],
        _ => [TaskKind::I2T, TaskKind::X2T][pick(&spec.image_und, rng)],
    }
}

/// Everything that varies per stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: Stage,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub warmup: usize,
    pub clip: f64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub shift: f64,
    /// Steps of this stage.
    pub steps: usize,
    /// Steps of all stages of the same kind, and how many precede this one.
    /// Warmup and cosine decay run over the whole kind.
    pub kind_steps: usize,
    pub kind_offset: usize,
    pub mixture: MixtureSpec,
}

const PAPER_STEPS: [usize; 3] = [350_000, 80_000, 15_000];
/// Toy step counts per kind: PT, CT (split over three sub-stages), SFT.
pub const TOY_STEPS: [usize; 3] = [2000, 1500, 300];
/// Learning-rate multiplier for rescaled plans. The table rates fine-tune a
/// pretrained backbone; a toy model trained from scratch for a few thousand
/// steps needs larger ones.
pub const TOY_LR_SCALE: f64 = 10.0;

fn kind_slot(kind: StageKind) -> usize {
    match kind {
        StageKind::Pt => 0,
        StageKind::Ct => 1,
        StageKind::Sft => 2,
    }
}

fn split_steps(stage: Stage, total: usize) -> (usize, usize) {
    let parts = stage.kind_len();
    let i = stage.kind_index();
    let base = total / parts;
    let extra = total % parts;
    // earlier sub-stages absorb the remainder
    let len = |j: usize| base + usize::from(j < extra);
    ((0..i).map(len).sum(), len(i))
}

/// Table values at paper scale.
pub fn stage_plan(stage: Stage) -> StagePlan {
    let kind = stage.kind();
    let (lr, schedule, warmup, weights, shift) = match kind {
        StageKind::Pt => (1.0e-4, LrSchedule::Constant, 2500, (0.25, 1.0), 1.0),
        StageKind::Ct => (1.0e-4, LrSchedule::Constant, 2500, (0.5, 1.0), 4.0),
        StageKind::Sft => (2.5e-5, LrSchedule::Cosine, 500, (0.25, 1.0), 4.0),
    };
    let kind_steps = PAPER_STEPS[kind_slot(kind)];
    let (kind_offset, steps) = split_steps(stage, kind_steps);
    StagePlan {
        stage,
        lr,
        schedule,
        warmup,
        clip: 1.0,
        adam: AdamConfig::default(),
        weights: LossWeights {
            lambda_u: weights.0,
            lambda_g: weights.1,
        },
        shift,
        steps,
        kind_steps,
        kind_offset,
        mixture: MixtureSpec::for_stage(stage),
    }
}

/// Table values with the step budget of one kind rescaled to `kind_steps`;
/// warmup keeps its share of the schedule and rates grow by `TOY_LR_SCALE`.
pub fn scaled_plan(stage: Stage, kind_steps: usize) -> StagePlan {
    let paper = stage_plan(stage);
    let (kind_offset, steps) = split_steps(stage, kind_steps);
    let warmup = (paper.warmup as f64 * kind_steps as f64 / paper.kind_steps as f64).round() as usize;
    StagePlan {
        lr: paper.lr * TOY_LR_SCALE,
        warmup,
        steps,
        kind_steps,
        kind_offset,
        ..paper
    }
}

pub fn toy_plan(stage: Stage) -> StagePlan {
    scaled_plan(stage, TOY_STEPS[kind_slot(stage.kind())])
}

impl StagePlan {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |m: &str| Err(ScheduleError::Invalid(format!("{}: {m}", self.stage)));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.warmup > self.kind_steps {
            return bad("warmup exceeds the step budget");
        }
        if self.kind_offset + self.steps > self.kind_steps {
            return bad("stage steps exceed the kind budget");
        }
        if self.clip <= 0.0 || self.shift < 1.0 {
            return bad("clip must be positive and shift at least 1");
        }
        LossWeights::new(self.weights.lambda_u, self.weights.lambda_g)
            .map_err(|e| ScheduleError::Invalid(e.to_string()))?;
        self.mixture.validate()
    }

    /// The transcribed hyperparameter rows, one `key: value` per line.
    pub fn table_rows(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "stage: {}", self.stage);
        let _ = writeln!(s, "learning_rate: {:e}", self.lr);
        let _ = writeln!(s, "lr_scheduler: {:?}", self.schedule);
        let _ = writeln!(s, "weight_decay: {:.1}", self.adam.weight_decay);
        let _ = writeln!(s, "grad_clip: {:.1}", self.clip);
        let _ = writeln!(
            s,
            "optimizer: AdamW beta1={} beta2={} eps={:e}",
            self.adam.beta1, self.adam.beta2, self.adam.eps
        );
        let _ = writeln!(s, "loss_weight_ce_mse: {} : {}", self.weights.lambda_u, self.weights.lambda_g);
        let _ = writeln!(s, "warmup_steps: {}", self.warmup);
        let _ = writeln!(s, "timestep_shift: {:.1}", self.shift);
        s
    }
}

/// Learning rate at `step` (0-based, counted within this stage).
pub fn lr_at(plan: &StagePlan, step: usize) -> f64 {
    let s = (plan.kind_offset + step) as f64;
    let w = plan.warmup as f64;
    if s < w {
        return plan.lr * s / w;
    }
    match plan.schedule {
        LrSchedule::Constant => plan.lr,
        LrSchedule::Cosine => {
            let span = (plan.kind_steps as f64 - w).max(1.0);
            let progress = ((s - w) / span).min(1.0);
            let floor = COSINE_FLOOR * plan.lr;
            floor + (plan.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

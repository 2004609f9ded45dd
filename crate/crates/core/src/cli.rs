//! Command-line front end: run configuration, training, generation,
//! evaluation and dataset export.
//!
//! Exit codes: 0 success, 1 runtime failure or failed evaluation,
//! 2 invalid configuration or usage, 3 non-finite training values,
//! 4 incompatible or unreadable checkpoint.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::{write_arrays, Model, ModelConfig};
use crate::encoders::{read_raw, write_ppm, write_raw, EncoderConfig};
use crate::eval::{
    generation_suite, mape_ablation_suite, mask_golden_suite, understanding_suite, AblationConfig, EvalError,
    EvalReport, HELD_OUT_SALT,
};
use crate::inference::{answer, generate_visual, SamplerConfig};
use crate::schedule::{scaled_plan, stage_plan, Stage, StagePlan, TaskKind, TOY_STEPS};
use crate::synth::{task_sample_at, SampleRecord, Target};
use crate::trainer::{MetricsLog, TrainConfig, TrainError, Trainer};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;
pub const EXIT_INCOMPATIBLE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("training stopped: {0}")]
    NonFinite(TrainError),
    #[error("checkpoint: {0}")]
    Incompatible(String),
    #[error("evaluation failed: suite {0}")]
    EvalFailed(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::NonFinite(_) => EXIT_NON_FINITE,
            CliError::Incompatible(_) => EXIT_INCOMPATIBLE,
            CliError::EvalFailed(_) | CliError::Runtime(_) => EXIT_FAILURE,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::NonFinite(e),
            TrainError::Incompatible(_) | TrainError::Arrays(_) | TrainError::Json(_) => {
                CliError::Incompatible(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Which hyperparameter table the stage plans come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Table values with the step budget shrunk to `toy_steps`.
    Toy,
    /// Table values verbatim.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub scale: Scale,
    pub stages: Vec<Stage>,
    /// Steps per stage kind (PT, CT, SFT) at toy scale.
    pub toy_steps: [usize; 3],
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            scale: Scale::Toy,
            stages: Stage::ALL.to_vec(),
            toy_steps: TOY_STEPS,
        }
    }
}

impl ScheduleConfig {
    pub fn plans(&self) -> Vec<StagePlan> {
        self.stages
            .iter()
            .map(|&s| match self.scale {
                Scale::Paper => stage_plan(s),
                Scale::Toy => {
                    let slot = match s.kind() {
                        crate::schedule::StageKind::Pt => 0,
                        crate::schedule::StageKind::Ct => 1,
                        crate::schedule::StageKind::Sft => 2,
                    };
                    scaled_plan(s, self.toy_steps[slot])
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out samples per judged metric.
    pub samples: usize,
    pub max_answer_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 100,
            max_answer_tokens: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out: PathBuf::from("runs/toy"),
        }
    }
}

/// Everything a run needs. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives parameter init, data order, noise and sampling.
    pub seed: u64,
    /// Steps between rolling checkpoints in `checkpoints/latest`; 0 disables.
    pub checkpoint_every: u64,
    pub model: ModelConfig,
    pub encoders: EncoderConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            checkpoint_every: 500,
            model: ModelConfig::default(),
            encoders: EncoderConfig::default(),
            train: TrainConfig::default(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies the run seed and an optional output override, then checks
    /// every section.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<&Path>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.paths.out = o.to_path_buf();
        }
        self.model.init_seed = self.seed;
        self.train.seed = self.seed;
        self.sampler.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |section: &str, e: &dyn std::fmt::Display| CliError::Config(format!("[{section}] {e}"));
        self.model.validate().map_err(|e| bad("model", &e))?;
        self.sampler.validate().map_err(|e| bad("sampler", &e))?;
        if !(self.encoders.latent_scale > 0.0 && self.encoders.latent_scale.is_finite()) {
            return Err(bad("encoders", &"latent_scale must be positive"));
        }
        if self.train.batch == 0 {
            return Err(bad("train", &"batch must be at least 1"));
        }
        if !(self.train.lr_scale > 0.0 && self.train.lr_scale.is_finite()) {
            return Err(bad("train", &"lr_scale must be positive"));
        }
        if self.schedule.stages.is_empty() {
            return Err(bad("schedule", &"stages must not be empty"));
        }
        if self.schedule.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("schedule", &"stages must be distinct and in pipeline order"));
        }
        for p in self.schedule.plans() {
            p.validate().map_err(|e| bad("schedule", &e))?;
        }
        if self.eval.samples == 0 {
            return Err(bad("eval", &"samples must be at least 1"));
        }
        if self.ablation.steps == 0 || self.ablation.eval_samples == 0 || !(self.ablation.lr > 0.0) {
            return Err(bad("ablation", &"steps, eval_samples and lr must be positive"));
        }
        if self.paths.out.as_os_str().is_empty() {
            return Err(bad("paths", &"out must not be empty"));
        }
        Ok(())
    }

    /// Short digest of the resolved configuration. Output paths are left
    /// out so that relocating a run keeps its identity.
    pub fn hash(&self) -> String {
        let identity = RunConfig {
            paths: PathsConfig::default(),
            ..self.clone()
        };
        let json = serde_json::to_string(&identity).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Parser)]
#[command(name = "lance", about = "Unified multimodal toy model: train, generate, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, overriding `paths.out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Understanding,
    Generation,
    MapeAblation,
    MaskGolden,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::Understanding => "understanding",
            Suite::Generation => "generation",
            Suite::MapeAblation => "mape_ablation",
            Suite::MaskGolden => "mask_golden",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Runs the configured stages, writing metrics and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continues from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stops once this stage has finished.
        #[arg(long)]
        stage: Option<Stage>,
    },
    /// Generates the output of one task from a checkpoint.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: TaskKind,
        /// Caption, instruction or question; the held-out sample's text when omitted.
        #[arg(long)]
        prompt: Option<String>,
        /// Visual conditions in raw format, replacing the held-out sample's.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
        /// Held-out sample providing the defaults.
        #[arg(long, default_value_t = 0)]
        index: u64,
    },
    /// Runs an evaluation suite and writes its report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        suite: Suite,
        /// Required by the understanding and generation suites.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Writes synthetic samples as JSON lines.
    Data {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: TaskKind,
        #[arg(long, default_value_t = 16)]
        count: u64,
    },
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.resolve(self.seed, self.out.as_deref())
    }
}

fn announce(cfg: &RunConfig) {
    println!("seed {} config {}", cfg.seed, cfg.hash());
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))
}

/// Dispatches a parsed command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, resume, stage } => cmd_train(&common.resolve()?, resume.as_deref(), stage),
        Command::Generate {
            common,
            checkpoint,
            task,
            prompt,
            inputs,
            index,
        } => cmd_generate(&common, &checkpoint, task, prompt, &inputs, index),
        Command::Eval {
            common,
            suite,
            checkpoint,
        } => cmd_eval(&common.resolve()?, suite, checkpoint.as_deref()),
        Command::Data { common, task, count } => cmd_data(&common.resolve()?, task, count),
    }
}

/// Model identity for compatibility checks; the init seed only matters
/// before training.
fn identity(m: &ModelConfig) -> ModelConfig {
    ModelConfig { init_seed: 0, ..*m }
}

fn load_checkpoint(dir: &Path, cfg: Option<&RunConfig>) -> Result<Trainer, CliError> {
    let t = Trainer::load(dir).map_err(|e| CliError::Incompatible(format!("{}: {e}", dir.display())))?;
    if let Some(cfg) = cfg {
        if identity(&t.model.config) != identity(&cfg.model) {
            return Err(CliError::Incompatible("model config differs from the checkpoint".into()));
        }
        if t.encoder_config != cfg.encoders {
            return Err(CliError::Incompatible("encoder config differs from the checkpoint".into()));
        }
    }
    Ok(t)
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, stop_after: Option<Stage>) -> Result<(), CliError> {
    announce(cfg);
    let out = &cfg.paths.out;
    create_dir(out)?;
    let mut trainer = match resume {
        Some(dir) => {
            let t = load_checkpoint(dir, Some(cfg))?;
            if t.config != cfg.train || t.plans != cfg.schedule.plans() {
                return Err(CliError::Incompatible("training config or stage plans differ from the checkpoint".into()));
            }
            t
        }
        None => {
            let model = Model::new(cfg.model).map_err(|e| CliError::Config(e.to_string()))?;
            Trainer::new(model, cfg.encoders, cfg.schedule.plans(), cfg.train)
        }
    };
    fs::write(out.join("config.toml"), toml::to_string(cfg).map_err(runtime)?).map_err(runtime)?;
    let mut log = MetricsLog::append(&out.join("metrics.jsonl"))?;
    let checkpoints = out.join("checkpoints");
    while let Some(plan) = trainer.current_plan() {
        if stop_after.is_some_and(|s| plan.stage > s) {
            break;
        }
        let m = trainer.step()?;
        log.write(&m)?;
        let stage_done = trainer.current_plan().is_none_or(|p| p.stage != m.stage);
        if stage_done {
            let dir = checkpoints.join(m.stage.name());
            create_dir(&dir)?;
            trainer.save(&dir)?;
            println!("stage {} done at step {}, checkpoint {}", m.stage, m.step + 1, dir.display());
        }
        if cfg.checkpoint_every > 0 && (m.step + 1) % cfg.checkpoint_every == 0 {
            let dir = checkpoints.join("latest");
            create_dir(&dir)?;
            trainer.save(&dir)?;
        }
    }
    let dir = checkpoints.join("latest");
    create_dir(&dir)?;
    trainer.save(&dir)?;
    Ok(())
}

fn cmd_generate(
    common: &Common,
    checkpoint: &Path,
    task: TaskKind,
    prompt: Option<String>,
    inputs: &[PathBuf],
    index: u64,
) -> Result<(), CliError> {
    // the configuration is only needed for the sampler and a compatibility check
    let cfg = common.resolve()?;
    announce(&cfg);
    let trainer = load_checkpoint(checkpoint, common.config.as_ref().map(|_| &cfg))?;
    let out = &cfg.paths.out;
    create_dir(out)?;
    let mut sample = task_sample_at(task, cfg.seed ^ HELD_OUT_SALT, index);
    if let Some(p) = prompt {
        sample.text = p;
    }
    if !inputs.is_empty() {
        if inputs.len() != sample.conditions.len() {
            return Err(CliError::Config(format!(
                "task {task} takes {} visual inputs, got {}",
                sample.conditions.len(),
                inputs.len()
            )));
        }
        for (slot, path) in sample.conditions.iter_mut().zip(inputs) {
            let (v, _, _) = read_raw(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if (v.frames, v.height, v.width) != (slot.frames, slot.height, slot.width) {
                return Err(CliError::Config(format!(
                    "{} is {}x{}x{}, task {task} expects {}x{}x{}",
                    path.display(),
                    v.frames,
                    v.height,
                    v.width,
                    slot.frames,
                    slot.height,
                    slot.width
                )));
            }
            *slot = v;
        }
    }
    for (i, c) in sample.conditions.iter().enumerate() {
        write_ppm(&out.join(format!("input_{i}.ppm")), c).map_err(runtime)?;
    }
    if task.is_generation() {
        let (latents, pixels) = generate_visual(&trainer.model, &trainer.encoders, &sample, &cfg.sampler).map_err(runtime)?;
        write_arrays(out, [("latents", &latents.tokens)]).map_err(runtime)?;
        write_raw(&out.join("output.raw"), &pixels, &cfg.encoders).map_err(runtime)?;
        write_ppm(&out.join("output.ppm"), &pixels).map_err(runtime)?;
        println!("{task} {:?} -> {}", sample.text, out.join("output.ppm").display());
    } else {
        let text = answer(&trainer.model, &trainer.encoders, &sample, cfg.eval.max_answer_tokens).map_err(runtime)?;
        fs::write(out.join("answer.txt"), format!("{text}\n")).map_err(runtime)?;
        println!("{task} {:?} -> {text:?}", sample.text);
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, suite: Suite, checkpoint: Option<&Path>) -> Result<(), CliError> {
    announce(cfg);
    let trained = || -> Result<Trainer, CliError> {
        let dir = checkpoint.ok_or_else(|| CliError::Config(format!("suite {} needs --checkpoint", suite.name())))?;
        load_checkpoint(dir, None)
    };
    let report: EvalReport = match suite {
        Suite::Understanding => {
            let t = trained()?;
            understanding_suite(&t.model, &t.encoders, cfg.seed, cfg.eval.samples)?
        }
        Suite::Generation => {
            let t = trained()?;
            generation_suite(&t.model, &t.encoders, cfg.seed, cfg.eval.samples, &cfg.sampler)?
        }
        Suite::MapeAblation => mape_ablation_suite(cfg.model, cfg.encoders, cfg.train, &cfg.ablation)?,
        Suite::MaskGolden => mask_golden_suite()?,
    };
    print!("{report}");
    let out = &cfg.paths.out;
    create_dir(out)?;
    let json = serde_json::to_string_pretty(&report).map_err(runtime)?;
    fs::write(out.join(format!("report_{}.json", suite.name())), json).map_err(runtime)?;
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::EvalFailed(suite.name().into()))
    }
}

fn cmd_data(cfg: &RunConfig, task: TaskKind, count: u64) -> Result<(), CliError> {
    announce(cfg);
    let out = &cfg.paths.out;
    create_dir(out)?;
    let path = out.join(format!("{task}.jsonl"));
    let mut file = std::io::BufWriter::new(fs::File::create(&path).map_err(runtime)?);
    for i in 0..count {
        let s = task_sample_at(task, cfg.seed, i);
        debug_assert!(matches!(s.target, Target::Text(_)) != task.is_generation());
        let line = serde_json::to_string(&SampleRecord::from(&s)).map_err(runtime)?;
        writeln!(file, "{line}").map_err(runtime)?;
    }
    file.flush().map_err(runtime)?;
    println!("wrote {count} samples to {}", path.display());
    Ok(())
}

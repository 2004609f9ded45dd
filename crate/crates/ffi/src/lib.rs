//! C ABI over the lance toy model.
//!
//! Every fallible call returns a `LanceStatus`. On failure the calling
//! thread's last-error text is set and stays readable through
//! `lance_last_error` until the next failure on that thread. Handles are
//! opaque and must be released with their `_free` function. Panics never
//! cross the boundary; they surface as `LANCE_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use lance_core::backbone::Model;
use lance_core::cli::{CliError, RunConfig};
use lance_core::encoders::ToyEncoders;
use lance_core::eval::HELD_OUT_SALT;
use lance_core::inference::{answer, generate_visual, SamplerConfig};
use lance_core::schedule::TaskKind;
use lance_core::synth::task_sample_at;
use lance_core::trainer::{TrainError, Trainer};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LanceStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Checkpoint = 4,
    NonFinite = 5,
    BufferTooSmall = 6,
    Finished = 7,
    Runtime = 8,
    Panic = 9,
}

/// Euler sampler settings for `lance_generate`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LanceSamplerConfig {
    pub steps: u32,
    pub cfg_scale: f64,
    pub shift: f64,
    pub seed: u64,
}

/// Pixel layout of a generated output: `frames x height x width x 3`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LanceShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

/// A trainer with its model, optimizer state and stage position.
pub struct LanceTrainer {
    inner: Trainer,
}

/// Read-only weights and encoders for inference.
pub struct LanceModel {
    model: Model,
    encoders: ToyEncoders,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: LanceStatus,
    message: String,
}

impl Failure {
    fn new(status: LanceStatus, message: impl Into<String>) -> Self {
        Failure {
            status,
            message: message.into(),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let status = match e {
            TrainError::NonFinite { .. } => LanceStatus::NonFinite,
            TrainError::Incompatible(_) | TrainError::Arrays(_) | TrainError::Json(_) => LanceStatus::Checkpoint,
            _ => LanceStatus::Runtime,
        };
        Failure::new(status, e.to_string())
    }
}

impl From<CliError> for Failure {
    fn from(e: CliError) -> Self {
        let status = match e {
            CliError::Config(_) => LanceStatus::Config,
            CliError::Incompatible(_) => LanceStatus::Checkpoint,
            CliError::NonFinite(_) => LanceStatus::NonFinite,
            _ => LanceStatus::Runtime,
        };
        Failure::new(status, e.to_string())
    }
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LanceStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LanceStatus::Ok,
        Ok(Err(fail)) => {
            set_last_error(&fail.message);
            fail.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            LanceStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(LanceStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or a valid nul-terminated string.
unsafe fn opt_str(p: *const c_char, what: &str) -> Result<Option<String>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map(|s| Some(s.to_string()))
        .map_err(|_| Failure::new(LanceStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` must be a valid nul-terminated string.
unsafe fn req_str(p: *const c_char, what: &str) -> Result<String, Failure> {
    non_null(p, what)?;
    Ok(unsafe { opt_str(p, what) }?.expect("checked non-null"))
}

fn parse_task(name: &str) -> Result<TaskKind, Failure> {
    name.parse().map_err(|e: String| Failure::new(LanceStatus::InvalidArgument, e))
}

/// Copies `text` with a trailing nul into `buf`, reporting the needed size.
///
/// # Safety
/// `buf` must hold `cap` bytes; `needed` must be null or writable.
unsafe fn write_text(text: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), Failure> {
    let n = text.len() + 1;
    if !needed.is_null() {
        unsafe { *needed = n };
    }
    if cap < n {
        return Err(Failure::new(LanceStatus::BufferTooSmall, format!("text needs {n} bytes, buffer has {cap}")));
    }
    non_null(buf, "buffer")?;
    unsafe {
        ptr::copy_nonoverlapping(text.as_ptr(), buf as *mut u8, text.len());
        *buf.add(text.len()) = 0;
    }
    Ok(())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn lance_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lance_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Default sampler settings (20 Euler steps, guidance 4, shift 4, seed 0).
#[no_mangle]
pub extern "C" fn lance_sampler_default() -> LanceSamplerConfig {
    let d = SamplerConfig::default();
    LanceSamplerConfig {
        steps: d.steps as u32,
        cfg_scale: d.cfg_scale,
        shift: d.shift,
        seed: d.seed,
    }
}

/// Validates a TOML run configuration (null means all defaults) under
/// `seed` and writes its short hash into `hash_buf`.
///
/// # Safety
/// `config_toml` must be null or a valid string; `hash_buf` must hold
/// `cap` bytes; `needed` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn lance_config_check(
    config_toml: *const c_char,
    seed: u64,
    hash_buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> LanceStatus {
    guard(|| {
        let cfg = resolve_config(unsafe { opt_str(config_toml, "config") }?, seed)?;
        unsafe { write_text(&cfg.hash(), hash_buf, cap, needed) }
    })
}

fn resolve_config(text: Option<String>, seed: u64) -> Result<RunConfig, Failure> {
    let cfg = match text {
        Some(t) => RunConfig::parse(&t)?,
        None => RunConfig::default(),
    };
    Ok(cfg.resolve(Some(seed), None)?)
}

/// Creates a fresh trainer from a TOML run configuration (null means all
/// defaults) and `seed`.
///
/// # Safety
/// `config_toml` must be null or a valid string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lance_trainer_new(
    config_toml: *const c_char,
    seed: u64,
    out: *mut *mut LanceTrainer,
) -> LanceStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg = resolve_config(unsafe { opt_str(config_toml, "config") }?, seed)?;
        let model = Model::new(cfg.model).map_err(|e| Failure::new(LanceStatus::Config, e.to_string()))?;
        let inner = Trainer::new(model, cfg.encoders, cfg.schedule.plans(), cfg.train);
        unsafe { *out = Box::into_raw(Box::new(LanceTrainer { inner })) };
        Ok(())
    })
}

/// Restores a trainer from a checkpoint directory.
///
/// # Safety
/// `dir` must be a valid string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lance_trainer_load(dir: *const c_char, out: *mut *mut LanceTrainer) -> LanceStatus {
    guard(|| {
        non_null(out, "out")?;
        let dir = PathBuf::from(unsafe { req_str(dir, "dir") }?);
        let inner = Trainer::load(&dir)?;
        unsafe { *out = Box::into_raw(Box::new(LanceTrainer { inner })) };
        Ok(())
    })
}

/// Runs one optimizer step and writes its total loss. Returns
/// `LANCE_STATUS_FINISHED` once every stage is done.
///
/// # Safety
/// `trainer` must come from this library; `loss` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn lance_trainer_step(trainer: *mut LanceTrainer, loss: *mut f64) -> LanceStatus {
    guard(|| {
        non_null(trainer, "trainer")?;
        let t = unsafe { &mut (*trainer).inner };
        if t.done() {
            return Err(Failure::new(LanceStatus::Finished, "all stages are done"));
        }
        let m = t.step()?;
        if !loss.is_null() {
            unsafe { *loss = m.total };
        }
        Ok(())
    })
}

/// Steps taken so far, or 0 for a null handle.
///
/// # Safety
/// `trainer` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn lance_trainer_global_step(trainer: *const LanceTrainer) -> u64 {
    if trainer.is_null() {
        return 0;
    }
    unsafe { (*trainer).inner.global_step }
}

/// Writes a checkpoint into `dir`, creating it when missing.
///
/// # Safety
/// `trainer` must come from this library; `dir` must be a valid string.
#[no_mangle]
pub unsafe extern "C" fn lance_trainer_save(trainer: *const LanceTrainer, dir: *const c_char) -> LanceStatus {
    guard(|| {
        non_null(trainer, "trainer")?;
        let dir = PathBuf::from(unsafe { req_str(dir, "dir") }?);
        std::fs::create_dir_all(&dir).map_err(|e| Failure::new(LanceStatus::Runtime, e.to_string()))?;
        unsafe { (*trainer).inner.save(&dir) }?;
        Ok(())
    })
}

/// # Safety
/// `trainer` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn lance_trainer_free(trainer: *mut LanceTrainer) {
    if !trainer.is_null() {
        drop(unsafe { Box::from_raw(trainer) });
    }
}

/// Snapshots the trainer's current weights as an inference model.
///
/// # Safety
/// `trainer` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lance_trainer_model(trainer: *const LanceTrainer, out: *mut *mut LanceModel) -> LanceStatus {
    guard(|| {
        non_null(trainer, "trainer")?;
        non_null(out, "out")?;
        let t = unsafe { &(*trainer).inner };
        let m = LanceModel {
            model: t.model.clone(),
            encoders: t.encoders.clone(),
        };
        unsafe { *out = Box::into_raw(Box::new(m)) };
        Ok(())
    })
}

/// Loads the weights of a checkpoint directory for inference.
///
/// # Safety
/// `dir` must be a valid string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lance_model_load(dir: *const c_char, out: *mut *mut LanceModel) -> LanceStatus {
    guard(|| {
        non_null(out, "out")?;
        let dir = PathBuf::from(unsafe { req_str(dir, "dir") }?);
        let t = Trainer::load(&dir)?;
        let m = LanceModel {
            model: t.model,
            encoders: t.encoders,
        };
        unsafe { *out = Box::into_raw(Box::new(m)) };
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn lance_model_free(model: *mut LanceModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Generates the visual output of held-out sample `index` of generation
/// task `task` (for example "t2i"), optionally with `prompt` replacing its
/// text. Pixels go to `pixels` (frame, row, column, channel order);
/// `shape` receives the layout even when the buffer is too small.
///
/// # Safety
/// `model` must come from this library; strings must be valid (`prompt`
/// may be null); `pixels` must hold `cap` values; `shape` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lance_generate(
    model: *const LanceModel,
    task: *const c_char,
    index: u64,
    prompt: *const c_char,
    sampler: LanceSamplerConfig,
    pixels: *mut f64,
    cap: usize,
    shape: *mut LanceShape,
) -> LanceStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(shape, "shape")?;
        let m = unsafe { &*model };
        let task = parse_task(&unsafe { req_str(task, "task") }?)?;
        if !task.is_generation() {
            return Err(Failure::new(LanceStatus::InvalidArgument, format!("{task} is not a generation task")));
        }
        let mut sample = task_sample_at(task, sampler.seed ^ HELD_OUT_SALT, index);
        if let Some(p) = unsafe { opt_str(prompt, "prompt") }? {
            sample.text = p;
        }
        let cfg = SamplerConfig {
            steps: sampler.steps as usize,
            cfg_scale: sampler.cfg_scale,
            shift: sampler.shift,
            seed: sampler.seed,
        };
        cfg.validate().map_err(|e| Failure::new(LanceStatus::InvalidArgument, e.to_string()))?;
        let (_, v) = generate_visual(&m.model, &m.encoders, &sample, &cfg)
            .map_err(|e| Failure::new(LanceStatus::Runtime, e.to_string()))?;
        unsafe {
            *shape = LanceShape {
                frames: v.frames,
                height: v.height,
                width: v.width,
            }
        };
        if cap < v.data.len() {
            return Err(Failure::new(
                LanceStatus::BufferTooSmall,
                format!("output needs {} values, buffer has {cap}", v.data.len()),
            ));
        }
        non_null(pixels, "pixels")?;
        unsafe { ptr::copy_nonoverlapping(v.data.as_ptr(), pixels, v.data.len()) };
        Ok(())
    })
}

/// Greedy answer to held-out sample `index` of understanding task `task`
/// (for example "i2t"), optionally with `question` replacing its text.
///
/// # Safety
/// `model` must come from this library; strings must be valid (`question`
/// may be null); `buf` must hold `cap` bytes; `needed` null or writable.
#[no_mangle]
pub unsafe extern "C" fn lance_answer(
    model: *const LanceModel,
    task: *const c_char,
    index: u64,
    seed: u64,
    question: *const c_char,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> LanceStatus {
    guard(|| {
        non_null(model, "model")?;
        let m = unsafe { &*model };
        let task = parse_task(&unsafe { req_str(task, "task") }?)?;
        if task.is_generation() {
            return Err(Failure::new(LanceStatus::InvalidArgument, format!("{task} is not an understanding task")));
        }
        let mut sample = task_sample_at(task, seed ^ HELD_OUT_SALT, index);
        if let Some(q) = unsafe { opt_str(question, "question") }? {
            sample.text = q;
        }
        let text = answer(&m.model, &m.encoders, &sample, 16).map_err(|e| Failure::new(LanceStatus::Runtime, e.to_string()))?;
        unsafe { write_text(&text, buf, cap, needed) }
    })
}

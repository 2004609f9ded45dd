//! Turns samples into model sequences with their supervision.
//!
//! Understanding samples become `[prompt | semantic tokens | rest of prompt,
//! answer]`. Generation samples become `[prompt | semantic + clean latent
//! conditions | rest of prompt][noisy target latents]`.

use crate::encoders::{EncoderError, LatentGrid, ToyEncoders, VisualArray};
use crate::heads::CondDrop;
use crate::numerics::Tensor;
use crate::schedule::TaskKind;
use crate::sequence::tokenizer::encode;
use crate::sequence::{
    build_open_sequence, build_sequence, render_prompt, Block, Layout, Modality, MultimodalSequence, SequenceError,
    TokenId, EOT,
};
use crate::synth::{Sample, Target};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrepareError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error("{0} samples have no text target")]
    NotUnderstanding(&'static str),
    #[error("{0} samples have no visual target")]
    NotGeneration(&'static str),
}

/// Next-token supervision: the hidden state at `positions[i]` predicts
/// `targets[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LmTargets {
    pub positions: Vec<usize>,
    pub targets: Vec<TokenId>,
}

/// A sequence ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub task: TaskKind,
    pub seq: MultimodalSequence,
    pub lm: Option<LmTargets>,
    /// Clean target latents `x1` for the noisy segment, whose payload is
    /// a zero placeholder until a timestep is drawn.
    pub flow_target: Option<Tensor>,
    pub noisy_layout: Option<Layout>,
    /// Leading rows every sample with the same template shares.
    pub shared_prefix: usize,
}

/// Visual condition blocks in stream order. Understanding reads semantic
/// tokens only; generation also gets clean latents of each condition.
fn condition_blocks(
    conditions: &[VisualArray],
    enc: &ToyEncoders,
    with_latents: bool,
) -> Result<Vec<Block>, PrepareError> {
    let mut blocks = Vec::new();
    for c in conditions {
        let (rows, layout) = enc.semantic_encode(c)?;
        blocks.push(Block::visual(Modality::VitSemantic, rows, layout));
        if with_latents {
            let grid = enc.model_latents(c)?;
            blocks.push(Block::visual(Modality::VaeClean, grid.tokens, grid.layout));
        }
    }
    Ok(blocks)
}

/// Rows of the first text block up to and including the user role header.
/// These depend only on the template, never on the sample.
fn template_prefix(prompt_tokens: &[TokenId]) -> usize {
    let user = encode("user\n");
    let at = prompt_tokens
        .windows(user.len())
        .position(|w| w == user.as_slice())
        .expect("templates contain a user header");
    // one BOT row comes first
    1 + at + user.len()
}

/// Prompt blocks: text before the vision slot, conditions, text after it.
fn prompt_blocks(
    sample: &Sample,
    enc: &ToyEncoders,
    with_latents: bool,
) -> Result<(Vec<Block>, Vec<TokenId>, usize), PrepareError> {
    let has_vision = !sample.conditions.is_empty();
    let rendered = render_prompt(sample.prompt, sample.media, &sample.text, has_vision);
    let shared = template_prefix(&rendered.tokens);
    let (pre, post) = rendered.split();
    let mut blocks = vec![Block::text(pre.to_vec())];
    if has_vision {
        blocks.extend(condition_blocks(&sample.conditions, enc, with_latents)?);
    }
    Ok((blocks, post.to_vec(), shared))
}

/// Understanding sample with its answer appended and supervised.
pub fn prepare_understanding(sample: &Sample, enc: &ToyEncoders) -> Result<Prepared, PrepareError> {
    let Target::Text(answer) = &sample.target else {
        return Err(PrepareError::NotUnderstanding(sample.task.name()));
    };
    let (mut blocks, mut tail, shared) = prompt_blocks(sample, enc, false)?;
    let answer_ids = encode(answer);
    tail.extend(&answer_ids);
    blocks.push(Block::text(tail));
    let seq = build_sequence(blocks)?;
    // answer tokens then the closing EOT
    let eot = seq.len() - 1;
    let first = eot - answer_ids.len();
    let positions: Vec<usize> = (first - 1..eot).collect();
    let mut targets = answer_ids;
    targets.push(EOT);
    Ok(Prepared {
        task: sample.task,
        seq,
        lm: Some(LmTargets { positions, targets }),
        flow_target: None,
        noisy_layout: None,
        shared_prefix: shared,
    })
}

/// Understanding prompt left open after the assistant header, for decoding.
pub fn understanding_prompt(sample: &Sample, enc: &ToyEncoders) -> Result<MultimodalSequence, PrepareError> {
    let (mut blocks, tail, _) = prompt_blocks(sample, enc, false)?;
    blocks.push(Block::text(tail));
    Ok(build_open_sequence(blocks)?)
}

/// Generation sample under a condition-drop decision. Dropping text
/// replaces every text block with one empty block and keeps visual
/// conditions; dropping all keeps only that empty block.
pub fn prepare_generation(sample: &Sample, enc: &ToyEncoders, drop: CondDrop) -> Result<Prepared, PrepareError> {
    let Target::Visual(target) = &sample.target else {
        return Err(PrepareError::NotGeneration(sample.task.name()));
    };
    let grid = enc.model_latents(target)?;
    let (mut blocks, shared) = match drop {
        CondDrop::Keep => {
            let (mut blocks, tail, shared) = prompt_blocks(sample, enc, true)?;
            blocks.push(Block::text(tail));
            (blocks, shared)
        }
        CondDrop::Text => {
            let mut blocks = vec![Block::text(Vec::new())];
            blocks.extend(condition_blocks(&sample.conditions, enc, true)?);
            (blocks, 0)
        }
        CondDrop::All => (vec![Block::text(Vec::new())], 0),
    };
    blocks.push(noisy_block(&grid));
    let seq = build_sequence(blocks)?;
    Ok(Prepared {
        task: sample.task,
        seq,
        lm: None,
        flow_target: Some(grid.tokens),
        noisy_layout: Some(grid.layout),
        shared_prefix: shared,
    })
}

fn noisy_block(grid: &LatentGrid) -> Block {
    let c = grid.tokens.last_dim();
    Block::visual(Modality::VaeNoisy, Tensor::zeros(&[grid.layout.volume(), c]), grid.layout)
}

/// Training form of a sample: understanding samples always keep their
/// conditions, generation samples follow `drop`.
pub fn prepare(sample: &Sample, enc: &ToyEncoders, drop: CondDrop) -> Result<Prepared, PrepareError> {
    match sample.target {
        Target::Text(_) => prepare_understanding(sample, enc),
        Target::Visual(_) => prepare_generation(sample, enc, drop),
    }
}

/// Conditional and unconditional forms of a generation sample. They differ
/// only in the text: the unconditional one keeps every visual condition.
pub fn cfg_pair(sample: &Sample, enc: &ToyEncoders) -> Result<(Prepared, Prepared), PrepareError> {
    let cond = prepare_generation(sample, enc, CondDrop::Keep)?;
    let uncond = prepare_generation(sample, enc, CondDrop::Text)?;
    Ok((cond, uncond))
}

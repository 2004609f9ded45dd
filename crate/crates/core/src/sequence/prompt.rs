//! Task system prompts in the chat template format.

use std::fmt;
use std::str::FromStr;

use super::tokenizer::{encode, TokenId, IM_END, IM_START, VISION_END, VISION_START};
use super::SequenceError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptTask {
    /// I2T / V2T captioning.
    Caption,
    /// Other I2T / V2T tasks (question answering).
    Qa,
    /// T2I / T2V.
    T2iT2v,
    /// Other X2I / X2V tasks (editing, subject-driven, I2V).
    X2iX2v,
}

impl FromStr for PromptTask {
    type Err = SequenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "caption" => Ok(Self::Caption),
            "qa" => Ok(Self::Qa),
            "t2i_t2v" => Ok(Self::T2iT2v),
            "x2i_x2v" => Ok(Self::X2iX2v),
            other => Err(SequenceError::UnknownTask(other.to_string())),
        }
    }
}

impl fmt::Display for PromptTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Caption => "caption",
            Self::Qa => "qa",
            Self::T2iT2v => "t2i_t2v",
            Self::X2iX2v => "x2i_x2v",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Media {
    Image,
    Video,
}

impl Media {
    fn noun(self) -> &'static str {
        match self {
            Media::Image => "image",
            Media::Video => "video",
        }
    }
}

/// A rendered template. When the template has a vision slot,
/// `vision_slot` is the index just after `<|vision_start|>`, where the
/// visual block belongs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub tokens: Vec<TokenId>,
    pub vision_slot: Option<usize>,
}

impl RenderedPrompt {
    /// Text before and after the visual block.
    pub fn split(&self) -> (&[TokenId], &[TokenId]) {
        match self.vision_slot {
            Some(i) => self.tokens.split_at(i),
            None => (&self.tokens[..], &[]),
        }
    }
}

fn system_text(task: PromptTask, media: Media) -> String {
    let m = media.noun();
    let video = media == Media::Video;
    match task {
        PromptTask::Caption => format!(
            "Generate a detailed and accurate description of the {m}, including all the visual details{}.",
            if video { " and key moments" } else { "" }
        ),
        PromptTask::Qa => {
            format!("View the {m} attentively and provide a suitable answer to the posed question.")
        }
        PromptTask::T2iT2v => format!(
            "Describe the {m} by detailing the color, quantity, text, shape, size, texture, spatial relationships{} of the objects and background:",
            if video { " and motion/camera movements" } else { "" }
        ),
        PromptTask::X2iX2v => format!(
            "Describe the key features of the input {m} (color, shape, size, texture, objects, background), then explain how the user\u{2019}s text instruction should alter or modify the {m}. Generate a new {m} that meets the user\u{2019}s requirements while maintaining consistency with the original input where appropriate."
        ),
    }
}

/// Renders the system/user/assistant template for `task`, ending right after
/// the assistant role header.
pub fn render_prompt(task: PromptTask, media: Media, user_text: &str, has_vision: bool) -> RenderedPrompt {
    let mut tokens = vec![IM_START];
    tokens.extend(encode("system\n"));
    tokens.extend(encode(&system_text(task, media)));
    tokens.push(IM_END);
    tokens.extend(encode("\n"));
    tokens.push(IM_START);
    tokens.extend(encode("user\n"));
    let mut vision_slot = None;
    if has_vision {
        tokens.push(VISION_START);
        vision_slot = Some(tokens.len());
        tokens.push(VISION_END);
    }
    // Captioning has no user text slot.
    if task != PromptTask::Caption {
        if has_vision {
            tokens.extend(encode(" "));
        }
        tokens.extend(encode(user_text));
    }
    tokens.push(IM_END);
    tokens.extend(encode("\n"));
    tokens.push(IM_START);
    tokens.extend(encode("assistant\n"));
    RenderedPrompt { tokens, vision_slot }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::tokenizer::decode;

    #[test]
    fn caption_template() {
        let p = render_prompt(PromptTask::Caption, Media::Image, "ignored", true);
        let text = decode(&p.tokens);
        assert!(text.starts_with("<|im_start|>system\nGenerate a detailed and accurate description"));
        assert_eq!(
            text,
            "<|im_start|>system\nGenerate a detailed and accurate description of the image, including all the visual details.<|im_end|>\n<|im_start|>user\n<|vision_start|><|vision_end|><|im_end|>\n<|im_start|>assistant\n"
        );
        let (before, after) = p.split();
        assert_eq!(*before.last().unwrap(), VISION_START);
        assert_eq!(after[0], VISION_END);
    }

    #[test]
    fn generation_template() {
        let p = render_prompt(PromptTask::T2iT2v, Media::Video, "a red square moving right", false);
        let text = decode(&p.tokens);
        assert!(text.contains("color, quantity, text, shape, size, texture, spatial relationships"));
        assert!(text.contains("and motion/camera movements of the objects"));
        assert!(text.contains("user\na red square moving right<|im_end|>"));
        assert_eq!(p.vision_slot, None);
    }

    #[test]
    fn empty_user_text_is_well_formed() {
        let p = render_prompt(PromptTask::T2iT2v, Media::Image, "", false);
        assert!(decode(&p.tokens).contains("<|im_start|>user\n<|im_end|>\n<|im_start|>assistant\n"));
        let q = render_prompt(PromptTask::Qa, Media::Image, "", true);
        assert!(decode(&q.tokens).contains("<|vision_start|><|vision_end|> <|im_end|>"));
    }

    #[test]
    fn rendering_is_byte_stable() {
        let a = render_prompt(PromptTask::X2iX2v, Media::Image, "make it blue", true);
        let b = render_prompt(PromptTask::X2iX2v, Media::Image, "make it blue", true);
        assert_eq!(a, b);
        assert!(decode(&a.tokens).contains("user\u{2019}s requirements"));
    }

    #[test]
    fn task_names() {
        for t in ["caption", "qa", "t2i_t2v", "x2i_x2v"] {
            assert_eq!(t.parse::<PromptTask>().unwrap().to_string(), t);
        }
        assert!("summarize".parse::<PromptTask>().is_err());
    }
}

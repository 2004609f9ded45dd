//! Interleaved multimodal sequences.
//!
//! A sequence is a concatenation of blocks. Text blocks are wrapped as
//! `[BOT, ids.., EOT]` and visual blocks as `[BOV, tokens.., EOV]`. The
//! segment table covers every position exactly once: delimiters are their
//! own one-token text segments, so masking and positions never need to
//! special-case them.

pub mod prompt;
pub mod tokenizer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;
pub use prompt::{render_prompt, Media, PromptTask, RenderedPrompt};
pub use tokenizer::{TokenId, BOT, BOV, EOT, EOV, VOCAB_SIZE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SequenceError {
    #[error("{modality:?} block: layout {layout:?} holds {expected} tokens, payload has {got}")]
    LayoutMismatch {
        modality: Modality,
        layout: Layout,
        expected: usize,
        got: usize,
    },
    #[error("empty {0:?} block")]
    EmptyBlock(Modality),
    #[error("{0:?} block given a payload of the wrong kind")]
    PayloadKind(Modality),
    #[error("at most one noisy target per sequence")]
    MultipleNoisy,
    #[error("unknown task kind {0:?}")]
    UnknownTask(String),
    #[error("malformed token stream at position {0}")]
    MalformedStream(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Text,
    VitSemantic,
    VaeClean,
    VaeNoisy,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Text,
        Modality::VitSemantic,
        Modality::VaeClean,
        Modality::VaeNoisy,
    ];

    /// Clean segments may serve as context for later segments.
    pub fn is_clean(self) -> bool {
        self != Modality::VaeNoisy
    }

    pub fn is_visual(self) -> bool {
        self != Modality::Text
    }
}

/// `(T, H, W)` grid extents of a visual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Layout {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Layout { t, h, w }
    }

    /// Nominal layout of a text run.
    pub fn text(len: usize) -> Self {
        Layout { t: len, h: 1, w: 1 }
    }

    pub fn volume(&self) -> usize {
        self.t * self.h * self.w
    }

    /// Grid coordinate of the `i`-th token (row-major over t, h, w).
    pub fn coord(&self, i: usize) -> (usize, usize, usize) {
        let hw = self.h * self.w;
        (i / hw, (i % hw) / self.w, i % self.w)
    }

    pub fn max_extent(&self) -> usize {
        self.t.max(self.h).max(self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentDescriptor {
    pub modality: Modality,
    pub start: usize,
    pub len: usize,
    pub layout: Layout,
    pub is_clean: bool,
    /// One-token BOT/EOT/BOV/EOV segment.
    pub delimiter: bool,
}

impl SegmentDescriptor {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..self.end()).contains(&i)
    }

    fn delimiter_at(start: usize) -> Self {
        SegmentDescriptor {
            modality: Modality::Text,
            start,
            len: 1,
            layout: Layout::text(1),
            is_clean: true,
            delimiter: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Text(Vec<TokenId>),
    /// `[T*H*W, features]` rows in grid order.
    Visual(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub modality: Modality,
    pub payload: Payload,
    pub layout: Layout,
}

impl Block {
    pub fn text(ids: Vec<TokenId>) -> Self {
        let layout = Layout::text(ids.len());
        Block {
            modality: Modality::Text,
            payload: Payload::Text(ids),
            layout,
        }
    }

    pub fn visual(modality: Modality, rows: Tensor, layout: Layout) -> Self {
        Block {
            modality,
            payload: Payload::Visual(rows),
            layout,
        }
    }
}

/// One position of the flattened stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    Token(TokenId),
    Visual { segment: usize, offset: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSequence {
    slots: Vec<Slot>,
    segments: Vec<SegmentDescriptor>,
    payloads: Vec<Option<Tensor>>,
}

impl MultimodalSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Full segment table including delimiter segments.
    pub fn segments(&self) -> &[SegmentDescriptor] {
        &self.segments
    }

    /// Segments holding block content (delimiters excluded).
    pub fn content_segments(&self) -> impl Iterator<Item = &SegmentDescriptor> {
        self.segments.iter().filter(|s| !s.delimiter)
    }

    pub fn payload(&self, segment: usize) -> Option<&Tensor> {
        self.payloads[segment].as_ref()
    }

    pub fn token_id(&self, i: usize) -> Option<TokenId> {
        match self.slots[i] {
            Slot::Token(id) => Some(id),
            Slot::Visual { .. } => None,
        }
    }

    pub fn segment_of(&self, i: usize) -> usize {
        self.segments.partition_point(|s| s.end() <= i)
    }

    /// Modality used for routing each position; delimiters count as text.
    pub fn modalities(&self) -> Vec<Modality> {
        let mut out = Vec::with_capacity(self.len());
        for s in &self.segments {
            out.extend(std::iter::repeat_n(s.modality, s.len));
        }
        out
    }

    /// Index of the noisy target segment, if any.
    pub fn noisy_segment(&self) -> Option<usize> {
        self.segments.iter().position(|s| s.modality == Modality::VaeNoisy)
    }

    /// Replaces a visual segment's payload (e.g. a new interpolant).
    pub fn set_payload(&mut self, segment: usize, rows: Tensor) -> Result<(), SequenceError> {
        let seg = self.segments[segment];
        let old = self.payloads[segment]
            .as_ref()
            .ok_or(SequenceError::PayloadKind(seg.modality))?;
        if old.shape() != rows.shape() {
            return Err(SequenceError::LayoutMismatch {
                modality: seg.modality,
                layout: seg.layout,
                expected: seg.len,
                got: rows.rows(),
            });
        }
        self.payloads[segment] = Some(rows);
        Ok(())
    }

    /// Appends one text token to the final text segment, which must be
    /// still open (used by incremental decoding).
    pub fn push_text_token(&mut self, id: TokenId) {
        let i = self.slots.len();
        self.slots.push(Slot::Token(id));
        match self.segments.last_mut() {
            Some(s) if s.modality == Modality::Text && !s.delimiter => {
                s.len += 1;
                s.layout = Layout::text(s.len);
            }
            _ => {
                self.segments.push(SegmentDescriptor {
                    modality: Modality::Text,
                    start: i,
                    len: 1,
                    layout: Layout::text(1),
                    is_clean: true,
                    delimiter: false,
                });
                self.payloads.push(None);
            }
        }
    }

    /// Stream view for [`reconstruct_segments`].
    pub fn stream(&self) -> Vec<StreamToken> {
        self.slots
            .iter()
            .map(|s| match *s {
                Slot::Token(id) => StreamToken::Id(id),
                Slot::Visual { segment, .. } => StreamToken::Visual(self.segments[segment].modality),
            })
            .collect()
    }

    /// Visual layouts in stream order.
    pub fn visual_layouts(&self) -> Vec<Layout> {
        self.content_segments()
            .filter(|s| s.modality.is_visual())
            .map(|s| s.layout)
            .collect()
    }
}

/// Assembles blocks into a sequence with delimiters and a segment table.
///
/// The last text block may be left open (no trailing EOT) with
/// [`build_open_sequence`], for decoding prompts.
pub fn build_sequence(blocks: Vec<Block>) -> Result<MultimodalSequence, SequenceError> {
    build(blocks, false)
}

/// Like [`build_sequence`] but leaves the final text block without its EOT
/// so generated tokens can be appended.
pub fn build_open_sequence(blocks: Vec<Block>) -> Result<MultimodalSequence, SequenceError> {
    build(blocks, true)
}

fn build(blocks: Vec<Block>, open_tail: bool) -> Result<MultimodalSequence, SequenceError> {
    let mut seq = MultimodalSequence {
        slots: Vec::new(),
        segments: Vec::new(),
        payloads: Vec::new(),
    };
    let mut noisy_seen = false;
    let last = blocks.len().saturating_sub(1);
    for (bi, block) in blocks.into_iter().enumerate() {
        let open = open_tail && bi == last;
        match (block.modality, block.payload) {
            (Modality::Text, Payload::Text(ids)) => {
                seq.push_delimiter(BOT);
                if !ids.is_empty() {
                    let start = seq.slots.len();
                    seq.slots.extend(ids.iter().map(|&id| Slot::Token(id)));
                    seq.segments.push(SegmentDescriptor {
                        modality: Modality::Text,
                        start,
                        len: ids.len(),
                        layout: Layout::text(ids.len()),
                        is_clean: true,
                        delimiter: false,
                    });
                    seq.payloads.push(None);
                }
                if !open {
                    seq.push_delimiter(EOT);
                }
            }
            (m, Payload::Visual(rows)) if m.is_visual() => {
                let expected = block.layout.volume();
                if rows.rows() != expected {
                    return Err(SequenceError::LayoutMismatch {
                        modality: m,
                        layout: block.layout,
                        expected,
                        got: rows.rows(),
                    });
                }
                if expected == 0 {
                    return Err(SequenceError::EmptyBlock(m));
                }
                if m == Modality::VaeNoisy {
                    if noisy_seen {
                        return Err(SequenceError::MultipleNoisy);
                    }
                    noisy_seen = true;
                }
                seq.push_delimiter(BOV);
                let start = seq.slots.len();
                let segment = seq.segments.len();
                seq.slots
                    .extend((0..expected).map(|offset| Slot::Visual { segment, offset }));
                seq.segments.push(SegmentDescriptor {
                    modality: m,
                    start,
                    len: expected,
                    layout: block.layout,
                    is_clean: m.is_clean(),
                    delimiter: false,
                });
                seq.payloads.push(Some(rows));
                seq.push_delimiter(EOV);
            }
            (m, _) => return Err(SequenceError::PayloadKind(m)),
        }
    }
    Ok(seq)
}

impl MultimodalSequence {
    fn push_delimiter(&mut self, id: TokenId) {
        let start = self.slots.len();
        self.slots.push(Slot::Token(id));
        self.segments.push(SegmentDescriptor::delimiter_at(start));
        self.payloads.push(None);
    }
}

/// Token stream element: a text id, or a visual token of some modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamToken {
    Id(TokenId),
    Visual(Modality),
}

/// Recovers the segment table from a flat stream and the visual layouts
/// in order of appearance.
pub fn reconstruct_segments(
    stream: &[StreamToken],
    layouts: &[Layout],
) -> Result<Vec<SegmentDescriptor>, SequenceError> {
    let mut segments = Vec::new();
    let mut layouts = layouts.iter();
    let mut i = 0;
    while i < stream.len() {
        match stream[i] {
            StreamToken::Id(BOT) => {
                segments.push(SegmentDescriptor::delimiter_at(i));
                let start = i + 1;
                let mut j = start;
                while j < stream.len() && !matches!(stream[j], StreamToken::Id(EOT)) {
                    match stream[j] {
                        StreamToken::Id(BOT | BOV | EOV) | StreamToken::Visual(_) => {
                            return Err(SequenceError::MalformedStream(j))
                        }
                        _ => j += 1,
                    }
                }
                if j > start {
                    segments.push(SegmentDescriptor {
                        modality: Modality::Text,
                        start,
                        len: j - start,
                        layout: Layout::text(j - start),
                        is_clean: true,
                        delimiter: false,
                    });
                }
                if j < stream.len() {
                    segments.push(SegmentDescriptor::delimiter_at(j));
                }
                i = j + 1;
            }
            StreamToken::Id(BOV) => {
                segments.push(SegmentDescriptor::delimiter_at(i));
                let start = i + 1;
                let modality = match stream.get(start) {
                    Some(StreamToken::Visual(m)) => *m,
                    _ => return Err(SequenceError::MalformedStream(start)),
                };
                let mut j = start;
                while j < stream.len() && stream[j] == StreamToken::Visual(modality) {
                    j += 1;
                }
                if stream.get(j) != Some(&StreamToken::Id(EOV)) {
                    return Err(SequenceError::MalformedStream(j));
                }
                let layout = *layouts.next().ok_or(SequenceError::MalformedStream(start))?;
                if layout.volume() != j - start {
                    return Err(SequenceError::LayoutMismatch {
                        modality,
                        layout,
                        expected: layout.volume(),
                        got: j - start,
                    });
                }
                segments.push(SegmentDescriptor {
                    modality,
                    start,
                    len: j - start,
                    layout,
                    is_clean: modality.is_clean(),
                    delimiter: false,
                });
                segments.push(SegmentDescriptor::delimiter_at(j));
                i = j + 1;
            }
            _ => return Err(SequenceError::MalformedStream(i)),
        }
    }
    Ok(segments)
}

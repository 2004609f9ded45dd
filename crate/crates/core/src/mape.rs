//! Modality-aware rotary positions.
//!
//! Text advances a scalar counter replicated over `(t, h, w)`. A visual group
//! starts at `D = max position used so far + 1` and its token at grid
//! coordinate `(t, h, w)` sits at `[D + t, D + h, D + w]`. With MaPE enabled
//! each visual group is then shifted along `t` by `i * delta_t`, where `i`
//! identifies the modality group. The counter advances on base positions, so
//! the offsets never leak into later text.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{rotate_rows, Tensor};
use crate::sequence::{Layout, Modality, MultimodalSequence};

pub const DEFAULT_DELTA_T: i64 = 1000;
pub const ROPE_BASE: f64 = 10000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapeError {
    #[error("axis split {split:?} does not cover head_dim {head_dim} (needs {} pairs)", head_dim / 2)]
    AxisSplit { split: [usize; 3], head_dim: usize },
    #[error("head_dim {0} must be even")]
    OddHeadDim(usize),
    #[error("positions for {positions} tokens, tensor has {tokens}")]
    Length { positions: usize, tokens: usize },
    #[error("delta_t must be positive, got {0}")]
    DeltaT(i64),
    #[error("more than three visual modality groups")]
    TooManyGroups,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Position3D {
    pub t: i64,
    pub h: i64,
    pub w: i64,
}

impl Position3D {
    pub fn new(t: i64, h: i64, w: i64) -> Self {
        Position3D { t, h, w }
    }

    pub fn splat(p: i64) -> Self {
        Position3D { t: p, h: p, w: p }
    }

    fn max_axis(&self) -> i64 {
        self.t.max(self.h).max(self.w)
    }
}

/// How a visual group's offset index `i` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GroupIndexing {
    /// Fixed by modality: noisy 0, semantic 1, clean 2.
    #[default]
    ByType,
    /// Order in which each modality type first appears in the sequence.
    ByOccurrence,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapeConfig {
    pub enabled: bool,
    pub delta_t: i64,
    pub indexing: GroupIndexing,
    /// Rotary channel pairs for `(t, h, w)`; sums to `head_dim / 2`.
    pub axis_split: [usize; 3],
    pub rope_base: f64,
}

impl Default for MapeConfig {
    fn default() -> Self {
        Self::for_head_dim(32)
    }
}

impl MapeConfig {
    /// Half of the pairs to `t`, a quarter each to `h` and `w`.
    pub fn for_head_dim(head_dim: usize) -> Self {
        let pairs = head_dim / 2;
        let t = pairs / 2;
        let h = (pairs - t) / 2;
        MapeConfig {
            enabled: true,
            delta_t: DEFAULT_DELTA_T,
            indexing: GroupIndexing::ByType,
            axis_split: [t, h, pairs - t - h],
            rope_base: ROPE_BASE,
        }
    }

    pub fn disabled(mut self) -> Self {
        self.enabled = false;
        self
    }

    pub fn validate(&self, head_dim: usize) -> Result<(), MapeError> {
        if head_dim % 2 != 0 {
            return Err(MapeError::OddHeadDim(head_dim));
        }
        if self.axis_split.iter().sum::<usize>() != head_dim / 2 {
            return Err(MapeError::AxisSplit {
                split: self.axis_split,
                head_dim,
            });
        }
        if self.delta_t <= 0 {
            return Err(MapeError::DeltaT(self.delta_t));
        }
        Ok(())
    }
}

/// Type-based group index; text has none.
pub fn group_index(modality: Modality) -> Option<i64> {
    match modality {
        Modality::VaeNoisy => Some(0),
        Modality::VitSemantic => Some(1),
        Modality::VaeClean => Some(2),
        Modality::Text => None,
    }
}

/// `[D + t, D + h, D + w]` for every token of `layout`, grid order.
pub fn base_positions(start: i64, layout: Layout) -> Vec<Position3D> {
    (0..layout.volume())
        .map(|i| {
            let (t, h, w) = layout.coord(i);
            Position3D::new(start + t as i64, start + h as i64, start + w as i64)
        })
        .collect()
}

/// Shifts `t` by `i * delta_t`; `h` and `w` are untouched.
pub fn mape_positions(base: &[Position3D], group: Modality, cfg: &MapeConfig) -> Vec<Position3D> {
    let offset = group_index(group).unwrap_or(0) * cfg.delta_t;
    shift_t(base, offset)
}

fn shift_t(base: &[Position3D], offset: i64) -> Vec<Position3D> {
    base.iter()
        .map(|p| Position3D::new(p.t + offset, p.h, p.w))
        .collect()
}

/// Positions for every slot of `seq`. Offsets apply only when `cfg.enabled`.
pub fn sequence_positions(seq: &MultimodalSequence, cfg: &MapeConfig) -> Result<Vec<Position3D>, MapeError> {
    let mut out = Vec::with_capacity(seq.len());
    let mut max_used: i64 = -1;
    let mut seen_groups: Vec<Modality> = Vec::new();
    for seg in seq.segments() {
        if seg.modality == Modality::Text {
            for _ in 0..seg.len {
                max_used += 1;
                out.push(Position3D::splat(max_used));
            }
            continue;
        }
        let base = base_positions(max_used + 1, seg.layout);
        max_used = base.iter().map(Position3D::max_axis).fold(max_used, i64::max);
        if !cfg.enabled {
            out.extend(base);
            continue;
        }
        let index = match cfg.indexing {
            GroupIndexing::ByType => group_index(seg.modality).unwrap_or(0),
            GroupIndexing::ByOccurrence => {
                if !seen_groups.contains(&seg.modality) {
                    seen_groups.push(seg.modality);
                }
                let i = seen_groups.iter().position(|&m| m == seg.modality).unwrap_or(0);
                if i > 2 {
                    return Err(MapeError::TooManyGroups);
                }
                i as i64
            }
        };
        out.extend(shift_t(&base, index * cfg.delta_t));
    }
    Ok(out)
}

/// Per-token cos/sin of the rotary angles, `[n, head_dim / 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryTable {
    pub head_dim: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl RotaryTable {
    pub fn new(positions: &[Position3D], head_dim: usize, cfg: &MapeConfig) -> Result<Self, MapeError> {
        cfg.validate(head_dim)?;
        let freqs = axis_frequencies(cfg);
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for p in positions {
            for &(axis, theta) in &freqs {
                let coord = [p.t, p.h, p.w][axis] as f64;
                let angle = theta * coord;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Ok(RotaryTable { head_dim, cos, sin })
    }

    pub fn tokens(&self) -> usize {
        self.cos.len() / (self.head_dim / 2)
    }

    /// Table for a subset of tokens.
    pub fn select(&self, rows: &[usize]) -> RotaryTable {
        let half = self.head_dim / 2;
        let mut cos = Vec::with_capacity(rows.len() * half);
        let mut sin = Vec::with_capacity(rows.len() * half);
        for &r in rows {
            cos.extend_from_slice(&self.cos[r * half..(r + 1) * half]);
            sin.extend_from_slice(&self.sin[r * half..(r + 1) * half]);
        }
        RotaryTable {
            head_dim: self.head_dim,
            cos,
            sin,
        }
    }
}

/// `(axis, theta_j)` for each channel pair, `theta_j = base^(-2j / dim_axis)`.
fn axis_frequencies(cfg: &MapeConfig) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for (axis, &pairs) in cfg.axis_split.iter().enumerate() {
        let dim = (2 * pairs) as f64;
        for j in 0..pairs {
            out.push((axis, cfg.rope_base.powf(-2.0 * j as f64 / dim)));
        }
    }
    out
}

/// Rotates `x` laid out as `[heads, n, head_dim]`.
pub fn rotary_apply(x: &Tensor, positions: &[Position3D], cfg: &MapeConfig) -> Result<Tensor, MapeError> {
    rotary_apply_signed(x, positions, cfg, 1.0)
}

/// Inverse rotation of [`rotary_apply`].
pub fn rotary_unapply(x: &Tensor, positions: &[Position3D], cfg: &MapeConfig) -> Result<Tensor, MapeError> {
    rotary_apply_signed(x, positions, cfg, -1.0)
}

fn rotary_apply_signed(x: &Tensor, positions: &[Position3D], cfg: &MapeConfig, sign: f64) -> Result<Tensor, MapeError> {
    let &[heads, n, head_dim] = x.shape() else {
        return Err(MapeError::Length {
            positions: positions.len(),
            tokens: x.rows(),
        });
    };
    if positions.len() != n {
        return Err(MapeError::Length {
            positions: positions.len(),
            tokens: n,
        });
    }
    let table = RotaryTable::new(positions, head_dim, cfg)?;
    let mut out = x.clone();
    for head in out.data_mut().chunks_mut(n * head_dim).take(heads) {
        rotate_rows(head, &table.cos, &table.sin, head_dim, head_dim, sign);
    }
    Ok(out)
}

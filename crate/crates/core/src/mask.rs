//! Generalized causal attention over segment tables.
//!
//! Within a segment, text is causal and visual tokens are bidirectional.
//! Across segments, a query may see an earlier segment only when that
//! segment is clean. Noisy latents are therefore invisible to everything
//! outside their own segment.

use std::fmt::Write as _;
use std::rc::Rc;

use thiserror::Error;

use crate::numerics::MASKED_LOGIT;
use crate::sequence::{Modality, SegmentDescriptor};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("segments do not cover [0, {n}): gap or overlap at {at}")]
    Coverage { n: usize, at: usize },
    #[error("bad mask dump: {0}")]
    Dump(String),
}

fn segment_index(segs: &[SegmentDescriptor], i: usize) -> usize {
    segs.partition_point(|s| s.end() <= i)
}

/// The pairwise rule; `true` when query `qi` may attend to key `kj`.
pub fn pair_allowed(qi: usize, kj: usize, segs: &[SegmentDescriptor]) -> bool {
    let sq = segment_index(segs, qi);
    let sk = segment_index(segs, kj);
    if sq == sk {
        return match segs[sq].modality {
            Modality::Text => kj <= qi,
            _ => true,
        };
    }
    segs[sk].start < segs[sq].start && segs[sk].is_clean
}

/// Dense boolean mask, row = query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

fn check_coverage(segs: &[SegmentDescriptor], n: usize) -> Result<(), MaskError> {
    let mut next = 0;
    for s in segs.iter().filter(|s| s.len > 0) {
        if s.start != next {
            return Err(MaskError::Coverage { n, at: next.min(s.start) });
        }
        next = s.end();
    }
    if next != n {
        return Err(MaskError::Coverage { n, at: next });
    }
    Ok(())
}

/// Fills the mask one segment block at a time.
pub fn build_mask(segs: &[SegmentDescriptor], n: usize) -> Result<AttentionMask, MaskError> {
    check_coverage(segs, n)?;
    let mut allowed = vec![false; n * n];
    // columns visible to any later segment
    let mut context = vec![false; n];
    for s in segs.iter().filter(|s| s.len > 0) {
        for qi in s.start..s.end() {
            let row = &mut allowed[qi * n..(qi + 1) * n];
            row[..s.start].copy_from_slice(&context[..s.start]);
            let own_end = match s.modality {
                Modality::Text => qi + 1,
                _ => s.end(),
            };
            row[s.start..own_end].iter_mut().for_each(|a| *a = true);
        }
        if s.is_clean {
            context[s.start..s.end()].iter_mut().for_each(|c| *c = true);
        }
    }
    Ok(AttentionMask { n, allowed })
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, qi: usize, kj: usize) -> bool {
        self.allowed[qi * self.n + kj]
    }

    pub fn row(&self, qi: usize) -> &[bool] {
        &self.allowed[qi * self.n..(qi + 1) * self.n]
    }

    /// Additive logit bias: 0 where allowed, [`MASKED_LOGIT`] elsewhere.
    pub fn additive_bias(&self) -> Rc<[f64]> {
        self.allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASKED_LOGIT })
            .collect()
    }

    /// Square sub-mask over the given positions, in the given order.
    pub fn select(&self, rows: &[usize]) -> AttentionMask {
        let mut allowed = Vec::with_capacity(rows.len() * rows.len());
        for &i in rows {
            for &j in rows {
                allowed.push(self.get(i, j));
            }
        }
        AttentionMask {
            n: rows.len(),
            allowed,
        }
    }

    /// One line per query; `#` attends, `.` blocked.
    pub fn dump(&self) -> String {
        let mut out = String::with_capacity(self.n * (self.n + 1));
        for i in 0..self.n {
            for &a in self.row(i) {
                out.push(if a { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_dump(text: &str) -> Result<Self, MaskError> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        let n = lines.len();
        let mut allowed = Vec::with_capacity(n * n);
        for (i, line) in lines.iter().enumerate() {
            if line.chars().count() != n {
                return Err(MaskError::Dump(format!("row {i} has {} cells, expected {n}", line.len())));
            }
            for c in line.chars() {
                allowed.push(match c {
                    '#' => true,
                    '.' => false,
                    other => return Err(MaskError::Dump(format!("unexpected {other:?} in row {i}"))),
                });
            }
        }
        Ok(AttentionMask { n, allowed })
    }

    /// Positions where two masks differ.
    pub fn mismatches(&self, other: &AttentionMask) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if self.n != other.n {
            out.push((self.n, other.n));
            return out;
        }
        for i in 0..self.n {
            for j in 0..self.n {
                if self.get(i, j) != other.get(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Per-pair reference mask built straight from [`pair_allowed`].
pub fn oracle_mask(segs: &[SegmentDescriptor], n: usize) -> AttentionMask {
    let mut allowed = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            allowed.push(pair_allowed(i, j, segs));
        }
    }
    AttentionMask { n, allowed }
}

/// Human-readable legend line for golden files: one letter per position.
pub fn legend(segs: &[SegmentDescriptor]) -> String {
    let mut s = String::new();
    for seg in segs {
        let c = if seg.delimiter {
            '|'
        } else {
            match seg.modality {
                Modality::Text => 'T',
                Modality::VitSemantic => 'S',
                Modality::VaeClean => 'C',
                Modality::VaeNoisy => 'N',
            }
        };
        for _ in 0..seg.len {
            let _ = write!(s, "{c}");
        }
    }
    s
}

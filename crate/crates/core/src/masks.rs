//! Attention visibility for the two decoders.
//!
//! Rows are queries, columns are keys. `M_low` (LF elementary decoder):
//! LR→LR, LF→{LR, LF}. `M_high` (HF detail decoder): LR→LR, LF→{LF, HF},
//! HF→{LR, HF}. LF keys are never visible to HF queries.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token stream class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Lr,
    Lf,
    /// Directional detail tokens of wavelet level `level` (1 = finest).
    Hf {
        level: usize,
    },
}

impl Segment {
    fn rank(self) -> u8 {
        match self {
            Segment::Lr => 0,
            Segment::Lf => 1,
            Segment::Hf { .. } => 2,
        }
    }
}

/// Run-length description of the segment of every token in a sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    runs: Vec<(Segment, usize)>,
}

impl SegmentLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, segment: Segment, count: usize) {
        if count == 0 {
            return;
        }
        match self.runs.last_mut() {
            Some((s, n)) if *s == segment => *n += count,
            _ => self.runs.push((segment, count)),
        }
    }

    pub fn with(mut self, segment: Segment, count: usize) -> Self {
        self.push(segment, count);
        self
    }

    pub fn runs(&self) -> &[(Segment, usize)] {
        &self.runs
    }

    pub fn len(&self) -> usize {
        self.runs.iter().map(|r| r.1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, pred: impl Fn(Segment) -> bool) -> usize {
        self.runs.iter().filter(|r| pred(r.0)).map(|r| r.1).sum()
    }

    /// Segment of every token, in order.
    pub fn tokens(&self) -> Vec<Segment> {
        self.runs.iter().flat_map(|&(s, n)| std::iter::repeat_n(s, n)).collect()
    }

    /// Concatenation of two layouts.
    pub fn concat(&self, other: &SegmentLayout) -> SegmentLayout {
        let mut out = self.clone();
        for &(s, n) in &other.runs {
            out.push(s, n);
        }
        out
    }

    fn check_order(&self, allowed: &[u8], what: &str) -> Result<()> {
        let mut last = 0u8;
        for &(s, _) in &self.runs {
            let r = s.rank();
            if !allowed.contains(&r) {
                return Err(Error::contract(format!("{what}: unexpected {s:?} segment")));
            }
            if r < last {
                return Err(Error::contract(format!(
                    "{what}: {s:?} segment out of order in {:?}",
                    self.runs
                )));
            }
            last = r;
        }
        Ok(())
    }
}

/// Boolean `n×n` visibility matrix. Cloning is cheap.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    n: usize,
    visible: Arc<[bool]>,
    layout: SegmentLayout,
}

impl AttentionMask {
    /// Builds a mask from a visibility predicate `(query, key) -> bool`.
    /// Fails if any query row sees nothing.
    pub fn from_fn(layout: SegmentLayout, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let n = layout.len();
        let mut visible = Vec::with_capacity(n * n);
        for q in 0..n {
            for k in 0..n {
                visible.push(f(q, k));
            }
        }
        let mask = Self {
            n,
            visible: visible.into(),
            layout,
        };
        if let Some(r) = (0..n).find(|&r| mask.row(r).iter().all(|&v| !v)) {
            return Err(Error::config(format!("mask row {r} has no visible key")));
        }
        Ok(mask)
    }

    fn from_rule(layout: SegmentLayout, rule: impl Fn(Segment, Segment) -> bool) -> Result<Self> {
        let segs = layout.tokens();
        Self::from_fn(layout, |q, k| rule(segs[q], segs[k]))
    }

    /// Every token sees every token.
    pub fn full(layout: SegmentLayout) -> Self {
        Self::from_fn(layout, |_, _| true).expect("full mask has no empty rows")
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.visible[query * self.n..(query + 1) * self.n]
    }

    pub fn is_visible(&self, query: usize, key: usize) -> bool {
        self.visible[query * self.n + key]
    }

    pub fn layout(&self) -> &SegmentLayout {
        &self.layout
    }

    pub fn visible_count(&self, query: usize) -> usize {
        self.row(query).iter().filter(|&&v| v).count()
    }

    /// Dense 0/1 rows, mostly for display and tests.
    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.n)
            .map(|q| self.row(q).iter().map(|&v| v as u8).collect())
            .collect()
    }
}

/// Mask of the LF elementary decoder over `[LR | LF]`.
pub fn build_m_low(layout: &SegmentLayout) -> Result<AttentionMask> {
    layout.check_order(&[0, 1], "M_low")?;
    AttentionMask::from_rule(layout.clone(), |q, k| match q {
        Segment::Lr => k == Segment::Lr,
        _ => true,
    })
}

fn high_rule(q: Segment, k: Segment, cross_level: bool) -> bool {
    match (q, k) {
        (Segment::Lr, k) => k == Segment::Lr,
        (Segment::Lf, k) => k != Segment::Lr,
        (Segment::Hf { .. }, Segment::Lf) => false,
        (Segment::Hf { level: a }, Segment::Hf { level: b }) => cross_level || a == b,
        (Segment::Hf { .. }, Segment::Lr) => true,
    }
}

/// Mask of the HF detail decoder over `[LR | LF | HF...]`.
pub fn build_m_high(layout: &SegmentLayout) -> Result<AttentionMask> {
    layout.check_order(&[0, 1, 2], "M_high")?;
    AttentionMask::from_rule(layout.clone(), |q, k| high_rule(q, k, true))
}

/// Ablation variant of [`build_m_high`] in which HF tokens only attend to HF
/// tokens of their own wavelet level.
pub fn build_m_high_within_level(layout: &SegmentLayout) -> Result<AttentionMask> {
    layout.check_order(&[0, 1, 2], "M_high")?;
    AttentionMask::from_rule(layout.clone(), |q, k| high_rule(q, k, false))
}

/// How HF tokens in the detail decoder see each other.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HfVisibility {
    /// HF tokens of all levels attend to one another.
    #[default]
    CrossLevel,
    /// HF tokens only attend within their own level.
    WithinLevel,
}

pub fn build_high_mask(layout: &SegmentLayout, mode: HfVisibility) -> Result<AttentionMask> {
    match mode {
        HfVisibility::CrossLevel => build_m_high(layout),
        HfVisibility::WithinLevel => build_m_high_within_level(layout),
    }
}

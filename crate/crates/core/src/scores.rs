//! m-statistic scores on sorted within-set outcomes.
//!
//! Each matched set is reduced to its control potential outcomes sorted in
//! ascending order, the score `q_j` attached to each sorted rank, and the rank
//! held by the set's (pseudo-)treated unit. The engines only ever see this
//! representation, so the sorted-rank symmetry the worst-case bounds rely on
//! holds by construction.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::data::ImputedControls;
use crate::error::{Error, Result};
use crate::matcher::MatchedDesign;
use crate::math::{abs, median};

/// Bounded odd score function
/// `psi(y) = sign(y) * clamp((|y| - inner) / (trim - inner), 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiSpec {
    pub inner: f64,
    pub trim: f64,
}

impl Default for PsiSpec {
    fn default() -> Self {
        Self {
            inner: 0.0,
            trim: 3.0,
        }
    }
}

impl PsiSpec {
    pub fn new(inner: f64, trim: f64) -> Result<Self> {
        if !(inner >= 0.0 && trim > inner && trim.is_finite()) {
            return Err(Error::InvalidInput("psi requires 0 <= inner < trim".into()));
        }
        Ok(Self { inner, trim })
    }

    pub fn psi(&self, y: f64) -> f64 {
        let mag = ((abs(y) - self.inner) / (self.trim - self.inner)).clamp(0.0, 1.0);
        if y < 0.0 {
            -mag
        } else {
            mag
        }
    }
}

/// How the residual scale `s` is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// One median over all within-set absolute differences of the design.
    #[default]
    Pooled,
    /// A separate median for each set.
    PerSet,
}

/// Scores of one matched set, indexed by sorted rank (0-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetScores {
    pub sorted_y0: Vec<f64>,
    pub q: Vec<f64>,
    /// Rank whose outcome is the lead unit's `y0` (lowest rank among ties).
    pub observed_rank: usize,
    /// The design flagged this set for label switching.
    pub label_switched: bool,
    /// `q` already holds the switched scores `sum(q) - q_j`.
    pub switch_applied: bool,
    pub scale: f64,
}

impl SetScores {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// The set's contribution `sum_j Z_ij Q_ij` to the statistic.
    pub fn observed_score(&self) -> f64 {
        if self.label_switched && !self.switch_applied {
            // lead unit is the sole control: every other member is treated
            self.q.iter().sum::<f64>() - self.q[self.observed_rank]
        } else {
            self.q[self.observed_rank]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub sets: Vec<SetScores>,
}

impl ScoreTable {
    /// Assemble a table from per-set scores that are already in final form.
    pub fn from_scores(scores: Vec<(Vec<f64>, usize)>) -> Result<Self> {
        let sets = scores
            .into_iter()
            .map(|(q, rank)| {
                if rank >= q.len() {
                    return Err(Error::InvalidInput("observed rank out of range".into()));
                }
                Ok(SetScores {
                    sorted_y0: Vec::new(),
                    q,
                    observed_rank: rank,
                    label_switched: false,
                    switch_applied: false,
                    scale: 1.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { sets })
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// True when every flagged set already carries switched scores.
    pub fn is_ready(&self) -> bool {
        self.sets
            .iter()
            .all(|s| !s.label_switched || s.switch_applied)
    }
}

fn within_set_differences(members: &[usize], y0: &ImputedControls, out: &mut Vec<f64>) {
    for a in 0..members.len() {
        for b in a + 1..members.len() {
            out.push(abs(y0.get(members[a]) - y0.get(members[b])));
        }
    }
}

fn scale_from_differences(diffs: &mut [f64]) -> Option<f64> {
    let med = median(diffs)?;
    if med > 0.0 {
        return Some(med);
    }
    diffs.iter().copied().filter(|d| *d > 0.0).reduce(f64::min)
}

/// Pooled scale: median of all within-set absolute pairwise differences,
/// falling back to the smallest positive difference when the median is 0.
pub fn compute_scale(design: &MatchedDesign, y0: &ImputedControls) -> Result<f64> {
    let mut diffs = Vec::new();
    for set in &design.sets {
        within_set_differences(&set.members, y0, &mut diffs);
    }
    scale_from_differences(&mut diffs).ok_or(Error::DegenerateScale)
}

fn per_set_scales(design: &MatchedDesign, y0: &ImputedControls) -> Result<Vec<f64>> {
    let mut any = false;
    let scales = design
        .sets
        .iter()
        .map(|set| {
            let mut diffs = Vec::new();
            within_set_differences(&set.members, y0, &mut diffs);
            // a set of identical outcomes scores 0 whatever the scale
            scale_from_differences(&mut diffs)
                .inspect(|_| any = true)
                .unwrap_or(1.0)
        })
        .collect();
    if any {
        Ok(scales)
    } else {
        Err(Error::DegenerateScale)
    }
}

/// Sort outcomes (stable in member order) and score every rank.
pub fn set_scores(values: &[f64], lead: usize, scale: f64, psi: &PsiSpec) -> SetScores {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let sorted_y0: Vec<f64> = order.iter().map(|&k| values[k]).collect();
    let q = (0..n)
        .map(|j| {
            let sum: f64 = (0..n)
                .filter(|&k| k != j)
                .map(|k| psi.psi((sorted_y0[j] - sorted_y0[k]) / scale))
                .sum();
            sum / n as f64
        })
        .collect();
    let observed_rank = sorted_y0
        .iter()
        .position(|&v| v == values[lead])
        .expect("lead value is present");
    SetScores {
        sorted_y0,
        q,
        observed_rank,
        label_switched: false,
        switch_applied: false,
        scale,
    }
}

/// Per-set m-statistic scores. Sets flagged for label switching keep their
/// raw scores here; see [`apply_label_switch`].
pub fn m_scores(
    design: &MatchedDesign,
    y0: &ImputedControls,
    psi: &PsiSpec,
    mode: ScaleMode,
) -> Result<ScoreTable> {
    if design.is_empty() {
        return Err(Error::EmptyDesign);
    }
    let scales = match mode {
        ScaleMode::Pooled => vec![compute_scale(design, y0)?; design.len()],
        ScaleMode::PerSet => per_set_scales(design, y0)?,
    };
    let sets = design
        .sets
        .iter()
        .zip(scales)
        .map(|(set, s)| {
            let values: Vec<f64> = set.members.iter().map(|&m| y0.get(m)).collect();
            let mut scores = set_scores(&values, 0, s, psi);
            scores.label_switched = set.label_switched;
            scores
        })
        .collect();
    Ok(ScoreTable { sets })
}

/// Replace the scores of flagged sets by `sum_k q_k - q_j`, so that the
/// set's unique control plays the treated role.
pub fn apply_label_switch(table: &ScoreTable) -> ScoreTable {
    let mut out = table.clone();
    for set in out
        .sets
        .iter_mut()
        .filter(|s| s.label_switched && !s.switch_applied)
    {
        let total: f64 = set.q.iter().sum();
        set.q.iter_mut().for_each(|q| *q = total - *q);
        set.switch_applied = true;
    }
    out
}

/// Scores ready for the engines: m-statistic plus label switching.
pub fn score_design(
    design: &MatchedDesign,
    y0: &ImputedControls,
    psi: &PsiSpec,
    mode: ScaleMode,
) -> Result<ScoreTable> {
    Ok(apply_label_switch(&m_scores(design, y0, psi, mode)?))
}

/// `T = sum_i sum_j Z_ij Q_ij`.
pub fn observed_statistic(table: &ScoreTable) -> f64 {
    table.sets.iter().map(SetScores::observed_score).sum()
}

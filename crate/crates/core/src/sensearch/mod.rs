//! Worst-case p-values under bounded biases.
//!
//! For one set with scores `q` and rank weights `w`, the admissible laws of
//! the treated rank are `p_j ∝ w_j f_j` with every `f_j ∈ [1, Λ]`. Uniform
//! sensitivity analysis is the special case `w = 1, Λ = Γ`. The extreme
//! laws tilt a top block of the ascending scores by `Λ`; the split `l` puts
//! ranks `1..=l` at weight 1 and the rest at weight `Λ`.
//!
//! Three aggregations are offered. `Gaussian` uses the largest per-set mean
//! and, among the splits attaining it, the largest variance. `Exact` returns
//! the supremum of the upper tail over every combination of per-set splits,
//! computed by exact convolution. `MonteCarlo` samples the mean-maximizing
//! law.

pub mod exact;
pub mod pipeline;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::{PairQuality, SetWeights};
use crate::error::{Error, Result};
use crate::math::{abs, ceil, exp, normal_sf, sqrt};
use crate::rng::SeedSpec;
use crate::scores::{observed_statistic, ScoreTable};

pub use exact::{MAX_COMBINATIONS, MAX_SUPPORT};

/// Largest number of sets for which the quantile bound enumerates subsets.
pub const QUANTILE_ENUMERATION_MAX_SETS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    Upper,
    Lower,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Gaussian,
    Exact,
    MonteCarlo { draws: u64, seed: SeedSpec },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BiasMode {
    /// Every `Γ_i <= gamma`.
    Uniform { gamma: f64 },
    /// Every confounding factor beyond the estimated rank weights is `<= lambda`.
    Adaptive { lambda: f64 },
    /// A fraction `level` of the sets has `Γ_i <= lambda`; the rest are free.
    Quantile { level: f64, lambda: f64 },
}

impl BiasMode {
    pub fn bound(&self) -> f64 {
        match *self {
            Self::Uniform { gamma } => gamma,
            Self::Adaptive { lambda } | Self::Quantile { lambda, .. } => lambda,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Uniform { .. } => "uniform",
            Self::Adaptive { .. } => "adaptive",
            Self::Quantile { .. } => "quantile",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySpec {
    pub mode: BiasMode,
    pub alternative: Alternative,
    pub method: Method,
}

impl SensitivitySpec {
    pub fn new(mode: BiasMode, alternative: Alternative, method: Method) -> Result<Self> {
        let spec = Self {
            mode,
            alternative,
            method,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_bound(self.mode.bound())?;
        if let BiasMode::Quantile { level, .. } = self.mode {
            if !(level > 0.0 && level <= 1.0) {
                return Err(Error::InvalidSpec(format!(
                    "quantile level {level} outside (0, 1]"
                )));
            }
        }
        if let Method::MonteCarlo { draws, .. } = self.method {
            if draws == 0 {
                return Err(Error::InvalidSpec(
                    "monte carlo needs at least one draw".into(),
                ));
            }
        }
        Ok(())
    }
}

fn check_bound(b: f64) -> Result<()> {
    if !(b >= 1.0 && b.is_finite()) {
        return Err(Error::InvalidSpec(format!(
            "bias bound must be a finite number >= 1, got {b}"
        )));
    }
    Ok(())
}

/// Worst-case summary of one set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetBound {
    pub mu: f64,
    pub nu: f64,
    /// 1-based split `l*` in ascending score order.
    pub split: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Upper,
    Lower,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Self::Upper => 1.0,
            Self::Lower => -1.0,
        }
    }
}

/// One one-sided test. In the lower direction scores and statistic are
/// negated, so `statistic`, `mean` and the set bounds refer to `-q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideReport {
    pub direction: Direction,
    pub statistic: f64,
    pub mean: f64,
    pub variance: f64,
    pub p_value: f64,
    pub sets: Vec<SetBound>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub label_switched_sets: usize,
    pub floored_sets: usize,
    /// Sets left unbounded by the quantile bound (upper side first).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub unbounded_sets: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub monte_carlo_standard_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseReport {
    pub mode: String,
    pub bias_bound: f64,
    pub alternative: Alternative,
    pub method: Method,
    /// Observed statistic `T` in the original orientation.
    pub statistic: f64,
    pub sides: Vec<SideReport>,
    /// One-sided p-value, or `min(1, 2 min(p_upper, p_lower))` when two-sided.
    pub p_value: f64,
    pub diagnostics: Diagnostics,
}

impl WorstCaseReport {
    pub fn side(&self, direction: Direction) -> Option<&SideReport> {
        self.sides.iter().find(|s| s.direction == direction)
    }
}

/// Scores sorted ascending with their weights, rescaled so the largest
/// weight is exactly 1. Rescaling leaves every tilted law unchanged and
/// makes any constant weight vector identical to unit weights.
#[derive(Debug, Clone)]
struct Prepared {
    q: Vec<f64>,
    w: Vec<f64>,
}

impl Prepared {
    fn new(q: &[f64], w: &[f64], sign: f64) -> Self {
        let mut order: Vec<usize> = (0..q.len()).collect();
        order.sort_by(|&a, &b| (sign * q[a]).total_cmp(&(sign * q[b])));
        let top = w.iter().copied().fold(0.0f64, f64::max);
        Self {
            q: order.iter().map(|&j| sign * q[j]).collect(),
            w: order.iter().map(|&j| w[j] / top).collect(),
        }
    }

    fn len(&self) -> usize {
        self.q.len()
    }

    /// Law with ranks `0..l` at weight 1 and `l..n` at weight `lambda`.
    fn split_law(&self, lambda: f64, l: usize) -> Vec<f64> {
        let raw: Vec<f64> = self
            .w
            .iter()
            .enumerate()
            .map(|(j, w)| if j < l { *w } else { w * lambda })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|r| r / total).collect()
    }

    fn max_abs(&self) -> f64 {
        self.q.iter().fold(0.0f64, |m, v| m.max(abs(*v)))
    }
}

/// Mean and variance of a law on ascending `q`, centred at `q[0]` so that a
/// constant score vector gives exactly its value and zero variance.
fn moments(q: &[f64], p: &[f64]) -> (f64, f64) {
    let base = q[0];
    let mu = base + q.iter().zip(p).map(|(v, w)| w * (v - base)).sum::<f64>();
    let nu = q
        .iter()
        .zip(p)
        .map(|(v, w)| w * (v - mu) * (v - mu))
        .sum::<f64>();
    (mu, nu)
}

fn bound_prepared(set: &Prepared, lambda: f64) -> SetBound {
    let n = set.len();
    let stats: Vec<(f64, f64)> = (1..=n)
        .map(|l| moments(&set.q, &set.split_law(lambda, l)))
        .collect();
    let mu = stats.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * (1.0 + set.max_abs());
    let mut best = SetBound {
        mu,
        nu: -1.0,
        split: 0,
    };
    for (k, &(m, v)) in stats.iter().enumerate() {
        if m >= mu - tol && v > best.nu {
            best.nu = v;
            best.split = k + 1;
        }
    }
    best.nu = best.nu.max(0.0);
    best
}

/// Largest mean over the admissible laws of one set and, among the splits
/// attaining it, the largest variance. `q` need not be sorted; `weights` are
/// aligned with `q`.
pub fn worst_case_set_bound(q: &[f64], weights: &[f64], lambda: f64) -> SetBound {
    assert_eq!(q.len(), weights.len(), "scores and weights must align");
    bound_prepared(&Prepared::new(q, weights, 1.0), lambda)
}

/// `P(N(M, V) >= T)`; a degenerate aggregate gives 1 if `T <= M`, else 0.
pub fn gaussian_tail(t: f64, mean: f64, variance: f64) -> f64 {
    if variance > 0.0 {
        normal_sf((t - mean) / sqrt(variance))
    } else if t <= mean {
        1.0
    } else {
        0.0
    }
}

fn tail_scale(sets: &[Prepared]) -> f64 {
    sets.iter().map(Prepared::max_abs).sum()
}

fn check_table(table: &ScoreTable) -> Result<()> {
    if table.is_empty() {
        return Err(Error::EmptyDesign);
    }
    if !table.is_ready() {
        return Err(Error::InvalidInput(
            "label switching must be applied before analysis".into(),
        ));
    }
    if table.sets.iter().any(|s| s.len() < 2) {
        return Err(Error::InvalidDesign(
            "every set needs at least two units".into(),
        ));
    }
    Ok(())
}

fn check_weights(table: &ScoreTable, weights: &[Vec<f64>]) -> Result<()> {
    if weights.len() != table.len() {
        return Err(Error::InvalidInput(format!(
            "{} weight vectors for {} sets",
            weights.len(),
            table.len()
        )));
    }
    for (i, (w, s)) in weights.iter().zip(&table.sets).enumerate() {
        if w.len() != s.len() {
            return Err(Error::InvalidInput(format!(
                "set {i} has {} units but {} weights",
                s.len(),
                w.len()
            )));
        }
        if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "set {i} has a non-positive weight"
            )));
        }
    }
    Ok(())
}

fn prepare_all(table: &ScoreTable, weights: &[Vec<f64>], sign: f64) -> Vec<Prepared> {
    table
        .sets
        .iter()
        .zip(weights)
        .map(|(s, w)| Prepared::new(&s.q, w, sign))
        .collect()
}

fn exact_supremum(sets: &[Prepared], lambda: f64, t: f64) -> Result<f64> {
    let radix: Vec<usize> = sets
        .iter()
        .map(|s| s.len().saturating_sub(1).max(1))
        .collect();
    let mut combos: usize = 1;
    for r in &radix {
        combos = combos
            .checked_mul(*r)
            .filter(|c| *c <= MAX_COMBINATIONS)
            .ok_or_else(|| {
                Error::EnumerationTooLarge(format!(
                    "more than {MAX_COMBINATIONS} split combinations"
                ))
            })?;
    }
    let scale = tail_scale(sets);
    let mut digits = vec![0usize; sets.len()];
    let mut best = 0.0f64;
    for _ in 0..combos {
        let laws: Vec<(Vec<f64>, Vec<f64>)> = sets
            .iter()
            .zip(&digits)
            .map(|(s, &d)| (s.q.clone(), s.split_law(lambda, d + 1)))
            .collect();
        best = best.max(exact::sum_tail(&laws, t, scale)?);
        for (d, r) in digits.iter_mut().zip(&radix) {
            *d += 1;
            if *d < *r {
                break;
            }
            *d = 0;
        }
    }
    Ok(best)
}

fn monte_carlo(
    sets: &[Prepared],
    bounds: &[SetBound],
    lambda: f64,
    t: f64,
    draws: u64,
    seed: SeedSpec,
) -> (f64, f64) {
    let cdfs: Vec<Vec<f64>> = sets
        .iter()
        .zip(bounds)
        .map(|(s, b)| {
            let mut acc = 0.0;
            s.split_law(lambda, b.split)
                .iter()
                .map(|p| {
                    acc += p;
                    acc
                })
                .collect()
        })
        .collect();
    let cut = t - 1e-10 * (1.0 + tail_scale(sets));
    let mut rng = seed.rng();
    let mut hits = 0u64;
    for _ in 0..draws {
        let mut total = 0.0;
        for (s, cdf) in sets.iter().zip(&cdfs) {
            let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
            let j = cdf.partition_point(|c| *c <= u).min(s.len() - 1);
            total += s.q[j];
        }
        if total >= cut {
            hits += 1;
        }
    }
    let p = hits as f64 / draws as f64;
    (p, sqrt(p * (1.0 - p) / draws as f64))
}

fn one_side(
    table: &ScoreTable,
    weights: &[Vec<f64>],
    lambda: f64,
    direction: Direction,
    method: Method,
    diagnostics: &mut Diagnostics,
) -> Result<SideReport> {
    let sign = direction.sign();
    let sets = prepare_all(table, weights, sign);
    let bounds: Vec<SetBound> = sets.iter().map(|s| bound_prepared(s, lambda)).collect();
    let statistic = sign * observed_statistic(table);
    let mean: f64 = bounds.iter().map(|b| b.mu).sum();
    let variance: f64 = bounds.iter().map(|b| b.nu).sum();
    let p_value = match method {
        Method::Gaussian => gaussian_tail(statistic, mean, variance),
        Method::Exact => exact_supremum(&sets, lambda, statistic)?,
        Method::MonteCarlo { draws, seed } => {
            let (p, se) = monte_carlo(&sets, &bounds, lambda, statistic, draws, seed);
            let worst = diagnostics
                .monte_carlo_standard_error
                .unwrap_or(0.0)
                .max(se);
            diagnostics.monte_carlo_standard_error = Some(worst);
            p
        }
    };
    Ok(SideReport {
        direction,
        statistic,
        mean,
        variance,
        p_value,
        sets: bounds,
    })
}

fn directions(alternative: Alternative) -> &'static [Direction] {
    match alternative {
        Alternative::Upper => &[Direction::Upper],
        Alternative::Lower => &[Direction::Lower],
        Alternative::TwoSided => &[Direction::Upper, Direction::Lower],
    }
}

fn combine(sides: &[SideReport], alternative: Alternative) -> f64 {
    match alternative {
        Alternative::TwoSided => (2.0 * sides[0].p_value.min(sides[1].p_value)).min(1.0),
        _ => sides[0].p_value,
    }
}

fn base_diagnostics(table: &ScoreTable) -> Diagnostics {
    Diagnostics {
        label_switched_sets: table.sets.iter().filter(|s| s.label_switched).count(),
        ..Diagnostics::default()
    }
}

fn weighted_engine(
    table: &ScoreTable,
    weights: &[Vec<f64>],
    lambda: f64,
    mode: BiasMode,
    alternative: Alternative,
    method: Method,
    floored_sets: usize,
) -> Result<WorstCaseReport> {
    check_table(table)?;
    check_bound(lambda)?;
    check_weights(table, weights)?;
    let mut diagnostics = base_diagnostics(table);
    diagnostics.floored_sets = floored_sets;
    let sides = directions(alternative)
        .iter()
        .map(|&d| one_side(table, weights, lambda, d, method, &mut diagnostics))
        .collect::<Result<Vec<_>>>()?;
    Ok(WorstCaseReport {
        mode: mode.name().into(),
        bias_bound: lambda,
        alternative,
        method,
        statistic: observed_statistic(table),
        p_value: combine(&sides, alternative),
        sides,
        diagnostics,
    })
}

fn unit_weights(table: &ScoreTable) -> Vec<Vec<f64>> {
    table.sets.iter().map(|s| vec![1.0; s.len()]).collect()
}

/// Uniform sensitivity analysis: every `Γ_i <= gamma`.
pub fn uniform_pvalue(
    table: &ScoreTable,
    gamma: f64,
    alternative: Alternative,
    method: Method,
) -> Result<WorstCaseReport> {
    weighted_engine(
        table,
        &unit_weights(table),
        gamma,
        BiasMode::Uniform { gamma },
        alternative,
        method,
        0,
    )
}

/// Pair weights `(1, R_m)`, scaled so the larger is 1.
fn pair_weights(quality: &PairQuality) -> Vec<Vec<f64>> {
    quality
        .log_r_m
        .iter()
        .map(|&lr| {
            if lr <= 0.0 {
                vec![1.0, exp(lr)]
            } else {
                vec![exp(-lr), 1.0]
            }
        })
        .collect()
}

/// Adaptive analysis of a pair design: rank 2 has base odds `R_m` and the
/// remaining confounding is bounded by `lambda`.
pub fn adaptive_pair_pvalue(
    table: &ScoreTable,
    quality: &PairQuality,
    lambda: f64,
    alternative: Alternative,
    method: Method,
) -> Result<WorstCaseReport> {
    if table.sets.iter().any(|s| s.len() != 2) {
        return Err(Error::InvalidDesign(
            "adaptive pair analysis needs a pair design".into(),
        ));
    }
    if quality.log_r_m.len() != table.len() {
        return Err(Error::InvalidInput(
            "pair quality does not match the design".into(),
        ));
    }
    weighted_engine(
        table,
        &pair_weights(quality),
        lambda,
        BiasMode::Adaptive { lambda },
        alternative,
        method,
        quality.floored.iter().filter(|f| **f).count(),
    )
}

/// Adaptive analysis with estimated rank weights for general sets.
pub fn adaptive_set_pvalue(
    table: &ScoreTable,
    weights: &SetWeights,
    lambda: f64,
    alternative: Alternative,
    method: Method,
) -> Result<WorstCaseReport> {
    weighted_engine(
        table,
        &weights.weights,
        lambda,
        BiasMode::Adaptive { lambda },
        alternative,
        method,
        weights.floored.iter().filter(|f| **f).count(),
    )
}

/// Number of sets left unbounded at quantile level `level`.
pub fn unbounded_count(sets: usize, level: f64) -> usize {
    let k = ceil((1.0 - level) * sets as f64 - 1e-9);
    (k.max(0.0) as usize).min(sets)
}

fn quantile_side(
    table: &ScoreTable,
    level: f64,
    lambda: f64,
    direction: Direction,
) -> (SideReport, Vec<usize>) {
    let sign = direction.sign();
    let sets = prepare_all(table, &unit_weights(table), sign);
    let bounds: Vec<SetBound> = sets.iter().map(|s| bound_prepared(s, lambda)).collect();
    let tops: Vec<f64> = sets.iter().map(|s| s.q[s.len() - 1]).collect();
    let statistic = sign * observed_statistic(table);
    let n = sets.len();
    let k = unbounded_count(n, level);

    let evaluate = |chosen: &[usize]| {
        let mut free = vec![false; n];
        chosen.iter().for_each(|&i| free[i] = true);
        let mut mean = 0.0;
        let mut variance = 0.0;
        for i in 0..n {
            if free[i] {
                mean += tops[i];
            } else {
                mean += bounds[i].mu;
                variance += bounds[i].nu;
            }
        }
        (mean, variance)
    };

    let (mean, variance, chosen) = if k == n {
        let chosen: Vec<usize> = (0..n).collect();
        let (m, _) = evaluate(&chosen);
        (m, 0.0, chosen)
    } else if n <= QUANTILE_ENUMERATION_MAX_SETS {
        // every size-k subset with its own mean and variance
        let mut best: Option<(f64, f64, f64, Vec<usize>)> = None;
        let mut subset: Vec<usize> = (0..k).collect();
        loop {
            let (m, v) = evaluate(&subset);
            let p = gaussian_tail(statistic, m, v);
            if best.as_ref().is_none_or(|b| p > b.0) {
                best = Some((p, m, v, subset.clone()));
            }
            // next combination in lexicographic order
            let mut i = k;
            let advanced = loop {
                if i == 0 {
                    break false;
                }
                i -= 1;
                if subset[i] < n - k + i {
                    subset[i] += 1;
                    for j in i + 1..k {
                        subset[j] = subset[j - 1] + 1;
                    }
                    break true;
                }
            };
            if !advanced {
                break;
            }
        }
        let (_, m, v, s) = best.expect("at least one subset");
        (m, v, s)
    } else {
        // greedy mean, variance over-bounded by the I - k largest variances
        let mut by_gap: Vec<usize> = (0..n).collect();
        by_gap.sort_by(|&a, &b| {
            (tops[b] - bounds[b].mu)
                .total_cmp(&(tops[a] - bounds[a].mu))
                .then(a.cmp(&b))
        });
        let chosen: Vec<usize> = by_gap[..k].to_vec();
        let (m, _) = evaluate(&chosen);
        let mut nus: Vec<f64> = bounds.iter().map(|b| b.nu).collect();
        nus.sort_by(|a, b| b.total_cmp(a));
        let v: f64 = nus[..n - k].iter().sum();
        (m, v, chosen)
    };
    let mut chosen = chosen;
    chosen.sort_unstable();
    (
        SideReport {
            direction,
            statistic,
            mean,
            variance,
            p_value: gaussian_tail(statistic, mean, variance),
            sets: bounds,
        },
        chosen,
    )
}

/// Sensitivity analysis when only a fraction `level` of the biases is
/// bounded by `lambda`. With `k = ceil((1 - level) I)` sets left free, the
/// free sets sit at their largest score. Up to twenty sets every choice of
/// free sets is tried; beyond that the mean is maximized greedily and the
/// variance over-bounded by the `I - k` largest set variances.
pub fn quantile_bound_pvalue(
    table: &ScoreTable,
    level: f64,
    lambda: f64,
    alternative: Alternative,
) -> Result<WorstCaseReport> {
    SensitivitySpec::new(
        BiasMode::Quantile { level, lambda },
        alternative,
        Method::Gaussian,
    )?;
    check_table(table)?;
    if unbounded_count(table.len(), level) == 0 {
        let mut report = uniform_pvalue(table, lambda, alternative, Method::Gaussian)?;
        report.mode = "quantile".into();
        return Ok(report);
    }
    let mut diagnostics = base_diagnostics(table);
    let mut sides = Vec::new();
    for &d in directions(alternative) {
        let (side, chosen) = quantile_side(table, level, lambda, d);
        diagnostics.unbounded_sets.extend(chosen);
        sides.push(side);
    }
    Ok(WorstCaseReport {
        mode: "quantile".into(),
        bias_bound: lambda,
        alternative,
        method: Method::Gaussian,
        statistic: observed_statistic(table),
        p_value: combine(&sides, alternative),
        sides,
        diagnostics,
    })
}

/// Dispatch on the bias mode. Adaptive mode needs rank weights.
pub fn sensitivity_pvalue(
    table: &ScoreTable,
    spec: &SensitivitySpec,
    weights: Option<&SetWeights>,
) -> Result<WorstCaseReport> {
    spec.validate()?;
    match spec.mode {
        BiasMode::Uniform { gamma } => uniform_pvalue(table, gamma, spec.alternative, spec.method),
        BiasMode::Adaptive { lambda } => {
            let w = weights
                .ok_or_else(|| Error::InvalidSpec("adaptive mode requires rank weights".into()))?;
            adaptive_set_pvalue(table, w, lambda, spec.alternative, spec.method)
        }
        BiasMode::Quantile { level, lambda } => {
            if unbounded_count(table.len(), level) == 0 {
                let mut report = uniform_pvalue(table, lambda, spec.alternative, spec.method)?;
                report.mode = "quantile".into();
                return Ok(report);
            }
            if spec.method != Method::Gaussian {
                return Err(Error::InvalidSpec(
                    "the quantile bound uses the gaussian method".into(),
                ));
            }
            quantile_bound_pvalue(table, level, lambda, spec.alternative)
        }
    }
}

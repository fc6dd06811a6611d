//! Brute-force references for tests and diagnostics.
//!
//! Nothing in the analysis path calls into this module. Set laws are found
//! by enumerating every within-set permutation, pair decompositions are
//! evaluated along two algebraically different routes, and the dominance
//! probe samples members of the bias families and checks them against the
//! exact engine.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::{ConditionalDensity, LinearGaussian, SetWeights};
use crate::error::{Error, Result};
use crate::math::{abs, exp, ln, ln_1p, log_sum_exp};
use crate::rng::SeedSpec;
use crate::scores::{observed_statistic, ScoreTable};
use crate::sensearch::{
    adaptive_set_pvalue, exact, uniform_pvalue, worst_case_set_bound, Alternative, Method,
};

/// Largest set handled by permutation enumeration.
pub const MAX_ENUMERATED_SET: usize = 8;

/// Joint law of `(X, Z, Y(0))` through `p(y | x)` and `pi_1(x, y)`.
pub trait TrueModel {
    fn log_density(&self, y: f64, x: &[f64]) -> f64;

    /// `log pi_z(x, y)`.
    fn log_propensity(&self, x: &[f64], y: f64, treated: bool) -> f64;

    /// Interval holding essentially all conditional mass of `y` given `x`.
    fn outcome_support(&self, x: &[f64]) -> (f64, f64);

    fn propensity(&self, x: &[f64], y: f64) -> f64 {
        exp(self.log_propensity(x, y, true))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Propensity {
    /// `pi_1 = intercept + coef . x`, free of the outcome.
    Linear { intercept: f64, coef: Vec<f64> },
    /// `logit pi_1 = intercept + coef . x + outcome_coef * y`.
    Logit {
        intercept: f64,
        coef: Vec<f64>,
        outcome_coef: f64,
    },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + ln_1p(exp(-abs(t)))
}

impl Propensity {
    pub fn log_prob(&self, x: &[f64], y: f64, treated: bool) -> f64 {
        match self {
            Self::Linear { intercept, coef } => {
                let p = intercept + dot(coef, x);
                if treated {
                    ln(p)
                } else {
                    ln_1p(-p)
                }
            }
            Self::Logit {
                intercept,
                coef,
                outcome_coef,
            } => {
                let eta = intercept + dot(coef, x) + outcome_coef * y;
                if treated {
                    -softplus(-eta)
                } else {
                    -softplus(eta)
                }
            }
        }
    }

    /// True when treatment is independent of the outcome given covariates.
    pub fn ignorable(&self) -> bool {
        match self {
            Self::Linear { .. } => true,
            Self::Logit { outcome_coef, .. } => *outcome_coef == 0.0,
        }
    }
}

/// Gaussian outcome model with a parametric propensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianTruth {
    pub density: LinearGaussian,
    pub propensity: Propensity,
}

impl TrueModel for GaussianTruth {
    fn log_density(&self, y: f64, x: &[f64]) -> f64 {
        self.density.log_density(y, x)
    }

    fn log_propensity(&self, x: &[f64], y: f64, treated: bool) -> f64 {
        self.propensity.log_prob(x, y, treated)
    }

    fn outcome_support(&self, x: &[f64]) -> (f64, f64) {
        let m = self.density.mean(x);
        (m - 12.0 * self.density.sd, m + 12.0 * self.density.sd)
    }
}

/// All permutations of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut out = vec![perm.clone()];
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            out.push(perm.clone());
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// Everything the enumeration yields for one set. Laws are marginals of the
/// lead unit's rank, in logs and aligned with ascending `y0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetLaw {
    /// `log P(Y_1 = Y_(j) | F_set)`.
    pub log_law: Vec<f64>,
    /// `log p_mj`, the law with the propensity factors dropped.
    pub log_matching: Vec<f64>,
    /// `log Gamma_u`: spread of the permutation propensity products.
    pub log_gamma_u: f64,
    /// `log max R_jkl` over `j != k` and non-lead slots `l`.
    pub log_gamma_bar: f64,
}

impl SetLaw {
    pub fn law(&self) -> Vec<f64> {
        self.log_law.iter().map(|v| exp(*v)).collect()
    }

    /// Pairs `(j, k)` whose marginal ratio leaves either bracket, allowing
    /// `tol` on the log scale.
    pub fn bracket_violations(&self, tol: f64) -> usize {
        let n = self.log_law.len();
        let mut bad = 0;
        for j in 0..n {
            for k in 0..n {
                let ratio = self.log_law[j] - self.log_law[k];
                let base = self.log_matching[j] - self.log_matching[k];
                if abs(ratio - base) > self.log_gamma_u + tol {
                    bad += 1;
                }
                if j != k && abs(ratio) > self.log_gamma_bar + tol {
                    bad += 1;
                }
            }
        }
        bad
    }
}

/// Enumerate the permutation law of a set whose lead unit (slot 0) is the
/// treated one. `xs[k]` are the slot covariates, `y0` the sorted outcomes.
pub fn enumerate_set(xs: &[Vec<f64>], y0: &[f64], model: &dyn TrueModel) -> Result<SetLaw> {
    let n = xs.len();
    if n != y0.len() || n < 2 {
        return Err(Error::InvalidInput(
            "a set needs at least two slots and one outcome per slot".into(),
        ));
    }
    if n > MAX_ENUMERATED_SET {
        return Err(Error::SetTooLarge {
            set: 0,
            size: n,
            max: MAX_ENUMERATED_SET,
        });
    }
    let ld: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| y0.iter().map(|&y| model.log_density(y, x)).collect())
        .collect();
    let l1: Vec<f64> = y0
        .iter()
        .map(|&y| model.log_propensity(&xs[0], y, true))
        .collect();
    let l0: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| {
            y0.iter()
                .map(|&y| model.log_propensity(x, y, false))
                .collect()
        })
        .collect();

    let mut joint: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut matching: Vec<Vec<f64>> = vec![Vec::new(); n];
    let (mut pi_max, mut pi_min) = (f64::NEG_INFINITY, f64::INFINITY);
    for sigma in permutations(n) {
        let lp: f64 = sigma.iter().enumerate().map(|(k, &j)| ld[k][j]).sum();
        let lpi = l1[sigma[0]]
            + sigma
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, &j)| l0[k][j])
                .sum::<f64>();
        pi_max = pi_max.max(lpi);
        pi_min = pi_min.min(lpi);
        joint[sigma[0]].push(lp + lpi);
        matching[sigma[0]].push(lp);
    }
    let normalize = |parts: Vec<Vec<f64>>| {
        let logs: Vec<f64> = parts.iter().map(|v| log_sum_exp(v)).collect();
        let z = log_sum_exp(&logs);
        logs.iter().map(|v| v - z).collect::<Vec<f64>>()
    };

    let mut gamma_bar = f64::NEG_INFINITY;
    for j in 0..n {
        for k in 0..n {
            if j == k {
                continue;
            }
            for l in 1..n {
                let num = ld[0][j] - ld[l][j] + l0[l][k] - l0[l][j];
                let den = ld[0][k] - ld[l][k] + l1[k] - l1[j];
                gamma_bar = gamma_bar.max(num - den);
            }
        }
    }
    Ok(SetLaw {
        log_law: normalize(joint),
        log_matching: normalize(matching),
        log_gamma_u: pi_max - pi_min,
        log_gamma_bar: gamma_bar,
    })
}

/// Marginal law of the lead unit's rank, by enumeration over `n!` orders.
pub fn exact_set_law(xs: &[Vec<f64>], y0: &[f64], model: &dyn TrueModel) -> Result<Vec<f64>> {
    Ok(enumerate_set(xs, y0, model)?.law())
}

/// A pair's odds `R` with its matching and confounding factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// From the treated/control conditional densities.
    pub log_r: f64,
    pub log_r_m: f64,
    pub log_r_u: f64,
    /// `|R / (R_m R_u) - 1|`.
    pub relative_error: f64,
}

impl Decomposition {
    pub fn gamma(&self) -> f64 {
        exp(abs(self.log_r))
    }

    pub fn gamma_u(&self) -> f64 {
        exp(abs(self.log_r_u))
    }

    pub fn consistent(&self) -> bool {
        self.relative_error < 1e-10
    }
}

const QUADRATURE_POINTS: usize = 4001;

/// `log int pi_z(x, y) p(y | x) dy` by the trapezoid rule.
fn log_arm_mass(model: &dyn TrueModel, x: &[f64], treated: bool) -> f64 {
    let (lo, hi) = model.outcome_support(x);
    let h = (hi - lo) / (QUADRATURE_POINTS - 1) as f64;
    let terms: Vec<f64> = (0..QUADRATURE_POINTS)
        .map(|i| {
            let y = lo + i as f64 * h;
            let edge = if i == 0 || i + 1 == QUADRATURE_POINTS {
                ln(0.5)
            } else {
                0.0
            };
            edge + model.log_propensity(x, y, treated) + model.log_density(y, x)
        })
        .collect();
    log_sum_exp(&terms) + ln(h)
}

/// `log p_z(y | x)` where `p_z` is the outcome density within arm `z`.
fn log_arm_density(model: &dyn TrueModel, y: f64, x: &[f64], treated: bool, log_mass: f64) -> f64 {
    model.log_propensity(x, y, treated) + model.log_density(y, x) - log_mass
}

/// Evaluate `R` for the pair `(x1 treated, x2 control)` with sorted outcomes
/// `y = (y_(1), y_(2))`, once from the arm-specific densities and once as
/// the product of matching quality and confounding strength.
pub fn decomposition_identity(
    x1: &[f64],
    x2: &[f64],
    y: [f64; 2],
    model: &dyn TrueModel,
) -> Decomposition {
    let (m1, m0) = (
        log_arm_mass(model, x1, true),
        log_arm_mass(model, x2, false),
    );
    let swapped =
        log_arm_density(model, y[1], x1, true, m1) + log_arm_density(model, y[0], x2, false, m0);
    let kept =
        log_arm_density(model, y[0], x1, true, m1) + log_arm_density(model, y[1], x2, false, m0);
    let log_r = swapped - kept;

    let log_r_m = (model.log_density(y[1], x1) - model.log_density(y[1], x2))
        - (model.log_density(y[0], x1) - model.log_density(y[0], x2));
    let log_r_u = (model.log_propensity(x1, y[1], true) - model.log_propensity(x1, y[0], true))
        + (model.log_propensity(x2, y[0], false) - model.log_propensity(x2, y[1], false));
    Decomposition {
        log_r,
        log_r_m,
        log_r_u,
        relative_error: abs(exp(log_r - (log_r_m + log_r_u)) - 1.0),
    }
}

/// Outcome of a randomized dominance check against the exact engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub draws: usize,
    pub engine_p: f64,
    /// Largest `member tail - engine p`; non-positive when dominated.
    pub worst_tail_slack: f64,
    /// Largest `member set mean - mu_i` over all sets and draws.
    pub worst_mean_slack: f64,
    pub tail_violations: usize,
    pub mean_violations: usize,
}

impl DominanceReport {
    pub fn passed(&self) -> bool {
        self.tail_violations == 0 && self.mean_violations == 0
    }
}

const DOMINANCE_TOLERANCE: f64 = 1e-12;

/// Sample members `p_j ∝ w_j lambda^{u_j}`, `u_j ∈ [0, 1]`, of the bias
/// family of every set and compare their exact upper tails at the observed
/// statistic with the exact engine. `weights` of `None` is the uniform
/// family with `Γ = lambda`. A quarter of the `u_j` sit on `{0, 1}`.
pub fn dominance_probe(
    table: &ScoreTable,
    weights: Option<&SetWeights>,
    lambda: f64,
    draws: usize,
    seed: SeedSpec,
) -> Result<DominanceReport> {
    if let Some(set) = table.sets.iter().find(|s| s.len() > MAX_ENUMERATED_SET) {
        return Err(Error::InvalidInput(format!(
            "probe sets must have at most {MAX_ENUMERATED_SET} units, got {}",
            set.len()
        )));
    }
    let base: Vec<Vec<f64>> = match weights {
        Some(w) => w.weights.clone(),
        None => table.sets.iter().map(|s| vec![1.0; s.len()]).collect(),
    };
    let engine_p = match weights {
        Some(w) => adaptive_set_pvalue(table, w, lambda, Alternative::Upper, Method::Exact)?,
        None => uniform_pvalue(table, lambda, Alternative::Upper, Method::Exact)?,
    }
    .p_value;
    let mus: Vec<f64> = table
        .sets
        .iter()
        .zip(&base)
        .map(|(s, w)| worst_case_set_bound(&s.q, w, lambda).mu)
        .collect();
    let t = observed_statistic(table);
    let scale: f64 = table
        .sets
        .iter()
        .map(|s| s.q.iter().fold(0.0f64, |m, v| m.max(abs(*v))))
        .sum();

    let mut rng = seed.rng();
    let mut report = DominanceReport {
        draws,
        engine_p,
        worst_tail_slack: f64::NEG_INFINITY,
        worst_mean_slack: f64::NEG_INFINITY,
        tail_violations: 0,
        mean_violations: 0,
    };
    for _ in 0..draws {
        let mut laws = Vec::with_capacity(table.len());
        let mut mean_bad = false;
        for ((s, w), mu) in table.sets.iter().zip(&base).zip(&mus) {
            let raw: Vec<f64> = w
                .iter()
                .map(|wj| {
                    let u = if rng.random_bool(0.25) {
                        if rng.random_bool(0.5) {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        rng.random::<f64>()
                    };
                    wj * exp(u * ln(lambda))
                })
                .collect();
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|r| r / total).collect();
            let mean: f64 = s.q.iter().zip(&p).map(|(q, pj)| q * pj).sum();
            let slack = mean - mu;
            report.worst_mean_slack = report.worst_mean_slack.max(slack);
            let spread = s.q.iter().fold(0.0f64, |m, v| m.max(abs(*v)));
            mean_bad |= slack > DOMINANCE_TOLERANCE * (1.0 + spread);
            laws.push((s.q.clone(), p));
        }
        let tail = exact::sum_tail(&laws, t, scale)?;
        let slack = tail - engine_p;
        report.worst_tail_slack = report.worst_tail_slack.max(slack);
        if slack > DOMINANCE_TOLERANCE {
            report.tail_violations += 1;
        }
        if mean_bad {
            report.mean_violations += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{impute_controls, SharpNull, StudyData, Unit};
    use crate::density::{pair_quality, set_weights};
    use crate::matcher::{MatchedDesign, MatchedSet};
    use proptest::prelude::*;

    fn ignorable_truth() -> GaussianTruth {
        GaussianTruth {
            density: LinearGaussian::new(0.0, vec![1.0], 0.2).unwrap(),
            propensity: Propensity::Linear {
                intercept: 0.2,
                coef: vec![0.5],
            },
        }
    }

    fn confounded() -> GaussianTruth {
        GaussianTruth {
            density: LinearGaussian::new(0.0, vec![2.0], 0.2).unwrap(),
            propensity: Propensity::Logit {
                intercept: -1.0,
                coef: vec![0.5],
                outcome_coef: 0.5,
            },
        }
    }

    fn constant() -> GaussianTruth {
        GaussianTruth {
            density: LinearGaussian::new(0.0, vec![1.0], 0.3).unwrap(),
            propensity: Propensity::Linear {
                intercept: 0.4,
                coef: vec![0.0],
            },
        }
    }

    #[test]
    fn heap_permutations_are_complete_and_distinct() {
        for n in 1..=6 {
            let mut all = permutations(n);
            let count = all.len();
            all.sort();
            all.dedup();
            assert_eq!(all.len(), count);
            assert_eq!(count, (1..=n).product::<usize>());
        }
    }

    #[test]
    fn identical_slots_give_uniform_law() {
        let law = exact_set_law(&[vec![0.4], vec![0.4]], &[0.1, 0.7], &constant()).unwrap();
        assert!((law[0] - 0.5).abs() < 1e-15 && (law[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pair_law_matches_closed_form() {
        let model = confounded();
        let (x1, x2, y) = (vec![0.3], vec![0.5], [0.2, 0.6]);
        let law = exact_set_law(&[x1.clone(), x2.clone()], &y, &model).unwrap();
        let d = decomposition_identity(&x1, &x2, y, &model);
        let r = exp(d.log_r);
        assert!((law[0] - 1.0 / (1.0 + r)).abs() < 1e-12);
        assert!((law[1] - r / (1.0 + r)).abs() < 1e-12);
    }

    #[test]
    fn dual_forms_agree_on_reference_instance() {
        let d = decomposition_identity(&[0.3], &[0.5], [0.2, 0.6], &ignorable_truth());
        assert!(d.consistent(), "{d:?}");
        // no confounding: R reduces to matching quality
        assert_eq!(d.log_r_u, 0.0);
        let d = decomposition_identity(&[0.3], &[0.5], [0.2, 0.6], &confounded());
        assert!(d.consistent(), "{d:?}");
    }

    #[test]
    fn exact_match_leaves_only_confounding() {
        let d = decomposition_identity(&[0.4], &[0.4], [0.1, 0.9], &confounded());
        assert_eq!(d.log_r_m, 0.0);
        assert!((d.log_r - d.log_r_u).abs() < 1e-10);
        // logit odds ratio between the two outcomes
        assert!((d.log_r_u - 0.5 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn constant_propensity_law_equals_matching_weights() {
        let model = constant();
        let xs = vec![vec![0.2], vec![0.5], vec![0.9]];
        let y0 = [0.1, 0.45, 0.8];
        let law = exact_set_law(&xs, &y0, &model).unwrap();

        let units: Vec<Unit> = xs
            .iter()
            .zip(&y0)
            .enumerate()
            .map(|(k, (x, y))| Unit::new(x.clone(), *y, k == 0))
            .collect();
        let data = StudyData::new(units).unwrap();
        let design = MatchedDesign {
            sets: vec![MatchedSet::new(vec![0, 1, 2])],
            source_fingerprint: Default::default(),
        };
        let imputed = impute_controls(&data, SharpNull::no_effect());
        let w = set_weights(&design, &data, &imputed, &model.density).unwrap();
        for (a, b) in law.iter().zip(&w.weights[0]) {
            assert!((a - b).abs() < 1e-12, "{law:?} vs {:?}", w.weights[0]);
        }
    }

    #[test]
    fn pair_matching_factor_matches_pair_quality() {
        let model = ignorable_truth();
        let data = StudyData::new(vec![
            Unit::new(vec![0.3], 0.6, true),
            Unit::new(vec![0.5], 0.2, false),
        ])
        .unwrap();
        let design = MatchedDesign {
            sets: vec![MatchedSet::new(vec![0, 1])],
            source_fingerprint: Default::default(),
        };
        let q = pair_quality(
            &design,
            &data,
            &impute_controls(&data, SharpNull::no_effect()),
            &model.density,
        )
        .unwrap();
        let d = decomposition_identity(&[0.3], &[0.5], [0.2, 0.6], &model);
        assert!((q.log_r_m[0] - d.log_r_m).abs() < 1e-12);
    }

    #[test]
    fn oversized_sets_are_refused() {
        let xs = vec![vec![0.0]; 9];
        let y0: Vec<f64> = (0..9).map(f64::from).collect();
        assert!(matches!(
            exact_set_law(&xs, &y0, &ignorable_truth()),
            Err(Error::SetTooLarge { .. })
        ));
    }

    #[test]
    fn gamma_one_family_is_a_single_law() {
        let table = ScoreTable::from_scores(vec![
            (vec![-0.5, 0.1, 0.4], 2),
            (vec![-0.2, 0.2], 1),
            (vec![-0.3, 0.0, 0.1, 0.2], 0),
        ])
        .unwrap();
        let r = dominance_probe(&table, None, 1.0, 50, SeedSpec::new(3, 0)).unwrap();
        assert!(r.passed());
        assert!(r.worst_tail_slack.abs() < 1e-15, "{r:?}");
    }

    #[test]
    fn pairs_at_gamma_three_are_dominated() {
        let table = ScoreTable::from_scores(
            (0..8)
                .map(|i| {
                    let q = 0.1 + 0.1 * i as f64;
                    (vec![-q, q], i % 2)
                })
                .collect(),
        )
        .unwrap();
        let r = dominance_probe(&table, None, 3.0, 1000, SeedSpec::new(11, 0)).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    fn model_strategy() -> impl Strategy<Value = GaussianTruth> {
        (
            -1.0f64..1.0,
            -2.0f64..2.0,
            0.1f64..0.6,
            -1.5f64..1.5,
            -1.0f64..1.0,
            -1.0f64..1.0,
        )
            .prop_map(|(a, b, sd, c, d, e)| GaussianTruth {
                density: LinearGaussian::new(a, vec![b], sd).unwrap(),
                propensity: Propensity::Logit {
                    intercept: c,
                    coef: vec![d],
                    outcome_coef: e,
                },
            })
    }

    proptest! {
        #[test]
        fn dual_forms_agree(model in model_strategy(), x1 in 0.0f64..1.0, x2 in 0.0f64..1.0,
                            ya in -1.0f64..2.0, yb in -1.0f64..2.0) {
            let y = if ya <= yb { [ya, yb] } else { [yb, ya] };
            let d = decomposition_identity(&[x1], &[x2], y, &model);
            prop_assert!(d.consistent(), "{:?}", d);
        }

        #[test]
        fn set_laws_respect_brackets(model in model_strategy(), n in 2usize..=5,
                                     xs in prop::collection::vec(0.0f64..1.0, 5),
                                     ys in prop::collection::vec(-1.0f64..2.0, 5)) {
            let mut y0 = ys[..n].to_vec();
            y0.sort_by(f64::total_cmp);
            let xs: Vec<Vec<f64>> = xs[..n].iter().map(|x| vec![*x]).collect();
            let law = enumerate_set(&xs, &y0, &model).unwrap();
            prop_assert_eq!(law.bracket_violations(1e-10), 0);
            prop_assert!((law.law().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

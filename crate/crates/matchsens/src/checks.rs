//! The oracle suite: brute-force and closed-form cross-checks of the
//! analysis engines on seeded random instances.

use matchsens_core::data::{impute_controls, SharpNull, StudyData, Unit};
use matchsens_core::density::{pair_quality, set_weights, LinearGaussian, PairQuality, SetWeights};
use matchsens_core::matcher::{
    design_cost, greedy_pair_match, optimal_pair_match, DistanceMatrix, MatchedDesign, MatchedSet,
};
use matchsens_core::oracle::{
    decomposition_identity, dominance_probe, enumerate_set, GaussianTruth, Propensity,
};
use matchsens_core::rng::SeedSpec;
use matchsens_core::scores::ScoreTable;
use matchsens_core::sensearch::{
    adaptive_pair_pvalue, adaptive_set_pvalue, uniform_pvalue, Alternative, Method, WorstCaseReport,
};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub identity_instances: usize,
    pub closed_form_instances: usize,
    pub weight_instances: usize,
    pub bit_identity_instances: usize,
    pub bracket_instances: usize,
    pub dominance_draws: usize,
    pub matching_instances: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 20_240_601,
            identity_instances: 10_000,
            closed_form_instances: 500,
            weight_instances: 1000,
            bit_identity_instances: 200,
            bracket_instances: 1000,
            dominance_draws: 1000,
            matching_instances: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub instances: usize,
    pub failures: usize,
    /// Largest discrepancy seen, in the check's own units.
    pub worst: f64,
}

impl CheckResult {
    fn new(name: impl Into<String>, instances: usize, failures: usize, worst: f64) -> Self {
        Self {
            name: name.into(),
            passed: failures == 0,
            instances,
            failures,
            worst,
        }
    }

    fn error(name: impl Into<String>, err: impl std::fmt::Display) -> Self {
        let mut r = Self::new(format!("{} ({err})", name.into()), 0, 1, f64::NAN);
        r.passed = false;
        r
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha20Rng {
    SeedSpec::new(seed, stream).rng()
}

fn random_truth(r: &mut ChaCha20Rng) -> GaussianTruth {
    let density = LinearGaussian::new(
        r.random_range(-1.0..1.0),
        vec![r.random_range(-2.0..2.0)],
        r.random_range(0.1..0.6),
    )
    .expect("positive sd");
    let propensity = if r.random_bool(0.3) {
        Propensity::Linear {
            intercept: r.random_range(0.1..0.4),
            coef: vec![r.random_range(0.0..0.5)],
        }
    } else {
        Propensity::Logit {
            intercept: r.random_range(-1.5..1.5),
            coef: vec![r.random_range(-1.0..1.0)],
            outcome_coef: r.random_range(-1.0..1.0),
        }
    };
    GaussianTruth {
        density,
        propensity,
    }
}

/// `R` from the arm densities equals `R_m R_u` to 1e-10.
pub fn decomposition_check(cfg: &SuiteConfig) -> CheckResult {
    let mut r = rng(cfg.seed, 1);
    let (mut failures, mut worst) = (0, 0.0f64);
    for _ in 0..cfg.identity_instances {
        let model = random_truth(&mut r);
        let (x1, x2) = (r.random::<f64>(), r.random::<f64>());
        let (a, b) = (r.random_range(-1.0..2.0), r.random_range(-1.0..2.0));
        let y = if a <= b { [a, b] } else { [b, a] };
        let d = decomposition_identity(&[x1], &[x2], y, &model);
        worst = worst.max(d.relative_error);
        failures += usize::from(!d.consistent());
    }
    CheckResult::new(
        "decomposition identity (1e-10)",
        cfg.identity_instances,
        failures,
        worst,
    )
}

fn binomial_tail(n: usize, p: f64, at_least: usize) -> f64 {
    (at_least..=n)
        .map(|k| {
            let choose = (0..k).fold(1.0, |c, i| c * (n - i) as f64 / (i + 1) as f64);
            choose * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
        })
        .sum()
}

/// Pairs with common score magnitude: the exact worst case is a binomial
/// tail with success probability `Γ / (1 + Γ)`.
pub fn closed_form_check(cfg: &SuiteConfig) -> CheckResult {
    let mut r = rng(cfg.seed, 2);
    let (mut failures, mut worst) = (0, 0.0f64);
    for _ in 0..cfg.closed_form_instances {
        let n = r.random_range(1..=30usize);
        let a = r.random_range(0.1..1.0);
        let gamma = if r.random_bool(0.2) {
            1.0
        } else {
            r.random_range(1.0..8.0)
        };
        let ranks: Vec<usize> = (0..n).map(|_| usize::from(r.random_bool(0.6))).collect();
        let hits = ranks.iter().sum();
        let table = ScoreTable::from_scores(ranks.iter().map(|&k| (vec![-a, a], k)).collect())
            .expect("valid ranks");
        let p = match uniform_pvalue(&table, gamma, Alternative::Upper, Method::Exact) {
            Ok(rep) => rep.p_value,
            Err(e) => return CheckResult::error("pair closed form", e),
        };
        let err = (p - binomial_tail(n, gamma / (1.0 + gamma), hits)).abs();
        worst = worst.max(err);
        failures += usize::from(err > 1e-12);
    }
    CheckResult::new(
        "pair exact worst case = binomial closed form (1e-12)",
        cfg.closed_form_instances,
        failures,
        worst,
    )
}

fn random_pairs(r: &mut ChaCha20Rng, pairs: usize) -> (StudyData, MatchedDesign) {
    let mut units = Vec::with_capacity(2 * pairs);
    let mut sets = Vec::with_capacity(pairs);
    for i in 0..pairs {
        units.push(Unit::new(
            vec![r.random::<f64>()],
            r.random_range(-1.0..2.0),
            true,
        ));
        units.push(Unit::new(
            vec![r.random::<f64>()],
            r.random_range(-1.0..2.0),
            false,
        ));
        sets.push(MatchedSet::new(vec![2 * i, 2 * i + 1]));
    }
    let data = StudyData::new(units).expect("consistent units");
    (
        data,
        MatchedDesign {
            sets,
            source_fingerprint: String::new(),
        },
    )
}

/// Set weights of a pair equal `(1, R_m) / (1 + R_m)` to 1e-12.
pub fn pair_weight_check(cfg: &SuiteConfig) -> CheckResult {
    let mut r = rng(cfg.seed, 3);
    let (mut failures, mut worst) = (0, 0.0f64);
    for _ in 0..cfg.weight_instances {
        let model = random_truth(&mut r).density;
        let (data, design) = random_pairs(&mut r, 1);
        let y0 = impute_controls(&data, SharpNull::no_effect());
        let (w, q) = match (
            set_weights(&design, &data, &y0, &model),
            pair_quality(&design, &data, &y0, &model),
        ) {
            (Ok(w), Ok(q)) => (w, q),
            (Err(e), _) | (_, Err(e)) => return CheckResult::error("set weights of pairs", e),
        };
        let rm = q.r_m[0];
        let expect = [1.0 / (1.0 + rm), rm / (1.0 + rm)];
        let err = w.weights[0]
            .iter()
            .zip(expect)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
        failures += usize::from(err > 1e-12);
    }
    CheckResult::new(
        "set weights (n=2) = pair quality (1e-12)",
        cfg.weight_instances,
        failures,
        worst,
    )
}

fn same_bits(a: &WorstCaseReport, b: &WorstCaseReport) -> bool {
    a.p_value.to_bits() == b.p_value.to_bits()
        && a.sides.len() == b.sides.len()
        && a.sides.iter().zip(&b.sides).all(|(x, y)| {
            x.mean.to_bits() == y.mean.to_bits()
                && x.variance.to_bits() == y.variance.to_bits()
                && x.p_value.to_bits() == y.p_value.to_bits()
        })
}

fn random_table(
    r: &mut ChaCha20Rng,
    sets: usize,
    sizes: std::ops::RangeInclusive<usize>,
) -> ScoreTable {
    ScoreTable::from_scores(
        (0..sets)
            .map(|_| {
                let n = r.random_range(sizes.clone());
                let q: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
                (q, r.random_range(0..n))
            })
            .collect(),
    )
    .expect("valid ranks")
}

/// Adaptive engines with neutral weights reproduce the uniform engine bit
/// for bit, for every method and alternative.
pub fn bit_identity_check(cfg: &SuiteConfig) -> CheckResult {
    let mut r = rng(cfg.seed, 4);
    let mut failures = 0;
    for i in 0..cfg.bit_identity_instances {
        let pairs = i % 2 == 0;
        let table = if pairs {
            random_table(&mut r, 8, 2..=2)
        } else {
            random_table(&mut r, 4, 2..=5)
        };
        let lambda = r.random_range(1.0..5.0);
        let sizes: Vec<usize> = table.sets.iter().map(|s| s.len()).collect();
        let method = match i % 3 {
            0 => Method::Gaussian,
            1 => Method::Exact,
            _ => Method::MonteCarlo {
                draws: 500,
                seed: SeedSpec::new(cfg.seed, i as u64),
            },
        };
        let alt = [
            Alternative::Upper,
            Alternative::Lower,
            Alternative::TwoSided,
        ][i % 3];
        let outcome = (|| {
            let uniform = uniform_pvalue(&table, lambda, alt, method)?;
            let set =
                adaptive_set_pvalue(&table, &SetWeights::uniform(&sizes), lambda, alt, method)?;
            let mut ok = same_bits(&uniform, &set);
            if pairs {
                let quality = PairQuality {
                    r_m: vec![1.0; table.len()],
                    log_r_m: vec![0.0; table.len()],
                    floored: vec![false; table.len()],
                };
                ok &= same_bits(
                    &uniform,
                    &adaptive_pair_pvalue(&table, &quality, lambda, alt, method)?,
                );
            }
            Ok::<bool, matchsens_core::Error>(ok)
        })();
        match outcome {
            Ok(ok) => failures += usize::from(!ok),
            Err(e) => return CheckResult::error("unit-weight bit identity", e),
        }
    }
    CheckResult::new(
        "adaptive with unit weights = uniform, bitwise",
        cfg.bit_identity_instances,
        failures,
        0.0,
    )
}

/// Enumerated set laws sit inside both probability-ratio brackets.
pub fn bracket_check(cfg: &SuiteConfig) -> CheckResult {
    let mut r = rng(cfg.seed, 5);
    let mut failures = 0;
    for _ in 0..cfg.bracket_instances {
        let model = random_truth(&mut r);
        let n = r.random_range(2..=5usize);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![r.random::<f64>()]).collect();
        let mut y0: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..2.0)).collect();
        y0.sort_by(f64::total_cmp);
        match enumerate_set(&xs, &y0, &model) {
            Ok(law) => failures += usize::from(law.bracket_violations(1e-10) > 0),
            Err(e) => return CheckResult::error("set law brackets", e),
        }
    }
    CheckResult::new(
        "set law within matching and bar brackets",
        cfg.bracket_instances,
        failures,
        0.0,
    )
}

/// Dominance probes for pairs and sets under uniform and adaptive bounds.
pub fn dominance_checks(cfg: &SuiteConfig) -> Vec<CheckResult> {
    let mut r = rng(cfg.seed, 6);
    let mut out = Vec::new();
    let mut stream = 100;
    for pairs in [true, false] {
        let shape = if pairs { "pairs" } else { "sets" };
        let mut configs: Vec<(bool, f64, String)> = [1.0, 2.0, 5.0]
            .iter()
            .map(|&g| (false, g, format!("uniform Γ={g}")))
            .collect();
        configs.extend(
            [1.0, 1.5, 3.0]
                .iter()
                .map(|&l| (true, l, format!("adaptive Λ={l}"))),
        );
        for (adaptive, bound, label) in configs {
            let table = if pairs {
                random_table(&mut r, 10, 2..=2)
            } else {
                random_table(&mut r, 4, 2..=5)
            };
            let weights = adaptive.then(|| SetWeights {
                weights: table
                    .sets
                    .iter()
                    .map(|s| {
                        let raw: Vec<f64> =
                            (0..s.len()).map(|_| r.random_range(0.05..1.0)).collect();
                        let total: f64 = raw.iter().sum();
                        raw.iter().map(|w| w / total).collect()
                    })
                    .collect(),
                floored: vec![false; table.len()],
            });
            stream += 1;
            let name = format!("dominance, {shape}, {label}");
            match dominance_probe(
                &table,
                weights.as_ref(),
                bound,
                cfg.dominance_draws,
                SeedSpec::new(cfg.seed, stream),
            ) {
                Ok(rep) => out.push(CheckResult::new(
                    name,
                    rep.draws,
                    rep.tail_violations + rep.mean_violations,
                    rep.worst_tail_slack.max(rep.worst_mean_slack),
                )),
                Err(e) => out.push(CheckResult::error(name, e)),
            }
        }
    }
    out
}

/// Cheapest injective assignment by full enumeration, summed in row order.
fn brute_force_cost(d: &DistanceMatrix) -> f64 {
    fn go(d: &DistanceMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == d.treated.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..d.controls.len() {
            if !used[c] {
                used[c] = true;
                go(d, row + 1, used, acc + d.get(row, c), best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(d, 0, &mut vec![false; d.controls.len()], 0.0, &mut best);
    best
}

pub const MATCHING_CHECK: &str = "optimal matching = brute force, <= greedy";

/// Optimal matching cost equals brute force exactly and never exceeds the
/// greedy cost. Even instances draw i.i.d. uniform costs (ties have
/// probability zero); odd instances draw small integers, which tie often but
/// sum exactly, so the tie-break is exercised without rounding noise.
pub fn matching_check(cfg: &SuiteConfig) -> CheckResult {
    let mut r = rng(cfg.seed, 7);
    let (mut failures, mut worst) = (0, 0.0f64);
    for i in 0..cfg.matching_instances {
        let treated = r.random_range(1..=8usize);
        let controls = treated + r.random_range(0..=2usize);
        let rows: Vec<Vec<f64>> = (0..treated)
            .map(|_| {
                (0..controls)
                    .map(|_| {
                        if i % 2 == 0 {
                            r.random::<f64>()
                        } else {
                            r.random_range(0..6u32) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let outcome = (|| {
            let units = (0..treated + controls)
                .map(|u| Unit::new(vec![u as f64], 0.0, u < treated))
                .collect();
            let data = StudyData::new(units)?;
            let d = DistanceMatrix::from_rows(
                (0..treated).collect(),
                (treated..treated + controls).collect(),
                &rows,
            )?;
            let optimal = design_cost(&optimal_pair_match(&data, &d)?, &d);
            let greedy = design_cost(&greedy_pair_match(&data, &d)?, &d);
            Ok::<_, matchsens_core::Error>((optimal, greedy, brute_force_cost(&d)))
        })();
        match outcome {
            Ok((optimal, greedy, brute)) => {
                worst = worst.max((optimal - brute).abs());
                failures += usize::from(optimal != brute || optimal > greedy);
            }
            Err(e) => return CheckResult::error(MATCHING_CHECK, e),
        }
    }
    CheckResult::new(MATCHING_CHECK, cfg.matching_instances, failures, worst)
}

pub fn run_suite(cfg: &SuiteConfig) -> Vec<CheckResult> {
    let mut out = vec![
        decomposition_check(cfg),
        closed_form_check(cfg),
        pair_weight_check(cfg),
        bit_identity_check(cfg),
        bracket_check(cfg),
    ];
    out.extend(dominance_checks(cfg));
    out.push(matching_check(cfg));
    out
}

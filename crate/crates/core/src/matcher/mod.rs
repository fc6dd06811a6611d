//! Matched designs: Mahalanobis distances, optimal pair matching without
//! replacement, calipers, and validation of externally supplied designs.

pub mod assignment;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::StudyData;
use crate::error::{Error, Result};
use crate::math::{abs, sample_sd};

/// One matched set. `members[0]` is the set's unique treated unit, or,
/// when `label_switched` is set, its unique control unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedSet {
    pub members: Vec<usize>,
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub label_switched: bool,
}

impl MatchedSet {
    pub fn new(members: Vec<usize>) -> Self {
        Self {
            members,
            label_switched: false,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn treated_count(&self, data: &StudyData) -> usize {
        self.members
            .iter()
            .filter(|&&m| data.unit(m).treated)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedDesign {
    pub sets: Vec<MatchedSet>,
    /// Hash of the covariates and treatment indicators that were matched on.
    #[serde(default)]
    pub source_fingerprint: String,
}

impl MatchedDesign {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn is_pair_design(&self) -> bool {
        self.sets.iter().all(|s| s.len() == 2)
    }

    /// Treated (first) and control (second) units of each pair.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sets.iter().map(|s| (s.members[0], s.members[1]))
    }
}

/// Post-matching caliper: drop pairs whose covariate discrepancy exceeds
/// `width_multiplier` pooled standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaliperRule {
    pub width_multiplier: f64,
    /// `true`: every coordinate must satisfy `|dx_k| <= w * sd_k`.
    /// `false`: the pair's Mahalanobis distance must satisfy `d <= w`.
    pub per_coordinate: bool,
}

impl Default for CaliperRule {
    fn default() -> Self {
        Self {
            width_multiplier: 0.25,
            per_coordinate: true,
        }
    }
}

impl CaliperRule {
    pub fn new(width_multiplier: f64, per_coordinate: bool) -> Result<Self> {
        if !(width_multiplier > 0.0 && width_multiplier.is_finite()) {
            return Err(Error::InvalidInput("caliper width must be positive".into()));
        }
        Ok(Self {
            width_multiplier,
            per_coordinate,
        })
    }
}

/// Treated-by-control distances, row-major in treated order.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub treated: Vec<usize>,
    pub controls: Vec<usize>,
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.controls.len() + c]
    }

    /// Build from an explicit matrix (rows follow `treated`).
    pub fn from_rows(treated: Vec<usize>, controls: Vec<usize>, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != treated.len() || rows.iter().any(|r| r.len() != controls.len()) {
            return Err(Error::InvalidInput("distance matrix shape mismatch".into()));
        }
        Ok(Self {
            treated,
            controls,
            values: rows.concat(),
        })
    }
}

/// Whitening transform `x -> L^{-1} x` with `S = L L^T` the pooled sample
/// covariance of all units.
struct Whitener {
    chol_l: DMatrix<f64>,
}

impl Whitener {
    fn fit(data: &StudyData) -> Result<Self> {
        let d = data.dim();
        let n = data.len();
        if d == 0 {
            return Err(Error::InvalidInput("no covariates to match on".into()));
        }
        if n < 2 {
            return Err(Error::SingularCovariance);
        }
        let mut mean = DVector::<f64>::zeros(d);
        for u in data.units() {
            mean += DVector::from_column_slice(&u.covariates);
        }
        mean /= n as f64;
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for u in data.units() {
            let dx = DVector::from_column_slice(&u.covariates) - &mean;
            cov += &dx * dx.transpose();
        }
        cov /= (n - 1) as f64;
        let max_diag = cov.diagonal().iter().fold(0.0f64, |m, v| m.max(*v));
        let chol = nalgebra::Cholesky::new(cov).ok_or(Error::SingularCovariance)?;
        let l = chol.l();
        let min_pivot = l.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(*v));
        if !(max_diag > 0.0) || min_pivot * min_pivot <= 1e-12 * max_diag {
            return Err(Error::SingularCovariance);
        }
        Ok(Self { chol_l: l })
    }

    fn apply(&self, x: &[f64]) -> DVector<f64> {
        self.chol_l
            .solve_lower_triangular(&DVector::from_column_slice(x))
            .expect("cholesky factor is non-singular")
    }
}

/// Mahalanobis distances between every treated and every control unit,
/// using the pooled sample covariance over all units.
pub fn mahalanobis(data: &StudyData) -> Result<DistanceMatrix> {
    let whitener = Whitener::fit(data)?;
    let treated = data.treated_indices();
    let controls = data.control_indices();
    let white: Vec<DVector<f64>> = (0..data.len())
        .map(|i| whitener.apply(data.covariates(i)))
        .collect();
    let mut values = Vec::with_capacity(treated.len() * controls.len());
    for &t in &treated {
        for &c in &controls {
            values.push((&white[t] - &white[c]).norm());
        }
    }
    Ok(DistanceMatrix {
        treated,
        controls,
        values,
    })
}

/// Fingerprint of the matching inputs (covariates and treatment only).
pub fn source_fingerprint(data: &StudyData) -> String {
    let mut hasher = Sha256::new();
    hasher.update((data.dim() as u64).to_le_bytes());
    for u in data.units() {
        for x in &u.covariates {
            hasher.update(x.to_bits().to_le_bytes());
        }
        hasher.update([u8::from(u.treated)]);
    }
    let digest = hasher.finalize();
    hex::encode(&digest[..16])
}

/// Optimal pair matching without replacement: every treated unit receives a
/// distinct control and the total distance is minimal. Among equal-cost
/// optima the lexicographically smallest assignment (by treated position,
/// then control position) is returned.
pub fn optimal_pair_match(data: &StudyData, distances: &DistanceMatrix) -> Result<MatchedDesign> {
    let rows = distances.treated.len();
    let cols = distances.controls.len();
    if rows > cols {
        return Err(Error::NotEnoughControls {
            treated: rows,
            controls: cols,
        });
    }
    if rows == 0 {
        return Err(Error::InvalidInput("no treated units to match".into()));
    }
    if distances.values.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidInput(
            "distance matrix has non-finite entries".into(),
        ));
    }
    let solution = assignment::solve(&distances.values, rows, cols);
    let sets = solution
        .row_to_col
        .iter()
        .enumerate()
        .map(|(r, &c)| MatchedSet::new(vec![distances.treated[r], distances.controls[c]]))
        .collect();
    Ok(MatchedDesign {
        sets,
        source_fingerprint: source_fingerprint(data),
    })
}

/// Total within-pair distance of a pair design.
pub fn design_cost(design: &MatchedDesign, distances: &DistanceMatrix) -> f64 {
    let row = |u: usize| distances.treated.iter().position(|&t| t == u);
    let col = |u: usize| distances.controls.iter().position(|&c| c == u);
    design
        .pairs()
        .map(|(t, c)| distances.get(row(t).expect("treated unit"), col(c).expect("control unit")))
        .sum()
}

/// Greedy nearest-neighbour matching in treated order. Used as a baseline.
pub fn greedy_pair_match(data: &StudyData, distances: &DistanceMatrix) -> Result<MatchedDesign> {
    let rows = distances.treated.len();
    let cols = distances.controls.len();
    if rows > cols {
        return Err(Error::NotEnoughControls {
            treated: rows,
            controls: cols,
        });
    }
    let mut taken = vec![false; cols];
    let mut sets = Vec::with_capacity(rows);
    for r in 0..rows {
        let best = (0..cols)
            .filter(|&c| !taken[c])
            .min_by(|&a, &b| distances.get(r, a).total_cmp(&distances.get(r, b)))
            .expect("enough controls");
        taken[best] = true;
        sets.push(MatchedSet::new(vec![
            distances.treated[r],
            distances.controls[best],
        ]));
    }
    Ok(MatchedDesign {
        sets,
        source_fingerprint: source_fingerprint(data),
    })
}

/// Per-coordinate standard deviations pooled over all units.
pub fn pooled_sd(data: &StudyData) -> Vec<f64> {
    (0..data.dim())
        .map(|k| {
            let col: Vec<f64> = data.units().iter().map(|u| u.covariates[k]).collect();
            sample_sd(&col)
        })
        .collect()
}

/// Keep exactly the pairs that pass the caliper, in their original order.
pub fn apply_caliper(
    design: &MatchedDesign,
    data: &StudyData,
    rule: &CaliperRule,
) -> Result<MatchedDesign> {
    if !design.is_pair_design() {
        return Err(Error::InvalidDesign(
            "calipers apply to pair designs only".into(),
        ));
    }
    let keep: Vec<bool> = if rule.per_coordinate {
        let sd = pooled_sd(data);
        design
            .pairs()
            .map(|(t, c)| {
                let (xt, xc) = (data.covariates(t), data.covariates(c));
                (0..data.dim()).all(|k| abs(xt[k] - xc[k]) <= rule.width_multiplier * sd[k])
            })
            .collect()
    } else {
        let w = Whitener::fit(data)?;
        design
            .pairs()
            .map(|(t, c)| {
                (w.apply(data.covariates(t)) - w.apply(data.covariates(c))).norm()
                    <= rule.width_multiplier
            })
            .collect()
    };
    let sets = design
        .sets
        .iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then(|| s.clone()))
        .collect();
    Ok(MatchedDesign {
        sets,
        source_fingerprint: design.source_fingerprint.clone(),
    })
}

/// Check disjointness and the one-treated / one-control rule, and normalize
/// each set so its unique unit comes first.
///
/// Sets with one treated unit are ordered treated-first. Sets with one
/// control unit and several treated units are ordered control-first and
/// flagged for label switching. A pair is always treated-first.
pub fn validate_design(design: &MatchedDesign, data: &StudyData) -> Result<MatchedDesign> {
    let mut seen = vec![false; data.len()];
    let mut sets = Vec::with_capacity(design.len());
    for (i, set) in design.sets.iter().enumerate() {
        let n = set.len();
        if n < 2 {
            return Err(Error::InvalidDesign(format!(
                "set {i} has {n} units; at least 2 required"
            )));
        }
        for &m in &set.members {
            if m >= data.len() {
                return Err(Error::InvalidDesign(format!(
                    "set {i} references unit {m}, out of range"
                )));
            }
            if seen[m] {
                return Err(Error::InvalidDesign(format!(
                    "unit {m} appears in more than one matched set (set {i})"
                )));
            }
            seen[m] = true;
        }
        let treated = set.treated_count(data);
        let (lead_is_treated, switched) = if treated == 1 {
            (true, false)
        } else if treated == n - 1 {
            (false, true)
        } else {
            return Err(Error::InvalidDesign(format!(
                "set {i} has {treated} treated units out of {n}; need exactly one treated or exactly one control"
            )));
        };
        let lead = set
            .members
            .iter()
            .position(|&m| data.unit(m).treated == lead_is_treated)
            .expect("lead unit exists");
        let mut members = Vec::with_capacity(n);
        members.push(set.members[lead]);
        members.extend(
            set.members
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != lead)
                .map(|(_, &m)| m),
        );
        sets.push(MatchedSet {
            members,
            label_switched: switched,
        });
    }
    let fingerprint = if design.source_fingerprint.is_empty() {
        source_fingerprint(data)
    } else {
        design.source_fingerprint.clone()
    };
    Ok(MatchedDesign {
        sets,
        source_fingerprint: fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Unit;
    use crate::math::sqrt;

    fn data_1d(treated: &[f64], controls: &[f64]) -> StudyData {
        let mut units: Vec<Unit> = treated
            .iter()
            .map(|&x| Unit::new(vec![x], 0.0, true))
            .collect();
        units.extend(controls.iter().map(|&x| Unit::new(vec![x], 0.0, false)));
        StudyData::new(units).unwrap()
    }

    #[test]
    fn mahalanobis_identity_covariance_is_euclidean() {
        // four points whose sample covariance is exactly the identity
        let s = sqrt(1.5);
        let units = vec![
            Unit::new(vec![s, 0.0], 0.0, true),
            Unit::new(vec![-s, 0.0], 0.0, false),
            Unit::new(vec![0.0, s], 0.0, false),
            Unit::new(vec![0.0, -s], 0.0, false),
        ];
        let data = StudyData::new(units).unwrap();
        let d = mahalanobis(&data).unwrap();
        // distance from (s,0) to (-s,0) is 2s
        assert!((d.get(0, 0) - 2.0 * s).abs() < 1e-12);
        assert!((d.get(0, 1) - sqrt(3.0)).abs() < 1e-12);
    }

    #[test]
    fn mahalanobis_scales_by_variance() {
        // variance 4 in one dimension: |dx| = 2 -> distance 1
        let data = data_1d(&[-2.0, 2.0], &[-2.0, 2.0]);
        // sample variance: mean 0, ss = 16, /3
        let var = 16.0 / 3.0;
        let d = mahalanobis(&data).unwrap();
        assert!((d.get(0, 1) - 4.0 / sqrt(var)).abs() < 1e-12);
        assert_eq!(d.get(0, 0), 0.0);

        let data = data_1d(&[0.0, 2.0, 4.0], &[-2.0, 6.0, 2.0]);
        // mean 2, ss = 4+0+4+16+16+0 = 40, var = 8 -> not 4, so rescale
        let d = mahalanobis(&data).unwrap();
        assert!((d.get(0, 2) - 2.0 / sqrt(8.0)).abs() < 1e-12);
    }

    #[test]
    fn singular_covariance_is_reported() {
        let units = vec![
            Unit::new(vec![1.0, 2.0], 0.0, true),
            Unit::new(vec![2.0, 4.0], 0.0, false),
            Unit::new(vec![3.0, 6.0], 0.0, false),
        ];
        let err = mahalanobis(&StudyData::new(units).unwrap()).unwrap_err();
        assert_eq!(err, Error::SingularCovariance);
    }

    #[test]
    fn small_optimal_match_by_hand() {
        let data = data_1d(&[0.0, 1.0], &[0.1, 0.9, 5.0]);
        let rows = vec![vec![0.1, 0.9, 5.0], vec![0.9, 0.1, 4.0]];
        let d = DistanceMatrix::from_rows(vec![0, 1], vec![2, 3, 4], &rows).unwrap();
        let design = optimal_pair_match(&data, &d).unwrap();
        assert_eq!(design.sets[0].members, vec![0, 2]);
        assert_eq!(design.sets[1].members, vec![1, 3]);
        assert!((design_cost(&design, &d) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn single_pair() {
        let data = data_1d(&[0.0], &[3.0]);
        let d = mahalanobis(&data).unwrap();
        let design = optimal_pair_match(&data, &d).unwrap();
        assert_eq!(design.sets, vec![MatchedSet::new(vec![0, 1])]);
    }

    #[test]
    fn too_few_controls() {
        let data = data_1d(&[0.0, 1.0], &[3.0]);
        let d = mahalanobis(&data).unwrap();
        assert!(matches!(
            optimal_pair_match(&data, &d),
            Err(Error::NotEnoughControls {
                treated: 2,
                controls: 1
            })
        ));
    }

    #[test]
    fn caliper_keeps_and_drops() {
        // pooled sd of {0, 0.2, 0.3, ...}: construct data where sd is known
        let data = data_1d(&[0.0, 0.0], &[0.2, 0.3]);
        let sd = pooled_sd(&data)[0];
        // absolute width 0.25: the 0.2 pair passes, the 0.3 pair does not
        let rule = CaliperRule::new(0.25 / sd, true).unwrap();
        let design = MatchedDesign {
            sets: vec![MatchedSet::new(vec![0, 2]), MatchedSet::new(vec![1, 3])],
            source_fingerprint: String::new(),
        };
        let kept = apply_caliper(&design, &data, &rule).unwrap();
        assert_eq!(kept.sets, vec![MatchedSet::new(vec![0, 2])]);
    }

    #[test]
    fn caliper_preserves_order_and_is_idempotent() {
        let treated: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let controls: Vec<f64> = (0..10)
            .map(|i| i as f64 / 10.0 + if i % 3 == 0 { 0.5 } else { 0.01 })
            .collect();
        let data = data_1d(&treated, &controls);
        let design = MatchedDesign {
            sets: (0..10).map(|i| MatchedSet::new(vec![i, 10 + i])).collect(),
            source_fingerprint: String::new(),
        };
        let sd = pooled_sd(&data)[0];
        let rule = CaliperRule::new(0.1 / sd, true).unwrap();
        let kept = apply_caliper(&design, &data, &rule).unwrap();
        // i in {0, 3, 6, 9} exceed the 0.1 width
        assert_eq!(kept.len(), 6);
        let firsts: Vec<usize> = kept.sets.iter().map(|s| s.members[0]).collect();
        assert_eq!(firsts, vec![1, 2, 4, 5, 7, 8]);
        assert_eq!(apply_caliper(&kept, &data, &rule).unwrap(), kept);
    }

    #[test]
    fn validate_reorders_treated_first() {
        let data = data_1d(&[0.0], &[1.0]);
        let design = MatchedDesign {
            sets: vec![MatchedSet::new(vec![1, 0])],
            source_fingerprint: String::new(),
        };
        let v = validate_design(&design, &data).unwrap();
        assert_eq!(v.sets[0].members, vec![0, 1]);
        assert!(!v.sets[0].label_switched);
    }

    #[test]
    fn validate_flags_one_control_sets() {
        let data = data_1d(&[0.0, 0.5], &[1.0]);
        let design = MatchedDesign {
            sets: vec![MatchedSet::new(vec![0, 1, 2])],
            source_fingerprint: String::new(),
        };
        let v = validate_design(&design, &data).unwrap();
        assert_eq!(v.sets[0].members, vec![2, 0, 1]);
        assert!(v.sets[0].label_switched);
    }

    #[test]
    fn validate_rejects_overlap_and_bad_counts() {
        let data = data_1d(&[0.0, 0.5], &[1.0, 2.0]);
        let overlap = MatchedDesign {
            sets: vec![MatchedSet::new(vec![0, 2]), MatchedSet::new(vec![1, 2])],
            source_fingerprint: String::new(),
        };
        assert!(matches!(
            validate_design(&overlap, &data),
            Err(Error::InvalidDesign(_))
        ));
        let all_controls = MatchedDesign {
            sets: vec![MatchedSet::new(vec![2, 3])],
            source_fingerprint: String::new(),
        };
        assert!(validate_design(&all_controls, &data).is_err());
        let two_and_two = MatchedDesign {
            sets: vec![MatchedSet::new(vec![0, 1, 2, 3])],
            source_fingerprint: String::new(),
        };
        assert!(validate_design(&two_and_two, &data).is_err());
    }

    #[test]
    fn outcomes_do_not_affect_design() {
        let data = data_1d(&[0.0, 0.4, 0.8], &[0.1, 0.5, 0.7, 0.9]);
        let d1 = optimal_pair_match(&data, &mahalanobis(&data).unwrap()).unwrap();
        let perturbed = data
            .with_outcomes(&[9.0, -3.0, 1.0, 2.0, 5.0, 0.5, 7.0])
            .unwrap();
        let d2 = optimal_pair_match(&perturbed, &mahalanobis(&perturbed).unwrap()).unwrap();
        assert_eq!(d1, d2);
    }
}

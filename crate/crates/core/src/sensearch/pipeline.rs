//! The full analysis at one hypothesized effect, and confidence intervals by
//! inverting it over a grid.
//!
//! At each `c` the study outcomes are imputed under `H_c`, any external
//! regression or density model is refitted on external outcomes imputed
//! under the same `c`, and the sensitivity p-value is recomputed.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::{
    adaptive_pair_pvalue, adaptive_set_pvalue, sensitivity_pvalue, Alternative, BiasMode,
    Direction, SensitivitySpec, WorstCaseReport,
};
use crate::data::{impute_controls, SharpNull, StudyData};
use crate::density::{
    fit_adjustment, pair_quality, set_weights, DensityEstimator, DensityModel, LinearGaussian,
};
use crate::error::{Error, Result};
use crate::matcher::{validate_design, MatchedDesign};
use crate::scores::{score_design, PsiSpec, ScaleMode};

/// Where the conditional density for adaptive analyses comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DensitySource {
    None,
    /// Fitted on an external sample independent of the study data.
    External {
        estimator: DensityEstimator,
    },
    /// A known model, e.g. the generating truth in simulations.
    Known {
        model: LinearGaussian,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub psi: PsiSpec,
    pub scale: ScaleMode,
    pub spec: SensitivitySpec,
    pub density: DensitySource,
    /// Subtract an external least-squares fit of `y0` on covariates first.
    #[serde(default)]
    pub adjust: bool,
}

impl PipelineConfig {
    pub fn new(spec: SensitivitySpec) -> Self {
        Self {
            psi: PsiSpec::default(),
            scale: ScaleMode::Pooled,
            spec,
            density: DensitySource::None,
            adjust: false,
        }
    }

    fn needs_external(&self) -> bool {
        self.adjust || matches!(self.density, DensitySource::External { .. })
    }
}

/// Run the analysis for the sharp null `H_c` with `c = null.effect`.
pub fn analyze(
    data: &StudyData,
    design: &MatchedDesign,
    external: Option<&StudyData>,
    config: &PipelineConfig,
    null: SharpNull,
) -> Result<WorstCaseReport> {
    config.spec.validate()?;
    if config.needs_external() && external.is_none() {
        return Err(Error::InvalidSpec(
            "an external sample is required for this configuration".into(),
        ));
    }
    let design = validate_design(design, data)?;
    let mut y0 = impute_controls(data, null);
    let mut external = external.cloned();
    if config.adjust {
        let ext = external.as_ref().expect("checked above");
        let fit = fit_adjustment(ext, null)?;
        y0 = fit.residualize(data, &y0);
        let ext_resid = fit.residualize(ext, &impute_controls(ext, null));
        let controls: Vec<bool> = ext.units().iter().map(|_| false).collect();
        let covariates = ext.units().iter().map(|u| u.covariates.clone()).collect();
        external = Some(StudyData::from_columns(
            covariates,
            &ext_resid.y0,
            &controls,
        )?);
    }
    // adjusted external outcomes are already control outcomes
    let ext_null = if config.adjust {
        SharpNull::no_effect()
    } else {
        null
    };
    let table = score_design(&design, &y0, &config.psi, config.scale)?;

    let BiasMode::Adaptive { lambda } = config.spec.mode else {
        return sensitivity_pvalue(&table, &config.spec, None);
    };
    let model = match &config.density {
        DensitySource::None => {
            return Err(Error::InvalidSpec(
                "adaptive mode requires a density source".into(),
            ))
        }
        DensitySource::Known { model } => DensityModel::TrueModel(model.clone()),
        DensitySource::External { estimator } => {
            estimator.fit(external.as_ref().expect("checked above"), ext_null)?
        }
    };
    let (alt, method) = (config.spec.alternative, config.spec.method);
    if design.is_pair_design() {
        let quality = pair_quality(&design, data, &y0, &model)?;
        adaptive_pair_pvalue(&table, &quality, lambda, alt, method)
    } else {
        let weights = set_weights(&design, data, &y0, &model)?;
        adaptive_set_pvalue(&table, &weights, lambda, alt, method)
    }
}

/// Interval of hypothesized effects not rejected by the two-sided rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub level: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    /// Non-rejection reaches the first grid point, so the true bound may be lower.
    pub lower_open: bool,
    /// Non-rejection reaches the last grid point.
    pub upper_open: bool,
    pub empty: bool,
    pub grid: Vec<f64>,
    pub p_upper: Vec<f64>,
    pub p_lower: Vec<f64>,
    pub accepted: Vec<bool>,
}

impl ConfidenceInterval {
    pub fn covers(&self, c: f64) -> bool {
        match (self.lower, self.upper) {
            (Some(lo), Some(hi)) => lo <= c && c <= hi,
            _ => false,
        }
    }
}

fn check_grid(grid: &[f64], alpha: f64) -> Result<()> {
    if grid.is_empty()
        || grid.iter().any(|c| !c.is_finite())
        || grid.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::InvalidInput(
            "grid must be finite, non-empty and strictly increasing".into(),
        ));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidInput("alpha must lie in (0, 1]".into()));
    }
    Ok(())
}

/// Assemble the interval from per-grid-point one-sided p-values: `c` is
/// rejected iff either one-sided p-value is at most `alpha / 2`.
pub fn interval_from_pvalues(
    grid: &[f64],
    alpha: f64,
    p_upper: Vec<f64>,
    p_lower: Vec<f64>,
) -> Result<ConfidenceInterval> {
    check_grid(grid, alpha)?;
    if p_upper.len() != grid.len() || p_lower.len() != grid.len() {
        return Err(Error::InvalidInput(
            "one p-value pair per grid point is required".into(),
        ));
    }
    let half = alpha / 2.0;
    let accepted: Vec<bool> = p_upper
        .iter()
        .zip(&p_lower)
        .map(|(u, l)| *u > half && *l > half)
        .collect();
    let first = accepted.iter().position(|a| *a);
    let last = accepted.iter().rposition(|a| *a);
    Ok(ConfidenceInterval {
        level: 1.0 - alpha,
        lower: first.map(|i| grid[i]),
        upper: last.map(|i| grid[i]),
        lower_open: first == Some(0),
        upper_open: last == Some(grid.len() - 1),
        empty: first.is_none(),
        grid: grid.to_vec(),
        p_upper,
        p_lower,
        accepted,
    })
}

/// Both one-sided p-values at one hypothesized effect.
pub fn two_sided_pvalues(
    data: &StudyData,
    design: &MatchedDesign,
    external: Option<&StudyData>,
    config: &PipelineConfig,
    c: f64,
) -> Result<(f64, f64)> {
    let mut cfg = config.clone();
    cfg.spec.alternative = Alternative::TwoSided;
    let report = analyze(data, design, external, &cfg, SharpNull::new(c)?)?;
    let side = |d| {
        report
            .side(d)
            .map(|s| s.p_value)
            .expect("two-sided report has both sides")
    };
    Ok((side(Direction::Upper), side(Direction::Lower)))
}

pub fn invert_tests(
    data: &StudyData,
    design: &MatchedDesign,
    external: Option<&StudyData>,
    config: &PipelineConfig,
    alpha: f64,
    grid: &[f64],
) -> Result<ConfidenceInterval> {
    check_grid(grid, alpha)?;
    let mut up = Vec::with_capacity(grid.len());
    let mut low = Vec::with_capacity(grid.len());
    for &c in grid {
        let (u, l) = two_sided_pvalues(data, design, external, config, c)?;
        up.push(u);
        low.push(l);
    }
    interval_from_pvalues(grid, alpha, up, low)
}

/// `n` evenly spaced points from `start` to `stop` inclusive.
pub fn linear_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = crate::math::floor((stop - start) / step + 1e-9) as usize;
    (0..=n).map(|i| start + i as f64 * step).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Unit;
    use crate::matcher::MatchedSet;
    use crate::sensearch::Method;
    use alloc::vec;

    fn pairs(diffs: &[f64]) -> (StudyData, MatchedDesign) {
        let mut units = Vec::new();
        let mut sets = Vec::new();
        for (i, d) in diffs.iter().enumerate() {
            let x = i as f64;
            units.push(Unit::new(vec![x], 1.0 + d, true));
            units.push(Unit::new(vec![x], 1.0, false));
            sets.push(MatchedSet::new(vec![2 * i, 2 * i + 1]));
        }
        (
            StudyData::new(units).unwrap(),
            MatchedDesign {
                sets,
                source_fingerprint: Default::default(),
            },
        )
    }

    fn uniform_config(gamma: f64) -> PipelineConfig {
        PipelineConfig::new(
            SensitivitySpec::new(
                BiasMode::Uniform { gamma },
                Alternative::Upper,
                Method::Gaussian,
            )
            .unwrap(),
        )
    }

    #[test]
    fn alpha_one_rejects_everything_at_gamma_one() {
        let (data, design) = pairs(&[0.3, -0.2, 0.5, 0.1, 0.4]);
        let ci = invert_tests(
            &data,
            &design,
            None,
            &uniform_config(1.0),
            1.0,
            &linear_grid(-1.0, 1.0, 0.1),
        )
        .unwrap();
        assert!(ci.empty);
        assert_eq!(ci.lower, None);
    }

    #[test]
    fn single_point_grid_gives_degenerate_interval() {
        let (data, design) = pairs(&[0.3, -0.2, 0.5, 0.1, 0.4]);
        let ci = invert_tests(&data, &design, None, &uniform_config(1.0), 0.05, &[0.2]).unwrap();
        assert_eq!((ci.lower, ci.upper), (Some(0.2), Some(0.2)));
        assert!(ci.lower_open && ci.upper_open);
    }

    #[test]
    fn interval_brackets_the_shift() {
        let diffs: Vec<f64> = (0..40)
            .map(|i| 1.0 + 0.05 * ((i * 7 % 11) as f64 - 5.0))
            .collect();
        let (data, design) = pairs(&diffs);
        let ci = invert_tests(
            &data,
            &design,
            None,
            &uniform_config(1.0),
            0.05,
            &linear_grid(0.0, 2.0, 0.02),
        )
        .unwrap();
        assert!(ci.covers(1.0));
        assert!(!ci.lower_open && !ci.upper_open);
    }

    #[test]
    fn external_sample_is_required() {
        let (data, design) = pairs(&[0.3, -0.2]);
        let mut cfg = PipelineConfig::new(
            SensitivitySpec::new(
                BiasMode::Adaptive { lambda: 1.0 },
                Alternative::Upper,
                Method::Gaussian,
            )
            .unwrap(),
        );
        cfg.density = DensitySource::External {
            estimator: DensityEstimator::Parametric,
        };
        assert!(matches!(
            analyze(&data, &design, None, &cfg, SharpNull::no_effect()),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn grid_helper() {
        let g = linear_grid(0.0, 2.0, 0.02);
        assert_eq!(g.len(), 101);
        assert_eq!(g[0], 0.0);
        assert!((g[100] - 2.0).abs() < 1e-12);
    }
}

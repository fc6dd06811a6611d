//! Synthetic study models and the named analysis pipelines run on them.
//!
//! Each replication draws a study sample and an independent external sample
//! from separate seed streams, matches the study sample, and keeps the
//! generating truth on the side. Only `adapt.true`, the uniform and quantile
//! bounds, and the bias diagnostics read the truth; for confounded models
//! the adaptive bound is also calibrated from it.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{SharpNull, StudyData, Unit};
use crate::density::{DensityEstimator, LinearGaussian};
use crate::error::{Error, Result};
use crate::matcher::{apply_caliper, mahalanobis, optimal_pair_match, CaliperRule, MatchedDesign};
use crate::math::{abs, exp, quantile};
use crate::oracle::{GaussianTruth, Propensity, TrueModel};
use crate::rng::{SeedSpec, StreamPurpose};
use crate::sensearch::pipeline::{
    analyze, invert_tests, ConfidenceInterval, DensitySource, PipelineConfig,
};
use crate::sensearch::{Alternative, BiasMode, Method, SensitivitySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelId {
    /// No confounding, no effect.
    Ignorable,
    /// Logit confounding through `y0`, no effect.
    Confounded,
    /// As `Ignorable` with a unit effect.
    IgnorableShift,
    /// As `Confounded` with a unit effect.
    ConfoundedShift,
}

impl ModelId {
    pub const ALL: [Self; 4] = [
        Self::Ignorable,
        Self::Confounded,
        Self::IgnorableShift,
        Self::ConfoundedShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ignorable => "ignorable",
            Self::Confounded => "confounded",
            Self::IgnorableShift => "ignorable-shift",
            Self::ConfoundedShift => "confounded-shift",
        }
    }

    pub fn effect(self) -> f64 {
        match self {
            Self::Ignorable | Self::Confounded => 0.0,
            Self::IgnorableShift | Self::ConfoundedShift => 1.0,
        }
    }

    pub fn confounded(self) -> bool {
        matches!(self, Self::Confounded | Self::ConfoundedShift)
    }

    pub fn truth(self) -> GaussianTruth {
        if self.confounded() {
            GaussianTruth {
                density: LinearGaussian::new(0.0, vec![2.0], 0.2).expect("valid constants"),
                propensity: Propensity::Logit {
                    intercept: -1.0,
                    coef: vec![0.5],
                    outcome_coef: 0.5,
                },
            }
        } else {
            GaussianTruth {
                density: LinearGaussian::new(0.0, vec![1.0], 0.2).expect("valid constants"),
                propensity: Propensity::Linear {
                    intercept: 0.2,
                    coef: vec![0.5],
                },
            }
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown model '{s}'; expected one of ignorable, confounded, ignorable-shift, confounded-shift")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenModel {
    pub id: ModelId,
    pub n: usize,
}

/// The generating truth of one sample. Never passed to estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub y0: Vec<f64>,
    pub model: GaussianTruth,
    pub effect: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub data: StudyData,
    pub truth: Truth,
}

/// `n` i.i.d. draws: `X ~ U(0, 1)`, `Y(0) | X` Gaussian, `Z` from the
/// propensity at `(X, Y(0))`, `Y = Y(0) + effect * Z`.
pub fn generate(model: GenModel, seed: SeedSpec) -> Result<Generated> {
    let truth = model.id.truth();
    let effect = model.id.effect();
    let noise =
        Normal::new(0.0, truth.density.sd).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = seed.rng();
    let mut units = Vec::with_capacity(model.n);
    let mut y0 = Vec::with_capacity(model.n);
    for _ in 0..model.n {
        let x = vec![rng.random::<f64>()];
        let y = truth.density.mean(&x) + noise.sample(&mut rng);
        let z = rng.random::<f64>() < truth.propensity(&x, y);
        units.push(Unit::new(x, if z { y + effect } else { y }, z));
        y0.push(y);
    }
    Ok(Generated {
        data: StudyData::new(units)?,
        truth: Truth {
            y0,
            model: truth,
            effect,
        },
    })
}

/// Matching quality, confounding strength and bias of one pair, as logs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairBias {
    pub log_r: f64,
    pub log_r_m: f64,
    pub log_r_u: f64,
}

impl PairBias {
    pub fn gamma(&self) -> f64 {
        exp(abs(self.log_r))
    }

    pub fn gamma_u(&self) -> f64 {
        exp(abs(self.log_r_u))
    }
}

/// Per-pair biases under the true model and true control outcomes.
pub fn true_bias_stats(
    design: &MatchedDesign,
    data: &StudyData,
    truth: &Truth,
) -> Result<Vec<PairBias>> {
    if !design.is_pair_design() {
        return Err(Error::InvalidDesign(
            "bias statistics need a pair design".into(),
        ));
    }
    let m = &truth.model;
    Ok(design
        .pairs()
        .map(|(t, c)| {
            let (x1, x2) = (data.covariates(t), data.covariates(c));
            let (a, b) = (truth.y0[t], truth.y0[c]);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let log_r_m = (m.log_density(hi, x1) - m.log_density(hi, x2))
                - (m.log_density(lo, x1) - m.log_density(lo, x2));
            let log_r_u = (m.log_propensity(x1, hi, true) - m.log_propensity(x1, lo, true))
                + (m.log_propensity(x2, lo, false) - m.log_propensity(x2, hi, false));
            PairBias {
                log_r: log_r_m + log_r_u,
                log_r_m,
                log_r_u,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasSummary {
    pub pairs: usize,
    pub max_gamma: f64,
    pub q80_gamma: f64,
    pub median_gamma: f64,
    pub max_gamma_u: f64,
}

pub fn summarize_bias(stats: &[PairBias]) -> Result<BiasSummary> {
    if stats.is_empty() {
        return Err(Error::EmptyDesign);
    }
    let gammas: Vec<f64> = stats.iter().map(PairBias::gamma).collect();
    let q = |level| quantile(&gammas, level).expect("non-empty");
    Ok(BiasSummary {
        pairs: stats.len(),
        max_gamma: gammas.iter().copied().fold(1.0, f64::max),
        q80_gamma: q(0.8),
        median_gamma: q(0.5),
        max_gamma_u: stats.iter().map(PairBias::gamma_u).fold(1.0, f64::max),
    })
}

/// Serialized as its display name, e.g. `"adapt.ker-relaxed(1.05)"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Pipeline {
    Rand,
    SenMax,
    SenQuantile,
    AdaptTrue,
    AdaptPara,
    AdaptKer,
    AdaptKerRelaxed { factor: f64 },
}

impl Pipeline {
    pub const NAMES: &'static str = "rand, sen-max, sen-quantile, adapt.true, adapt.para, adapt.ker, adapt.ker-relaxed(<factor>)";

    /// The defaults reported for every simulation run.
    pub fn standard() -> Vec<Self> {
        vec![
            Self::Rand,
            Self::SenMax,
            Self::SenQuantile,
            Self::AdaptTrue,
            Self::AdaptPara,
            Self::AdaptKer,
            Self::AdaptKerRelaxed { factor: 1.05 },
            Self::AdaptKerRelaxed { factor: 1.1 },
        ]
    }

    pub fn reads_truth(self) -> bool {
        matches!(self, Self::SenMax | Self::SenQuantile | Self::AdaptTrue)
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Rand => f.write_str("rand"),
            Self::SenMax => f.write_str("sen-max"),
            Self::SenQuantile => f.write_str("sen-quantile"),
            Self::AdaptTrue => f.write_str("adapt.true"),
            Self::AdaptPara => f.write_str("adapt.para"),
            Self::AdaptKer => f.write_str("adapt.ker"),
            Self::AdaptKerRelaxed { factor } => write!(f, "adapt.ker-relaxed({factor})"),
        }
    }
}

impl From<Pipeline> for String {
    fn from(p: Pipeline) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for Pipeline {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || {
            Error::InvalidSpec(format!(
                "unknown pipeline '{s}'; expected one of {}",
                Self::NAMES
            ))
        };
        Ok(match s {
            "rand" => Self::Rand,
            "sen-max" => Self::SenMax,
            "sen-quantile" => Self::SenQuantile,
            "adapt.true" => Self::AdaptTrue,
            "adapt.para" => Self::AdaptPara,
            "adapt.ker" => Self::AdaptKer,
            _ => {
                let inner = s
                    .strip_prefix("adapt.ker-relaxed(")
                    .or_else(|| s.strip_prefix("adapt.ker("))
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(unknown)?;
                let factor: f64 = inner.parse().map_err(|_| unknown())?;
                if !(factor >= 1.0 && factor.is_finite()) {
                    return Err(Error::InvalidSpec(format!(
                        "relaxation factor must be >= 1, got {factor}"
                    )));
                }
                Self::AdaptKerRelaxed { factor }
            }
        })
    }
}

/// Settings shared by every replication of a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub model: GenModel,
    pub external_n: usize,
    pub caliper: Option<CaliperRule>,
    pub method: Method,
}

impl SimConfig {
    pub fn new(id: ModelId) -> Self {
        Self {
            model: GenModel { id, n: 1000 },
            external_n: 1000,
            caliper: None,
            method: Method::Gaussian,
        }
    }
}

/// One matched replication with its hidden truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub index: u64,
    pub data: StudyData,
    pub external: StudyData,
    pub design: MatchedDesign,
    pub truth: Truth,
    pub bias: BiasSummary,
}

impl Replication {
    /// Adaptive bound before relaxation: 1 without confounding, otherwise
    /// the largest true confounding strength among the pairs.
    pub fn adaptive_base(&self, id: ModelId) -> f64 {
        if id.confounded() {
            self.bias.max_gamma_u
        } else {
            1.0
        }
    }
}

pub fn prepare_replication(config: &SimConfig, base_seed: u64, index: u64) -> Result<Replication> {
    let study = generate(
        config.model,
        SeedSpec::for_replication(base_seed, index, StreamPurpose::Study),
    )?;
    let external = generate(
        GenModel {
            id: config.model.id,
            n: config.external_n,
        },
        SeedSpec::for_replication(base_seed, index, StreamPurpose::External),
    )?;
    let distances = mahalanobis(&study.data)?;
    let mut design = optimal_pair_match(&study.data, &distances)?;
    if let Some(rule) = &config.caliper {
        design = apply_caliper(&design, &study.data, rule)?;
    }
    if design.is_empty() {
        return Err(Error::EmptyDesign);
    }
    let bias = summarize_bias(&true_bias_stats(&design, &study.data, &study.truth)?)?;
    Ok(Replication {
        index,
        data: study.data,
        external: external.data,
        design,
        truth: study.truth,
        bias,
    })
}

/// Analysis settings of a named pipeline on one replication.
pub fn pipeline_config(
    rep: &Replication,
    id: ModelId,
    pipeline: Pipeline,
    method: Method,
) -> Result<PipelineConfig> {
    let spec = |mode| SensitivitySpec::new(mode, Alternative::Upper, method);
    let base = rep.adaptive_base(id);
    let kernel = DensitySource::External {
        estimator: DensityEstimator::Kernel { bandwidths: None },
    };
    let (mode, density) = match pipeline {
        Pipeline::Rand => (BiasMode::Uniform { gamma: 1.0 }, DensitySource::None),
        Pipeline::SenMax => (
            BiasMode::Uniform {
                gamma: rep.bias.max_gamma,
            },
            DensitySource::None,
        ),
        Pipeline::SenQuantile => (
            BiasMode::Quantile {
                level: 0.8,
                lambda: rep.bias.q80_gamma,
            },
            DensitySource::None,
        ),
        Pipeline::AdaptTrue => (
            BiasMode::Adaptive { lambda: base },
            DensitySource::Known {
                model: rep.truth.model.density.clone(),
            },
        ),
        Pipeline::AdaptPara => (
            BiasMode::Adaptive { lambda: base },
            DensitySource::External {
                estimator: DensityEstimator::Parametric,
            },
        ),
        Pipeline::AdaptKer => (BiasMode::Adaptive { lambda: base }, kernel),
        Pipeline::AdaptKerRelaxed { factor } => (
            BiasMode::Adaptive {
                lambda: factor * base,
            },
            kernel,
        ),
    };
    let mut config = PipelineConfig::new(spec(mode)?);
    config.density = density;
    Ok(config)
}

/// Upper one-sided p-value of a named pipeline for `H_c`.
pub fn run_pipeline(
    rep: &Replication,
    id: ModelId,
    pipeline: Pipeline,
    method: Method,
    null: SharpNull,
) -> Result<f64> {
    let config = pipeline_config(rep, id, pipeline, method)?;
    Ok(analyze(&rep.data, &rep.design, Some(&rep.external), &config, null)?.p_value)
}

/// Confidence interval by two-sided inversion of a named pipeline.
pub fn run_inversion(
    rep: &Replication,
    id: ModelId,
    pipeline: Pipeline,
    method: Method,
    alpha: f64,
    grid: &[f64],
) -> Result<ConfidenceInterval> {
    let config = pipeline_config(rep, id, pipeline, method)?;
    invert_tests(
        &rep.data,
        &rep.design,
        Some(&rep.external),
        &config,
        alpha,
        grid,
    )
}

/// One row of a replication table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueRow {
    pub rep: u64,
    pub pipeline: String,
    pub p: Option<f64>,
    pub error: Option<String>,
}

/// All requested pipelines on one replication; failures become rows with
/// an error message rather than aborting the run.
pub fn replication_rows(
    config: &SimConfig,
    base_seed: u64,
    index: u64,
    pipelines: &[Pipeline],
    null: SharpNull,
) -> (Option<BiasSummary>, Vec<PValueRow>) {
    let row = |pipeline: &Pipeline, result: Result<f64>| PValueRow {
        rep: index,
        pipeline: pipeline.to_string(),
        p: result.as_ref().ok().copied(),
        error: result.err().map(|e| e.to_string()),
    };
    match prepare_replication(config, base_seed, index) {
        Ok(rep) => {
            let rows = pipelines
                .iter()
                .map(|p| {
                    row(
                        p,
                        run_pipeline(&rep, config.model.id, *p, config.method, null),
                    )
                })
                .collect();
            (Some(rep.bias), rows)
        }
        Err(e) => (
            None,
            pipelines.iter().map(|p| row(p, Err(e.clone()))).collect(),
        ),
    }
}

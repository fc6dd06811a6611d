//! Conditional densities of control outcomes given covariates, and the
//! matching-quality quantities built from them: pair ratios `R_m` and
//! set-level rank weights `p_m`.
//!
//! Everything is evaluated on the log scale. Densities are floored at 1e-300
//! so every ratio stays finite; floor hits are reported as diagnostics.

pub mod permanent;

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{impute_controls, ImputedControls, SharpNull, StudyData};
use crate::error::{Error, Result};
use crate::matcher::MatchedDesign;
use crate::math::{abs, exp, ln, log_sum_exp, normal_log_pdf, pow, sample_sd, sqrt};

/// `ln(1e-300)`.
pub const LOG_DENSITY_FLOOR: f64 = -690.775_527_898_213_7;
/// Largest set size for exact rank weights.
pub const MAX_SET_SIZE: usize = 10;
/// Residual sd used when a parametric fit is (near) perfect.
pub const SIGMA_FLOOR: f64 = 1e-8;
/// Pair ratios are clamped to `exp(+-LOG_RATIO_CLAMP)`.
pub const LOG_RATIO_CLAMP: f64 = 700.0;

pub trait ConditionalDensity {
    /// `log p(y | x)`, before flooring.
    fn log_density(&self, y: f64, x: &[f64]) -> f64;

    /// `log p(y | x)` for several `y` at one `x`.
    fn log_density_many(&self, ys: &[f64], x: &[f64]) -> Vec<f64> {
        ys.iter().map(|&y| self.log_density(y, x)).collect()
    }
}

/// `Y | X = x ~ N(intercept + coef . x, sd^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussian {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub sd: f64,
}

impl LinearGaussian {
    pub fn new(intercept: f64, coef: Vec<f64>, sd: f64) -> Result<Self> {
        if !(sd > 0.0 && sd.is_finite())
            || !intercept.is_finite()
            || coef.iter().any(|c| !c.is_finite())
        {
            return Err(Error::InvalidInput(
                "linear gaussian needs finite coefficients and sd > 0".into(),
            ));
        }
        Ok(Self {
            intercept,
            coef,
            sd,
        })
    }

    pub fn mean(&self, x: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }
}

impl ConditionalDensity for LinearGaussian {
    fn log_density(&self, y: f64, x: &[f64]) -> f64 {
        normal_log_pdf(y, self.mean(x), self.sd)
    }
}

/// Product-Gaussian conditional kernel estimate
/// `sum_l K_hx(x - X_l) K_hy(y - Y_l) / sum_l K_hx(x - X_l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDensity {
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<f64>,
    pub bandwidth_x: Vec<f64>,
    pub bandwidth_y: f64,
}

impl KernelDensity {
    fn log_x_weights(&self, x: &[f64]) -> Vec<f64> {
        self.train_x
            .iter()
            .map(|xl| {
                -0.5 * xl
                    .iter()
                    .zip(x)
                    .zip(&self.bandwidth_x)
                    .map(|((a, b), h)| {
                        let u = (b - a) / h;
                        u * u
                    })
                    .sum::<f64>()
            })
            .collect()
    }

    fn log_denominator(&self, log_w: &[f64]) -> f64 {
        let floor = ln(1e-12 * self.train_y.len() as f64);
        log_sum_exp(log_w).max(floor)
    }
}

impl ConditionalDensity for KernelDensity {
    fn log_density(&self, y: f64, x: &[f64]) -> f64 {
        self.log_density_many(&[y], x)[0]
    }

    fn log_density_many(&self, ys: &[f64], x: &[f64]) -> Vec<f64> {
        let log_w = self.log_x_weights(x);
        let den = self.log_denominator(&log_w);
        let mut terms = vec![0.0; log_w.len()];
        ys.iter()
            .map(|&y| {
                for ((t, w), yl) in terms.iter_mut().zip(&log_w).zip(&self.train_y) {
                    *t = w + normal_log_pdf(y, *yl, self.bandwidth_y);
                }
                log_sum_exp(&terms) - den
            })
            .collect()
    }
}

/// A fitted or known conditional density model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensityModel {
    ParametricGaussian {
        model: LinearGaussian,
        /// The residual sd hit [`SIGMA_FLOOR`].
        sigma_floored: bool,
    },
    Kernel(KernelDensity),
    TrueModel(LinearGaussian),
}

impl ConditionalDensity for DensityModel {
    fn log_density(&self, y: f64, x: &[f64]) -> f64 {
        match self {
            Self::ParametricGaussian { model, .. } | Self::TrueModel(model) => {
                model.log_density(y, x)
            }
            Self::Kernel(k) => k.log_density(y, x),
        }
    }

    fn log_density_many(&self, ys: &[f64], x: &[f64]) -> Vec<f64> {
        match self {
            Self::ParametricGaussian { model, .. } | Self::TrueModel(model) => {
                model.log_density_many(ys, x)
            }
            Self::Kernel(k) => k.log_density_many(ys, x),
        }
    }
}

/// Which estimator to fit on external data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityEstimator {
    Parametric,
    Kernel {
        /// Covariate bandwidths and outcome bandwidth; Silverman's rule if absent.
        bandwidths: Option<(Vec<f64>, f64)>,
    },
}

impl DensityEstimator {
    pub fn fit(&self, external: &StudyData, null: SharpNull) -> Result<DensityModel> {
        match self {
            Self::Parametric => fit_parametric(external, null),
            Self::Kernel { bandwidths } => fit_kernel(external, null, bandwidths.clone()),
        }
    }
}

/// Ordinary least squares with intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub rss: f64,
    pub n: usize,
}

impl LinearFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    /// `y0 - f(x)` for every unit of `data`.
    pub fn residualize(&self, data: &StudyData, y0: &ImputedControls) -> ImputedControls {
        ImputedControls {
            y0: (0..data.len())
                .map(|i| y0.get(i) - self.predict(data.covariates(i)))
                .collect(),
        }
    }
}

fn ols(data: &StudyData, y: &[f64]) -> Result<LinearFit> {
    let n = data.len();
    let d = data.dim();
    if n <= d + 1 {
        return Err(Error::InvalidInput(
            "too few observations for regression".into(),
        ));
    }
    let x = DMatrix::from_fn(n, d + 1, |r, c| {
        if c == 0 {
            1.0
        } else {
            data.covariates(r)[c - 1]
        }
    });
    let yv = DVector::from_column_slice(y);
    let qr = x.clone().qr();
    let r = qr.r();
    let max_diag = r.diagonal().iter().fold(0.0f64, |m, v| m.max(abs(*v)));
    if r.diagonal()
        .iter()
        .any(|v| abs(*v) <= 1e-10 * max_diag.max(1e-300))
    {
        return Err(Error::RankDeficient);
    }
    let qty = qr.q().transpose() * &yv;
    let beta = r.solve_upper_triangular(&qty).ok_or(Error::RankDeficient)?;
    let resid = &yv - &x * &beta;
    Ok(LinearFit {
        intercept: beta[0],
        coef: beta.iter().skip(1).copied().collect(),
        rss: resid.norm_squared(),
        n,
    })
}

/// Regression adjustment fitted on external data: `f(x) = b0 + b . x`.
pub fn fit_adjustment(external: &StudyData, null: SharpNull) -> Result<LinearFit> {
    let y0 = impute_controls(external, null);
    ols(external, &y0.y0)
}

/// Gaussian linear model fitted by least squares on imputed external outcomes,
/// with `sigma^2 = RSS / (n - d - 1)`.
pub fn fit_parametric(external: &StudyData, null: SharpNull) -> Result<DensityModel> {
    if external.len() <= external.dim() + 2 {
        return Err(Error::InvalidInput(
            "external sample must exceed d + 2 units".into(),
        ));
    }
    let fit = fit_adjustment(external, null)?;
    let dof = (external.len() - external.dim() - 1) as f64;
    let sigma = sqrt((fit.rss / dof).max(0.0));
    let sigma_floored = !(sigma > SIGMA_FLOOR);
    let model = LinearGaussian {
        intercept: fit.intercept,
        coef: fit.coef,
        sd: if sigma_floored { SIGMA_FLOOR } else { sigma },
    };
    Ok(DensityModel::ParametricGaussian {
        model,
        sigma_floored,
    })
}

/// Silverman's rule of thumb `1.06 * sd * n^(-1/5)`.
pub fn silverman(values: &[f64]) -> f64 {
    1.06 * sample_sd(values) * pow(values.len() as f64, -0.2)
}

/// Conditional kernel estimate on imputed external outcomes.
pub fn fit_kernel(
    external: &StudyData,
    null: SharpNull,
    bandwidths: Option<(Vec<f64>, f64)>,
) -> Result<DensityModel> {
    if external.len() < 10 {
        return Err(Error::InvalidInput(
            "kernel estimation needs at least 10 external units".into(),
        ));
    }
    let y0 = impute_controls(external, null).y0;
    let (bandwidth_x, bandwidth_y) = match bandwidths {
        Some((bx, by)) => {
            if bx.len() != external.dim() {
                return Err(Error::InvalidInput(
                    "bandwidth vector has the wrong dimension".into(),
                ));
            }
            (bx, by)
        }
        None => {
            let bx = (0..external.dim())
                .map(|k| {
                    let col: Vec<f64> = external.units().iter().map(|u| u.covariates[k]).collect();
                    silverman(&col)
                })
                .collect();
            (bx, silverman(&y0))
        }
    };
    if !(bandwidth_y > 0.0) || bandwidth_x.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::InvalidInput(
            "kernel bandwidths must be positive".into(),
        ));
    }
    Ok(DensityModel::Kernel(KernelDensity {
        train_x: external
            .units()
            .iter()
            .map(|u| u.covariates.clone())
            .collect(),
        train_y: y0,
        bandwidth_x,
        bandwidth_y,
    }))
}

fn floored(v: f64, hit: &mut bool) -> f64 {
    if v < LOG_DENSITY_FLOOR || v.is_nan() {
        *hit = true;
        LOG_DENSITY_FLOOR
    } else {
        v
    }
}

/// Estimated matching quality `R_m` of every pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairQuality {
    pub r_m: Vec<f64>,
    pub log_r_m: Vec<f64>,
    /// A density evaluation hit the floor or the ratio was clamped.
    pub floored: Vec<bool>,
}

/// `log R_m` of one pair from lead covariates `x1`, partner covariates `x2`
/// and the two outcomes in either order.
pub fn log_pair_ratio(
    model: &dyn ConditionalDensity,
    x1: &[f64],
    x2: &[f64],
    ya: f64,
    yb: f64,
) -> (f64, bool) {
    let (lo, hi) = if yb < ya { (yb, ya) } else { (ya, yb) };
    let mut hit = false;
    let l1 = model.log_density_many(&[lo, hi], x1);
    let l2 = model.log_density_many(&[lo, hi], x2);
    let a = floored(l1[1], &mut hit) - floored(l2[1], &mut hit);
    let b = floored(l1[0], &mut hit) - floored(l2[0], &mut hit);
    let r = a - b;
    if abs(r) > LOG_RATIO_CLAMP {
        (r.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP), true)
    } else {
        (r, hit)
    }
}

pub fn pair_quality(
    design: &MatchedDesign,
    data: &StudyData,
    y0: &ImputedControls,
    model: &dyn ConditionalDensity,
) -> Result<PairQuality> {
    if !design.is_pair_design() {
        return Err(Error::InvalidDesign(
            "pair quality needs a pair design".into(),
        ));
    }
    let mut out = PairQuality {
        r_m: Vec::with_capacity(design.len()),
        log_r_m: Vec::with_capacity(design.len()),
        floored: Vec::with_capacity(design.len()),
    };
    for (a, b) in design.pairs() {
        let (lr, hit) = log_pair_ratio(
            model,
            data.covariates(a),
            data.covariates(b),
            y0.get(a),
            y0.get(b),
        );
        out.r_m.push(exp(lr));
        out.log_r_m.push(lr);
        out.floored.push(hit);
    }
    Ok(out)
}

/// Rank weights `p_m` of every set, aligned with ascending `y0` order and
/// normalized to sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetWeights {
    pub weights: Vec<Vec<f64>>,
    pub floored: Vec<bool>,
}

impl SetWeights {
    /// Weights `(1, R)` normalized, one pair per entry.
    pub fn from_pair_quality(quality: &PairQuality) -> Self {
        let weights = quality
            .log_r_m
            .iter()
            .map(|&lr| {
                let lw = [0.0, lr];
                let z = log_sum_exp(&lw);
                vec![exp(-z), exp(lr - z)]
            })
            .collect();
        Self {
            weights,
            floored: quality.floored.clone(),
        }
    }

    pub fn uniform(sizes: &[usize]) -> Self {
        Self {
            weights: sizes.iter().map(|&n| vec![1.0 / n as f64; n]).collect(),
            floored: vec![false; sizes.len()],
        }
    }
}

/// Weights of one set from the log-density matrix `log_d[k][l]`
/// (row `k` = member with row 0 the lead unit, column `l` = sorted rank).
pub fn weights_from_log_matrix(log_d: &[Vec<f64>]) -> (Vec<f64>, bool) {
    let n = log_d.len();
    let mut m: Vec<Vec<f64>> = log_d.to_vec();
    // Row and column rescaling multiplies every term by the same factor,
    // so the normalized weights are unchanged.
    for row in m.iter_mut() {
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v -= top);
    }
    for c in 0..n {
        let top = m.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
        m.iter_mut().for_each(|r| r[c] -= top);
    }
    let lin: Vec<Vec<f64>> = m
        .iter()
        .map(|r| r.iter().map(|&v| exp(v)).collect())
        .collect();
    let minors = permanent::leave_one_out(&lin);
    let terms: Vec<f64> = (0..n).map(|j| lin[0][j] * minors[j]).collect();
    let top = terms.iter().copied().fold(0.0f64, f64::max);
    let mut hit = false;
    let floor = top * 1e-300;
    let clamped: Vec<f64> = terms
        .iter()
        .map(|&t| {
            if t > floor {
                t
            } else {
                hit = true;
                floor.max(f64::MIN_POSITIVE)
            }
        })
        .collect();
    let total: f64 = clamped.iter().sum();
    (clamped.iter().map(|t| t / total).collect(), hit)
}

pub fn set_weights(
    design: &MatchedDesign,
    data: &StudyData,
    y0: &ImputedControls,
    model: &dyn ConditionalDensity,
) -> Result<SetWeights> {
    let mut out = SetWeights {
        weights: Vec::with_capacity(design.len()),
        floored: Vec::with_capacity(design.len()),
    };
    for (i, set) in design.sets.iter().enumerate() {
        let n = set.len();
        if n > MAX_SET_SIZE {
            return Err(Error::SetTooLarge {
                set: i,
                size: n,
                max: MAX_SET_SIZE,
            });
        }
        let mut sorted: Vec<f64> = set.members.iter().map(|&m| y0.get(m)).collect();
        sorted.sort_by(f64::total_cmp);
        let mut hit = false;
        let log_d: Vec<Vec<f64>> = set
            .members
            .iter()
            .map(|&m| {
                model
                    .log_density_many(&sorted, data.covariates(m))
                    .into_iter()
                    .map(|v| floored(v, &mut hit))
                    .collect()
            })
            .collect();
        let (w, h) = weights_from_log_matrix(&log_d);
        out.weights.push(w);
        out.floored.push(hit || h);
    }
    Ok(out)
}

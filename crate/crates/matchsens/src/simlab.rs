//! Replicated simulation runs over the synthetic models.
//!
//! Replications run on a rayon pool. Every replication draws from its own
//! seed streams, and results are collected in replication order, so the
//! output does not depend on the thread count.

use std::collections::BTreeMap;
use std::path::Path;

use matchsens_core::data::SharpNull;
use matchsens_core::matcher::CaliperRule;
use matchsens_core::sensearch::pipeline::linear_grid;
use matchsens_core::sensearch::Method;
use matchsens_core::sim::{
    prepare_replication, replication_rows, run_inversion, GenModel, ModelId, PValueRow, Pipeline,
    SimConfig,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::{self, IoError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRequest {
    pub model: ModelId,
    pub n: usize,
    pub external_n: usize,
    pub caliper: bool,
    pub pipelines: Vec<Pipeline>,
    pub reps: u64,
    pub seed: u64,
    pub method: Method,
    pub null_effect: f64,
}

impl SimulationRequest {
    pub fn new(model: ModelId, pipelines: Vec<Pipeline>, reps: u64, seed: u64) -> Self {
        Self {
            model,
            n: 1000,
            external_n: 1000,
            caliper: false,
            pipelines,
            reps,
            seed,
            method: Method::Gaussian,
            null_effect: 0.0,
        }
    }

    pub fn config(&self) -> SimConfig {
        SimConfig {
            model: GenModel {
                id: self.model,
                n: self.n,
            },
            external_n: self.external_n,
            caliper: self.caliper.then(CaliperRule::default),
            method: self.method,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRequest {
    pub pipeline: Pipeline,
    pub alpha: f64,
    pub grid_start: f64,
    pub grid_stop: f64,
    pub grid_step: f64,
}

impl CoverageRequest {
    pub fn grid(&self) -> Vec<f64> {
        linear_grid(self.grid_start, self.grid_stop, self.grid_step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub rep: u64,
    pub pairs: Option<usize>,
    pub max_gamma: Option<f64>,
    pub q80_gamma: Option<f64>,
    pub median_gamma: Option<f64>,
    pub max_gamma_u: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub rep: u64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub covered: bool,
    pub empty: bool,
    pub lower_open: bool,
    pub upper_open: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub pipeline: String,
    pub ok: usize,
    pub failed: usize,
    pub rejection_rate_05: Option<f64>,
    pub ks_uniform: Option<f64>,
    pub median_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasOverview {
    pub median_q80_gamma: Option<f64>,
    pub min_max_gamma: Option<f64>,
    pub median_max_gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub pipeline: String,
    pub reps: usize,
    pub covered: usize,
    pub empty: usize,
    pub failed: usize,
    pub coverage: f64,
    /// Binomial standard error of `coverage`.
    pub standard_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub request: SimulationRequest,
    pub pipelines: Vec<PipelineSummary>,
    pub bias: BiasOverview,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    pub rows: Vec<PValueRow>,
    pub bias: Vec<BiasRow>,
    pub coverage: Option<Vec<CoverageRow>>,
    pub summary: SimSummary,
}

/// Run `f` on a pool with `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T, rayon::ThreadPoolBuildError> {
    match threads {
        Some(k) => Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()?
            .install(f)),
        None => Ok(f()),
    }
}

/// Kolmogorov distance between the empirical law of `ps` and `U(0, 1)`.
pub fn ks_uniform(ps: &[f64]) -> Option<f64> {
    if ps.is_empty() {
        return None;
    }
    let mut sorted = ps.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Some(
        sorted
            .iter()
            .enumerate()
            .map(|(i, p)| ((i + 1) as f64 / n - p).max(p - i as f64 / n))
            .fold(0.0, f64::max),
    )
}

fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    matchsens_core::math::median(&mut v)
}

fn summarize_pipeline(name: String, rows: &[&PValueRow]) -> PipelineSummary {
    let ps: Vec<f64> = rows.iter().filter_map(|r| r.p).collect();
    let ok = ps.len();
    PipelineSummary {
        pipeline: name,
        ok,
        failed: rows.len() - ok,
        rejection_rate_05: (ok > 0)
            .then(|| ps.iter().filter(|p| **p < 0.05).count() as f64 / ok as f64),
        ks_uniform: ks_uniform(&ps),
        median_p: median(&ps),
    }
}

fn summarize_coverage(pipeline: Pipeline, rows: &[CoverageRow]) -> CoverageSummary {
    let reps = rows.len();
    let covered = rows.iter().filter(|r| r.covered).count();
    let coverage = if reps > 0 {
        covered as f64 / reps as f64
    } else {
        0.0
    };
    CoverageSummary {
        pipeline: pipeline.to_string(),
        reps,
        covered,
        empty: rows.iter().filter(|r| r.empty).count(),
        failed: rows.iter().filter(|r| r.error.is_some()).count(),
        coverage,
        standard_error: if reps > 0 {
            (coverage * (1.0 - coverage) / reps as f64).sqrt()
        } else {
            0.0
        },
    }
}

fn coverage_row(request: &SimulationRequest, cov: &CoverageRequest, rep: u64) -> CoverageRow {
    let config = request.config();
    let result = prepare_replication(&config, request.seed, rep).and_then(|r| {
        run_inversion(
            &r,
            request.model,
            cov.pipeline,
            request.method,
            cov.alpha,
            &cov.grid(),
        )
    });
    match result {
        Ok(ci) => CoverageRow {
            rep,
            lower: ci.lower,
            upper: ci.upper,
            covered: ci.covers(request.model.effect()),
            empty: ci.empty,
            lower_open: ci.lower_open,
            upper_open: ci.upper_open,
            error: None,
        },
        // failures count as non-covering
        Err(e) => CoverageRow {
            rep,
            lower: None,
            upper: None,
            covered: false,
            empty: false,
            lower_open: false,
            upper_open: false,
            error: Some(e.to_string()),
        },
    }
}

/// Run the replications of `request` and, if asked, the inversion study on
/// the same replications.
pub fn run_simulation(
    request: &SimulationRequest,
    coverage: Option<&CoverageRequest>,
) -> SimulationOutput {
    let config = request.config();
    let null = SharpNull {
        effect: request.null_effect,
    };
    let per_rep: Vec<_> = (0..request.reps)
        .into_par_iter()
        .map(|rep| {
            let (bias, rows) =
                replication_rows(&config, request.seed, rep, &request.pipelines, null);
            let bias_row = BiasRow {
                rep,
                pairs: bias.map(|b| b.pairs),
                max_gamma: bias.map(|b| b.max_gamma),
                q80_gamma: bias.map(|b| b.q80_gamma),
                median_gamma: bias.map(|b| b.median_gamma),
                max_gamma_u: bias.map(|b| b.max_gamma_u),
            };
            (bias_row, rows)
        })
        .collect();
    let coverage_rows: Option<Vec<CoverageRow>> = coverage.map(|cov| {
        (0..request.reps)
            .into_par_iter()
            .map(|rep| coverage_row(request, cov, rep))
            .collect()
    });

    let mut bias = Vec::with_capacity(per_rep.len());
    let mut rows = Vec::new();
    for (b, r) in per_rep {
        bias.push(b);
        rows.extend(r);
    }
    let mut grouped: BTreeMap<usize, Vec<&PValueRow>> = BTreeMap::new();
    for r in &rows {
        let k = request
            .pipelines
            .iter()
            .position(|p| p.to_string() == r.pipeline)
            .expect("known pipeline");
        grouped.entry(k).or_default().push(r);
    }
    let pipelines = grouped
        .into_iter()
        .map(|(k, rs)| summarize_pipeline(request.pipelines[k].to_string(), &rs))
        .collect();
    let q80: Vec<f64> = bias.iter().filter_map(|b| b.q80_gamma).collect();
    let maxes: Vec<f64> = bias.iter().filter_map(|b| b.max_gamma).collect();
    let summary = SimSummary {
        request: request.clone(),
        pipelines,
        bias: BiasOverview {
            median_q80_gamma: median(&q80),
            min_max_gamma: maxes.iter().copied().reduce(f64::min),
            median_max_gamma: median(&maxes),
        },
        coverage: coverage
            .zip(coverage_rows.as_ref())
            .map(|(c, r)| summarize_coverage(c.pipeline, r)),
    };
    SimulationOutput {
        rows,
        bias,
        coverage: coverage_rows,
        summary,
    }
}

#[derive(Serialize)]
struct ColumnDoc {
    file: &'static str,
    columns: Vec<(&'static str, &'static str)>,
}

fn manifest(with_coverage: bool) -> Vec<ColumnDoc> {
    let mut docs = vec![
        ColumnDoc {
            file: "pvalues.csv",
            columns: vec![
                ("rep", "replication index, 0-based"),
                ("pipeline", "analysis name"),
                ("p", "upper one-sided p-value; empty if the analysis failed"),
                ("error", "failure message, empty on success"),
            ],
        },
        ColumnDoc {
            file: "bias_stats.csv",
            columns: vec![
                ("rep", "replication index, 0-based"),
                ("pairs", "matched pairs analyzed"),
                ("max_gamma", "largest true pair bias"),
                ("q80_gamma", "80% quantile of true pair biases"),
                ("median_gamma", "median true pair bias"),
                ("max_gamma_u", "largest true confounding strength"),
            ],
        },
        ColumnDoc {
            file: "summary.json",
            columns: vec![(
                "*",
                "request echo, per-pipeline rejection rates, KS distances and bias overview",
            )],
        },
    ];
    if with_coverage {
        docs.push(ColumnDoc {
            file: "coverage.csv",
            columns: vec![
                ("rep", "replication index, 0-based"),
                ("lower", "smallest accepted grid point"),
                ("upper", "largest accepted grid point"),
                ("covered", "true effect lies in [lower, upper]"),
                ("empty", "no grid point accepted"),
                ("lower_open", "acceptance reaches the first grid point"),
                ("upper_open", "acceptance reaches the last grid point"),
                ("error", "failure message; failures count as not covered"),
            ],
        });
    }
    docs
}

fn gnuplot_script(pipelines: &[Pipeline], reps: u64) -> String {
    let names: Vec<String> = pipelines.iter().map(ToString::to_string).collect();
    format!(
        "# empirical CDFs of p-values per pipeline; run: gnuplot -p ecdf.gp\n\
         set datafile separator ','\n\
         set key left top\n\
         set xrange [0:1]\n\
         set yrange [0:1]\n\
         set xlabel 'p-value'\n\
         set ylabel 'empirical CDF'\n\
         plot x title 'uniform' dashtype 2, \\\n\
         \x20    for [name in \"{}\"] 'pvalues.csv' skip 1 using (strcol(2) eq name ? $3 : 1/0):(1.0/{reps}) smooth cumulative title name\n",
        names.join(" ")
    )
}

pub fn write_outputs(dir: &Path, output: &SimulationOutput) -> Result<(), IoError> {
    io::ensure_dir(dir)?;
    io::write_rows(&dir.join("pvalues.csv"), &output.rows)?;
    io::write_rows(&dir.join("bias_stats.csv"), &output.bias)?;
    if let Some(rows) = &output.coverage {
        io::write_rows(&dir.join("coverage.csv"), rows)?;
    }
    io::write_json(&dir.join("summary.json"), &output.summary)?;
    io::write_json(
        &dir.join("manifest.json"),
        &manifest(output.coverage.is_some()),
    )?;
    io::write_text(
        &dir.join("ecdf.gp"),
        &gnuplot_script(
            &output.summary.request.pipelines,
            output.summary.request.reps,
        ),
    )
}

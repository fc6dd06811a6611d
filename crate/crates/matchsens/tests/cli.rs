use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use matchsens::io::{write_study_csv, StudyColumns};
use matchsens_core::data::StudyData;
use matchsens_core::rng::SeedSpec;
use matchsens_core::sim::{generate, GenModel, ModelId};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_matchsens"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn matchsens")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display())))
        .unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(model: ModelId) -> Self {
        let study = generate(GenModel { id: model, n: 300 }, SeedSpec::new(11, 0)).unwrap();
        Self::with_study(model, study.data)
    }

    /// The first `treated` treated and `controls` control units of a draw.
    fn small(model: ModelId, treated: usize, controls: usize) -> Self {
        let study = generate(GenModel { id: model, n: 300 }, SeedSpec::new(11, 0)).unwrap();
        let units = study.data.units();
        let pick = |t: bool, k: usize| {
            units
                .iter()
                .filter(move |u| u.treated == t)
                .take(k)
                .cloned()
        };
        let data =
            StudyData::new(pick(true, treated).chain(pick(false, controls)).collect()).unwrap();
        Self::with_study(model, data)
    }

    fn with_study(model: ModelId, study: StudyData) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ext = generate(GenModel { id: model, n: 300 }, SeedSpec::new(11, 1)).unwrap();
        let cols = StudyColumns::default();
        write_study_csv(&dir.path().join("study.csv"), &study, &cols).unwrap();
        write_study_csv(&dir.path().join("ext.csv"), &ext.data, &cols).unwrap();
        let f = Self { dir };
        let out = run(&[
            "match",
            "--input",
            s(&f.path("study.csv")),
            "--out-dir",
            s(&f.path("m")),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn analyze(&self, extra: &[&str], out: &str) -> Output {
        let input = self.path("study.csv");
        let design = self.path("m/design.json");
        let out_dir = self.path(out);
        let mut args = vec![
            "analyze",
            "--input",
            s(&input),
            "--design",
            s(&design),
            "--out-dir",
            s(&out_dir),
        ];
        args.extend_from_slice(extra);
        run(&args)
    }
}

#[test]
fn match_writes_design_and_report() {
    let f = Fixture::new(ModelId::Ignorable);
    let report = json(f.path("m/match_report.json"));
    let pairs = report["pairs"].as_u64().unwrap();
    assert_eq!(pairs, report["treated"].as_u64().unwrap());
    let design = json(f.path("m/design.json"));
    assert_eq!(design["sets"].as_array().unwrap().len() as u64, pairs);
    let config = json(f.path("m/run_config.json"));
    assert_eq!(config["command"], "match");
}

#[test]
fn caliper_drops_pairs() {
    let f = Fixture::new(ModelId::Ignorable);
    let out = run(&[
        "match",
        "--input",
        s(&f.path("study.csv")),
        "--caliper",
        "0.05",
        "--out-dir",
        s(&f.path("mc")),
    ]);
    assert!(out.status.success());
    let report = json(f.path("mc/match_report.json"));
    assert!(report["dropped_by_caliper"].as_u64().unwrap() > 0);
}

#[test]
fn uniform_p_value_grows_with_gamma() {
    let f = Fixture::new(ModelId::IgnorableShift);
    let mut last = 0.0;
    for (i, g) in ["1", "1.5", "3"].iter().enumerate() {
        let dir = format!("a{i}");
        let out = f.analyze(&["--gamma", g], &dir);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let p = json(f.path(&format!("{dir}/report.json")))["p_value"]
            .as_f64()
            .unwrap();
        assert!(p >= last, "gamma {g}: {p} < {last}");
        last = p;
        assert!(f.path(&format!("{dir}/summary.txt")).exists());
    }
}

#[test]
fn adaptive_modes_run() {
    let f = Fixture::new(ModelId::Ignorable);
    let ext = f.path("ext.csv");
    for (i, extra) in [
        vec!["--mode", "adaptive", "--external", s(&ext)],
        vec![
            "--mode",
            "adaptive",
            "--external",
            s(&ext),
            "--density",
            "kernel",
        ],
        vec!["--mode", "adaptive", "--true-model", "ignorable"],
        vec!["--mode", "quantile", "--lambda", "2", "--level", "0.8"],
        vec!["--method", "mc", "--draws", "500", "--seed", "3"],
    ]
    .iter()
    .enumerate()
    {
        let out = f.analyze(extra, &format!("r{i}"));
        assert!(
            out.status.success(),
            "{extra:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let p = json(f.path(&format!("r{i}/report.json")))["p_value"]
            .as_f64()
            .unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn exact_method_respects_support_cap() {
    let small = Fixture::small(ModelId::IgnorableShift, 12, 20);
    let out = small.analyze(
        &[
            "--method",
            "exact",
            "--alternative",
            "two-sided",
            "--gamma",
            "1.2",
        ],
        "ex",
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let big = Fixture::new(ModelId::IgnorableShift);
    let out = big.analyze(&["--method", "exact"], "ex");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("too large"));
}

#[test]
fn bad_input_exits_2() {
    let f = Fixture::new(ModelId::Ignorable);
    let out = f.analyze(&["--gamma", "0.5"], "bad1");
    assert_eq!(out.status.code(), Some(2));
    let out = f.analyze(&["--mode", "adaptive"], "bad2");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--external"));
    let out = run(&[
        "analyze",
        "--input",
        "/nonexistent.csv",
        "--design",
        "x.json",
        "--out-dir",
        s(&f.path("bad3")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[
        "simulate",
        "--model",
        "nope",
        "--out-dir",
        s(&f.path("bad4")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invert_brackets_the_effect() {
    let f = Fixture::new(ModelId::IgnorableShift);
    let out = run(&[
        "invert",
        "--input",
        s(&f.path("study.csv")),
        "--design",
        s(&f.path("m/design.json")),
        "--mode",
        "adaptive",
        "--true-model",
        "ignorable-shift",
        "--grid-start",
        "0",
        "--grid-stop",
        "2",
        "--out-dir",
        s(&f.path("inv")),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ci = json(f.path("inv/interval.json"));
    let (lo, hi) = (ci["lower"].as_f64().unwrap(), ci["upper"].as_f64().unwrap());
    assert!(lo < hi && lo > 0.0 && hi < 2.0, "[{lo}, {hi}]");
}

#[test]
fn empty_interval_still_succeeds() {
    let f = Fixture::new(ModelId::Ignorable);
    let out = run(&[
        "invert",
        "--input",
        s(&f.path("study.csv")),
        "--design",
        s(&f.path("m/design.json")),
        "--alpha",
        "1",
        "--out-dir",
        s(&f.path("inv")),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(f.path("inv/interval.json"))["empty"], true);
}

#[test]
fn simulate_writes_artifacts_with_display_names() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sim");
    let out = run(&[
        "simulate",
        "--model",
        "ignorable",
        "--reps",
        "2",
        "--n",
        "300",
        "--external-n",
        "200",
        "--pipeline",
        "rand,adapt.para,adapt.ker-relaxed(1.05)",
        "--out-dir",
        s(&out_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "pvalues.csv",
        "bias_stats.csv",
        "summary.json",
        "manifest.json",
        "ecdf.gp",
        "run_config.json",
    ] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(out_dir.join("pvalues.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert!(csv.contains("adapt.ker-relaxed(1.05)"));
    let summary = json(out_dir.join("summary.json"));
    assert_eq!(summary["request"]["pipelines"][1], "adapt.para");
}

#[test]
fn oracle_check_reduced_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "oracle-check",
        "--scale",
        "0.01",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(json(dir.path().join("oracle_report.json"))["passed"], true);
}

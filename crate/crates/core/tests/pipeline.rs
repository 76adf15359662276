//! End-to-end checks of the command-line pipeline and its on-disk schema.

use quorum_core::harness::{
    cli_main, read_diagnostics, run_ensemble, SimulationConfig, Summary, DIAGNOSTICS_COLUMNS,
    SCHEMA_VERSION, SWEEP_COLUMNS,
};
use std::fs;
use std::path::{Path, PathBuf};

const SMALL: &str = r#"
algorithm = "qsgd"
agents = 8
iterations = 400
eta = 0.05
k = 2.0
runs = 3
record_stride = 20
objective = { kind = "double_well", scale = 150.0 }
noise = { kind = "uniform", half_width = 1.5 }
init = { kind = "uniform", lo = -3.0, hi = 3.0 }
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config_in.toml");
    fs::write(&path, text).unwrap();
    path
}

fn cli(args: &[&str]) -> i32 {
    cli_main(std::iter::once("quorum").chain(args.iter().copied()))
}

fn header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(String::from).collect()
}

#[test]
fn run_writes_versioned_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    assert_eq!(cli(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);

    let summary: Summary = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.schema_version, SCHEMA_VERSION);
    assert_eq!(summary.runs, 3);
    assert!(summary.timing.is_none());
    let config = SimulationConfig::from_file(&out.join("config.toml")).unwrap();
    assert_eq!(summary.config_hash, config.hash());
    assert!(summary.bounds.iter().any(|b| b.name == "sync_bound"));

    assert_eq!(header(&out.join("finals_agents.csv")), ["run_index", "agent_index", "coord_0"]);
    assert_eq!(header(&out.join("finals_quorum.csv")), ["run_index", "agent_index", "coord_0"]);
    assert_eq!(header(&out.join("diagnostics.csv")), DIAGNOSTICS_COLUMNS);
    let agents = csv::Reader::from_path(out.join("finals_agents.csv")).unwrap().records().count();
    assert_eq!(agents, 3 * 8);
    // Steps 0, 20, …, 400 for each run.
    assert_eq!(read_diagnostics(&out.join("diagnostics.csv")).unwrap().iter().map(|d| d.len()).sum::<usize>(), 3 * 21);
}

#[test]
fn timing_is_opt_in() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    assert_eq!(cli(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--timing"]), 0);
    let summary: Summary = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary.timing.unwrap() >= 0.0);
}

#[test]
fn report_reproduces_summary_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("double_well\", scale = 150.0", "quadratic\", diag = [1.0]"));
    let out = tmp.path().join("out");
    assert_eq!(cli(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
    assert_eq!(cli(&["report", out.to_str().unwrap()]), 0);

    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["quantity"].as_str().unwrap()).collect();
    assert_eq!(names, ["sync_measure", "eps_norm", "dist_to_opt"]);
    let from_report = rows[0]["empirical"].as_f64().unwrap();
    let from_summary = summary["post_burn_in"]["sync_measure"].as_f64().unwrap();
    assert!((from_report - from_summary).abs() <= 1e-12 * from_summary);
    assert_eq!(rows[0]["bound"], summary["bounds"][0]["value"]);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("sweep");
    let code = cli(&["sweep", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--axis", "k", "--values", "1,2,4"]);
    assert_eq!(code, 0);
    assert_eq!(header(&out.join("sweep.csv")), SWEEP_COLUMNS);
    let rows: Vec<csv::StringRecord> =
        csv::Reader::from_path(out.join("sweep.csv")).unwrap().records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    for (i, v) in [1.0, 2.0, 4.0].iter().enumerate() {
        assert_eq!(&rows[i][0], "k");
        assert_eq!(rows[i][1].parse::<f64>().unwrap(), *v);
        assert!(out.join(format!("k_{i:03}")).join("summary.json").exists());
    }
    // The k = 2 entry is the base configuration, so it matches a plain run.
    let single = tmp.path().join("single");
    assert_eq!(cli(&["run", cfg.to_str().unwrap(), "--out", single.to_str().unwrap()]), 0);
    for file in ["finals_agents.csv", "finals_quorum.csv", "diagnostics.csv", "summary.json"] {
        assert_eq!(fs::read(single.join(file)).unwrap(), fs::read(out.join("k_001").join(file)).unwrap(), "{file}");
    }
}

#[test]
fn bounds_and_kde_subcommands() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    assert_eq!(cli(&["bounds", cfg.to_str().unwrap()]), 0);
    let out = tmp.path().join("out");
    assert_eq!(cli(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
    let density = tmp.path().join("kde.csv");
    let finals = out.join("finals_agents.csv");
    assert_eq!(cli(&["kde", finals.to_str().unwrap(), "--out", density.to_str().unwrap()]), 0);
    assert_eq!(header(&density), ["grid", "density"]);
    assert_eq!(cli(&["kde", finals.to_str().unwrap(), "--column", "nope"]), 2);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.toml");
    assert_eq!(cli(&["run", missing.to_str().unwrap()]), 3);
    let bad = write_config(tmp.path(), &format!("{SMALL}\nunknown_key = 1\n"));
    assert_eq!(cli(&["run", bad.to_str().unwrap()]), 2);
    let zero = write_config(tmp.path(), &SMALL.replace("iterations = 400", "iterations = 0"));
    assert_eq!(cli(&["run", zero.to_str().unwrap()]), 2);
    assert_eq!(cli(&["no-such-command"]), 2);
    assert_eq!(cli(&["--help"]), 0);
    assert_eq!(cli(&["report", tmp.path().join("nowhere").to_str().unwrap()]), 3);
}

#[test]
fn referenced_files_resolve_against_the_config_directory() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("h.csv"), "2.0,0.0\n0.0,1.0\n").unwrap();
    let text = SMALL.replace(
        "objective = { kind = \"double_well\", scale = 150.0 }",
        "objective = { kind = \"quadratic\", file = \"h.csv\" }",
    );
    let cfg = write_config(tmp.path(), &text.replace("lo = -3.0, hi = 3.0", "lo = -1.0, hi = 1.0"));
    let out = tmp.path().join("out");
    assert_eq!(cli(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
    assert_eq!(header(&out.join("finals_quorum.csv")), ["run_index", "agent_index", "coord_0", "coord_1"]);
    // The copy is self-contained: the matrix is inlined.
    assert!(!fs::read_to_string(out.join("config.toml")).unwrap().contains("h.csv"));
}

/// With many agents the quorum update of EASGD has gain `kpη`, which is
/// unstable long before the per-agent gain `kη` that bounds QSGD.
#[test]
fn easgd_diverges_where_qsgd_does_not() {
    let text = |algorithm: &str| {
        format!(
            r#"
algorithm = "{algorithm}"
agents = 64
iterations = 500
eta = 0.1
k = 1.0
runs = 4
objective = {{ kind = "quadratic", diag = [1.0] }}
noise = {{ kind = "gaussian", sigma = 1.0 }}
init = {{ kind = "uniform", lo = -1.0, hi = 1.0 }}
"#
        )
    };
    let run = |algorithm: &str| {
        let c = SimulationConfig::from_toml(&text(algorithm), Path::new(".")).unwrap();
        run_ensemble(&c).unwrap().summary.diverged
    };
    assert_eq!(run("qsgd"), 0);
    assert_eq!(run("easgd"), 4);
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let c = SimulationConfig::from_file(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            c.validate().unwrap();
            count += 1;
        }
    }
    assert!(count >= 3);
}

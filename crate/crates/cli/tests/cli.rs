use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use proptest::prelude::*;
use tdbsde_cli::*;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tdbsde"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn empty_and_malformed_configs_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.toml");
    fs::write(&empty, "").unwrap();
    let o = run(&["run", "--config", empty.to_str().unwrap()]);
    assert_eq!(code(&o), 4);

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "pipeline = \"solve\"\nhorizon = 1.0\nsteps = 10\nwobble = 2\n").unwrap();
    let o = run(&["solve", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 4, column 1"), "{err}");

    let o = run(&["reproduce", "bmo", "--param", "nope=1"]);
    assert_eq!(code(&o), 4);
    let o = run(&["reproduce", "bmo", "--paths", "0"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn example1_without_solution_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("e1");
    let o = run(&[
        "reproduce",
        "example1",
        "--param",
        "k=1",
        "--param",
        "terminal=constant:1",
        "--paths",
        "2000",
        "--steps",
        "20",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert_eq!(s["verdicts"]["classification"], "NoSolution");
    assert_eq!(s["verdicts"]["picard"], "diverged");
    assert!(s["classification"]["condition"].as_str().unwrap().contains("TK = 1"));
    assert_eq!(s["exit_code"], 2);
    assert!(out.join("timings.json").exists());
}

#[test]
fn unique_but_uncertified_case_diverges_with_exit_3() {
    let (s, _) = run_config(&{
        let mut c = reproduce_config(Experiment::Example1);
        c.params.insert("k".into(), Param::Number(2.0));
        c.paths = Some(500);
        c.steps = Some(10);
        c
    })
    .unwrap();
    assert_eq!(s.verdicts["classification"], "Unique");
    assert_eq!(s.verdicts["picard"], "diverged");
    assert_eq!(s.exit_code, exit::DIVERGED);
}

#[test]
fn summary_echoes_the_config_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("solve");
    let cfg = configs().join("linear_z_solve.toml");
    let o = run(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--paths",
        "3000",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(matches!(code(&o), 0 | 1), "{}", String::from_utf8_lossy(&o.stderr));
    let back: RunConfig = serde_json::from_value(summary(&out)["config"].clone()).unwrap();
    let mut expected = load_config(&cfg).unwrap();
    expected.paths = Some(3000);
    expected.output = Some(out.clone());
    assert_eq!(back, expected);
    let csv = fs::read_to_string(out.join("solution.csv")).unwrap();
    assert!(csv.starts_with("t,mean_y,stderr_y,mean_z\n"));
    assert_eq!(csv.lines().count(), 52);
}

#[test]
fn measure_collapse_table_decays() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("mc");
    let o = run(&["reproduce", "measure-collapse", "--paths", "4000", "--out", out.to_str().unwrap()]);
    assert!(matches!(code(&o), 0 | 1), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("collapse.csv")).unwrap();
    let rows: Vec<Vec<f64>> = rdr
        .records()
        .map(|r| r.unwrap().iter().map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 51);
    // log median of a Gaussian walk with drift -1/2
    for row in &rows[10..] {
        let (n, med) = (row[0], row[2]);
        assert!((med.ln() + n / 2.0).abs() < 0.1 * n.sqrt() + 0.2, "n = {n}: {med}");
    }
}

#[test]
fn sweep_of_fixed_delay_classification() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let cfg = configs().join("fixed_delay_sweep.toml");
    let o = run(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), TABLE_COLUMNS.to_vec());
    let verdicts: Vec<String> = rdr.records().map(|r| r.unwrap()[1].to_string()).collect();
    assert_eq!(verdicts, ["Unique", "Unique", "NoSolution"]);
}

#[test]
fn thread_count_does_not_change_the_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let mut texts = Vec::new();
    let out = tmp.path().join("run");
    for threads in ["1", "3"] {
        let o = run(&[
            "--threads",
            threads,
            "reproduce",
            "stopped-comparison",
            "--paths",
            "3000",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        texts.push(fs::read_to_string(out.join("summary.json")).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
}

#[test]
fn failed_write_leaves_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("taken");
    fs::write(&blocker, "not a directory").unwrap();
    let o = run(&["reproduce", "girsanov", "--paths", "100", "--out", blocker.to_str().unwrap()]);
    assert_eq!(code(&o), exit::FAILED);
    assert_eq!(fs::read_to_string(&blocker).unwrap(), "not a directory");

    let dir = tmp.path().join("ok");
    fs::create_dir(&dir).unwrap();
    write_atomic(&dir.join("a.txt"), b"hello").unwrap();
    write_atomic(&dir.join("a.txt"), b"again").unwrap();
    let names: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, ["a.txt"]);
    assert_eq!(fs::read_to_string(dir.join("a.txt")).unwrap(), "again");
}

#[test]
fn classify_refuses_generators_without_classification() {
    let mut c = load_config(&configs().join("linear_z_solve.toml")).unwrap();
    c.pipeline = Pipeline::Classify;
    let err = run_config(&c).unwrap_err();
    assert_eq!(err.exit_code(), exit::INVALID_CONFIG);

    let c = load_config(&configs().join("integral_classify.toml")).unwrap();
    let (s, _) = run_config(&c).unwrap();
    assert_eq!(s.verdicts["classification"], "Multiple");
    assert_eq!(s.check_passed("closed_form_residual"), Some(true));
}

fn classify_row(k: f64) -> RunSummary {
    let mut c = load_config(&configs().join("fixed_delay_sweep.toml")).unwrap();
    c.sweep = None;
    c.paths = Some(20);
    c.steps = Some(4);
    c.generator = Some(GeneratorConfig::FixedDelayY { k });
    run_config(&c).unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn delta_star_is_monotone_in_k(a in 0.01f64..3.0, b in 0.01f64..3.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-6);
        let rows = [classify_row(lo), classify_row(hi)];
        let d: Vec<f64> = rows.iter().map(|r| r.value("delta_star").unwrap()).collect();
        prop_assert!(d[0] <= d[1], "{d:?}");
        let csv = emit_table(&rows).unwrap();
        prop_assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn params_parse_numbers_or_text(v in -1e6f64..1e6) {
        prop_assert_eq!(Param::parse(&format!("{v}")), Param::Number(v));
        prop_assert_eq!(Param::parse(" w "), Param::Text("w".into()));
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn asset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join(name)
}

fn ctcausal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctcausal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn check_graph_on_bundled_scenario_is_clean() {
    let scenario = asset("scenario.toml");
    let graph = asset("graph.txt");
    let out = ctcausal(&["check-graph", "--scenario", s(&scenario), "--graph", s(&graph)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("violations = []"), "{text}");
}

#[test]
fn check_graph_reports_missing_edge() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("g.txt");
    let text = fs::read_to_string(asset("graph.txt")).unwrap().replace("L -> B\n", "");
    fs::write(&graph, text).unwrap();
    let out = ctcausal(&["check-graph", "--graph", s(&graph)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`B` depends on `L`"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = ctcausal(&["simulate", "--bogus", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(ctcausal(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn gformula_on_bundled_joint_model() {
    // Hand enumeration over (W, L) with K held at 1:
    // a = 1: 0.6·(0.7·0.15 + 0.3·0.35) + 0.4·(0.2·0.45 + 0.8·0.65) = 0.37
    // a = 0: 0.6·(0.8·0.05 + 0.2·0.25) + 0.4·(0.4·0.35 + 0.6·0.55) = 0.242
    for (a, expected) in [("1", 0.37), ("0", 0.242)] {
        let out = ctcausal(&[
            "gformula",
            "--model",
            s(&asset("joint_model.toml")),
            "--a",
            a,
            "--krule",
            s(&asset("krule.toml")),
            "--h",
            "B=1",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let v: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
    }
}

#[test]
fn gformula_rejects_malformed_outcome() {
    let out = ctcausal(&[
        "gformula",
        "--model",
        s(&asset("joint_model.toml")),
        "--a",
        "1",
        "--krule",
        s(&asset("krule.toml")),
        "--h",
        "B",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_from_simulation_to_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort.csv");
    let theta = asset("theta1.toml");
    let run = |args: &[&str]| {
        let out = ctcausal(args);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    };
    run(&["simulate", "--n", "400", "--seed", "3", "--out", s(&cohort)]);
    assert!(dir.path().join("cohort.baseline.csv").exists());

    let weights = dir.path().join("w.csv");
    run(&[
        "weights",
        "--intervene",
        s(&theta),
        "--cohort",
        s(&cohort),
        "--out",
        s(&weights),
    ]);
    let w = fs::read_to_string(&weights).unwrap();
    assert!(w.starts_with("id,t,log_w_total,log_w_A,log_w_K\n"), "{}", &w[..80]);

    let aalen = dir.path().join("aalen.csv");
    run(&[
        "estimate-aalen",
        "--cohort",
        s(&cohort),
        "--outcome",
        "B",
        "--covariates",
        "1,A,L,Kminus",
        "--out",
        s(&aalen),
    ]);
    let a = fs::read_to_string(&aalen).unwrap();
    assert!(a.starts_with("t,coefficient,value,flag\n"));
    for label in ["1", "A", "L", "Kminus"] {
        assert!(a.contains(&format!(",{label},")), "missing {label}");
    }

    let gcde = dir.path().join("gcde.csv");
    run(&[
        "estimate-gcde",
        "--cohort",
        s(&cohort),
        "--intervene",
        s(&theta),
        "--out",
        s(&gcde),
    ]);
    let g = fs::read_to_string(&gcde).unwrap();
    for label in ["gamma0", "gammaA", "psiK", "cumulative_hazard", "survival"] {
        assert!(g.contains(&format!(",{label},")), "missing {label}");
    }

    let out = run(&["check-positivity", "--intervene", s(&theta), "--cohort", s(&cohort)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("pass = true"));
}

#[test]
fn simulate_is_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let theta = asset("theta2.toml");
    for (p, threads) in [(&a, "1"), (&b, "3")] {
        let out = ctcausal(&[
            "simulate",
            "--n",
            "300",
            "--seed",
            "9",
            "--intervene",
            s(&theta),
            "--threads",
            threads,
            "--out",
            s(p),
        ]);
        assert_eq!(out.status.code(), Some(0));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        fs::read(dir.path().join("a.baseline.csv")).unwrap(),
        fs::read(dir.path().join("b.baseline.csv")).unwrap()
    );
}

#[test]
fn invalid_intervention_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let theta = dir.path().join("bad.toml");
    // A is fixed from L, which is measured after A.
    fs::write(&theta, "[[baseline]]\nvariable = \"A\"\nvalue = \"L\"\n").unwrap();
    let out = ctcausal(&[
        "simulate",
        "--n",
        "10",
        "--seed",
        "1",
        "--intervene",
        s(&theta),
        "--out",
        s(&dir.path().join("x.csv")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn replicate_study_smoke_run_emits_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("study");
    let start = std::time::Instant::now();
    let out = ctcausal(&["replicate-study", "--n", "500", "--seed", "7", "--out", s(&out_dir)]);
    println!("n = 500 smoke run: {:.2?}", start.elapsed());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "gamma.csv",
        "gamma_oracle.csv",
        "hazard.csv",
        "hazard_ratio.csv",
        "weights.csv",
        "summary.toml",
    ] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let summary: toml::Value = toml::from_str(&fs::read_to_string(out_dir.join("summary.toml")).unwrap()).unwrap();
    assert_eq!(summary["n"].as_integer(), Some(500));
    assert_eq!(summary["regimes"].as_array().unwrap().len(), 2);
}

#[test]
fn equal_regimes_give_unit_hazard_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("study");
    let theta = asset("theta1.toml");
    let out = ctcausal(&[
        "replicate-study",
        "--n",
        "500",
        "--seed",
        "2",
        "--oracle-n",
        "2000",
        "--gamma-oracle-n",
        "20000",
        "--bootstrap",
        "10",
        "--theta2",
        s(&theta),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(out_dir.join("hazard_ratio.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert!(!rows.is_empty());
    for row in rows {
        assert_eq!(row.rsplit(',').next(), Some("1"), "{row}");
    }
}

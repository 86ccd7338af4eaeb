use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mc-coverage"))
}

fn run(args: &[&str], config: &Path) -> Output {
    bin().args(args).arg("--config").arg(config).output().expect("binary runs")
}

fn config_value() -> Value {
    json!({
        "schema_version": 1,
        "paths": {
            "regions": "regions.csv",
            "adjacency": "adjacency.csv",
            "survey": "data/survey.csv",
            "population": "data/population.csv",
            "programme": "data/programme.csv"
        },
        "grid": {"max_age": 12, "t_min": 2000, "t_max": 2003, "paediatric_cutoff": 4},
        "splines": {"knot_spacing": 3.0, "degree": 2},
        "inference": {"n_samples": 200, "seed": 11},
        "queries": [
            {"level": "national", "name": "all", "age_lo": 5, "age_hi": 12, "types": ["MC", "MMC", "TMC"], "statistic": "coverage"},
            {"level": "region", "name": "a", "regions": ["a"], "age_lo": 0, "age_hi": 12, "types": ["MMC"], "statistic": "incident_count"}
        ],
        "output_dir": "out",
        "simulation": {
            "seed": 5,
            "surveys": [
                {"id": "s1", "year": 2001, "respondents": 1500, "age_lo": 0, "age_hi": 12},
                {"id": "s2", "year": 2003, "respondents": 1500, "age_lo": 0, "age_hi": 12}
            ],
            "programme_bands": [[0, 4], [5, 12]],
            "programme_years": [2001, 2002, 2003],
            "population": 2000.0,
            "truth": {"alpha": [-4.0, -5.0, -2.5], "sigma": 0.3, "seed": 3}
        }
    })
}

fn fixture(cfg: &Value) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("regions.csv"), "region\na\nb\nc\n").unwrap();
    fs::write(dir.path().join("adjacency.csv"), "region_a,region_b\na,b\nb,c\n").unwrap();
    let path = dir.path().join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    let out = run(&["simulate"], &path);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (dir, path)
}

fn stderr_json(out: &Output) -> Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).expect("error listing is JSON")
}

#[test]
fn valid_fixture_validates() {
    let (_dir, cfg) = fixture(&config_value());
    let out = run(&["validate"], &cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["status"], "ok");
    assert_eq!(report["regions"], 3);
}

#[test]
fn missing_file_is_named() {
    let (dir, cfg) = fixture(&config_value());
    fs::remove_file(dir.path().join("data/population.csv")).unwrap();
    let err = stderr_json(&run(&["validate"], &cfg));
    assert_eq!(err["kind"], "config");
    assert!(err["message"].as_str().unwrap().contains("population.csv"));
}

#[test]
fn unknown_survey_region_is_row_listed() {
    let (dir, cfg) = fixture(&config_value());
    let survey = dir.path().join("data/survey.csv");
    let text = fs::read_to_string(&survey).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    for k in [2, 5] {
        let mut cols: Vec<&str> = lines[k].split(',').collect();
        cols[1] = "zz";
        lines[k] = cols.join(",");
    }
    fs::write(&survey, lines.join("\n") + "\n").unwrap();
    let err = stderr_json(&run(&["validate"], &cfg));
    assert_eq!(err["kind"], "validation");
    let rows: Vec<u64> = err["issues"].as_array().unwrap().iter().map(|i| i["row"].as_u64().unwrap()).collect();
    assert_eq!(rows, vec![2, 5]);
    assert!(err["issues"][0]["message"].as_str().unwrap().contains("zz"));
}

#[test]
fn unknown_config_key_fails_loudly() {
    let (_dir, cfg) = fixture(&config_value());
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v["inference"]["n_sample"] = json!(5);
    fs::write(&cfg, v.to_string()).unwrap();
    let err = stderr_json(&run(&["validate"], &cfg));
    assert_eq!(err["kind"], "config");
}

#[test]
fn empty_programme_still_fits() {
    let (dir, cfg) = fixture(&config_value());
    fs::write(dir.path().join("data/programme.csv"), "region,year,age_lo,age_hi,count\n").unwrap();
    let out = run(&["fit"], &cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["converged"], true);
    for f in ["mode.json", "samples.bin", "samples.json", "convergence.csv", "summary.csv"] {
        assert!(dir.path().join("out").join(f).is_file(), "{f}");
    }
}

#[test]
fn fit_then_aggregate_matches_fused_run() {
    let (dir, cfg) = fixture(&config_value());
    let out = run(&["fit", "--threads", "2"], &cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = dir.path().join("out/summary.csv");
    let fused = fs::read(&summary).unwrap();
    fs::remove_file(&summary).unwrap();
    let out = run(&["aggregate"], &cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(&summary).unwrap(), fused);
}

#[test]
fn aggregate_rejects_foreign_layout() {
    let (dir, cfg) = fixture(&config_value());
    let out = run(&["fit"], &cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v["splines"]["knot_spacing"] = json!(4.0);
    let other = dir.path().join("other.json");
    fs::write(&other, v.to_string()).unwrap();
    let err = stderr_json(&run(&["aggregate", "--samples", dir.path().join("out/samples.bin").to_str().unwrap()], &other));
    assert_eq!(err["kind"], "structural");
}

#[test]
fn seed_flag_overrides_config() {
    let (dir, cfg) = fixture(&config_value());
    let read = |seed: &str| {
        let out = run(&["fit", "--seed", seed], &cfg);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let side: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/samples.json")).unwrap()).unwrap();
        (side["seed"].clone(), fs::read(dir.path().join("out/samples.bin")).unwrap())
    };
    let (s1, b1) = read("99");
    let (s2, b2) = read("100");
    assert_eq!(s1, 99);
    assert_eq!(s2, 100);
    assert_ne!(b1, b2);
}

use std::path::Path;
use std::process::{Command, Output};

const QUICK: &str = r#"
model = "splines-hs"
basis_size = 8

[sampler]
n_chains = 1
n_warmup = 80
n_draws = 80
max_tree_depth = 7

[station_sampler]
n_chains = 1
n_warmup = 80
n_draws = 80

[simulate]
n_stations = 20
n_years = 12
n_covariates = 2
n_active = 1
"#;

fn gevreg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gevreg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), QUICK).unwrap();
    let out = gevreg(dir.path(), &["simulate", "--config", "run.toml", "--out", "basin"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

#[test]
fn simulate_then_cv_writes_every_fold() {
    let dir = setup();
    let out = gevreg(dir.path(), &["cv", "--config", "run.toml", "--data", "basin", "--out", "cv"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let cv = dir.path().join("cv");
    for g in 0..10 {
        let fold = cv.join(format!("fold_{g:03}"));
        assert!(fold.join("fold.json").exists(), "fold {g}");
        for family in ["linear", "splines", "splines-hs"] {
            assert!(fold.join(format!("diagnostics_{family}.csv")).exists());
        }
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(cv.join("cv_report.json")).unwrap()).unwrap();
    assert_eq!(report["partial"], false);
    assert_eq!(report["n_folds"], 10);
    assert!(cv.join("relative.csv").exists());
}

#[test]
fn diagnose_reproduces_fit_reports_byte_for_byte() {
    let dir = setup();
    let out = gevreg(dir.path(), &["fit", "--config", "run.toml", "--data", "basin", "--out", "fit", "--model", "linear"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit = dir.path().join("fit");
    for f in ["config.toml", "draws.csv", "draws_summary.csv", "stations.csv", "calibration.json", "diagnostics.json"] {
        assert!(fit.join(f).exists(), "{f}");
    }
    let out = gevreg(dir.path(), &["diagnose", "--run", "fit", "--out", "again"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["stations.csv", "diagnostics.json", "diagnostics.csv"] {
        assert_eq!(
            std::fs::read(fit.join(f)).unwrap(),
            std::fs::read(dir.path().join("again").join(f)).unwrap(),
            "{f}"
        );
    }
    std::fs::write(dir.path().join("sites.csv"), "station_id,latitude,longitude\nnew,0.5,0.5\n").unwrap();
    let out = gevreg(dir.path(), &["predict", "--run", "fit", "--sites", "sites.csv", "--out", "pred"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("pred/predictions.csv")).unwrap();
    assert!(table.lines().any(|l| l.starts_with("new,false,false,return_level_100,")));
}

#[test]
fn same_seed_same_basin() {
    let dir = setup();
    let again = gevreg(dir.path(), &["simulate", "--config", "run.toml", "--out", "basin2"]);
    assert!(again.status.success());
    let other = gevreg(dir.path(), &["simulate", "--config", "run.toml", "--out", "basin3", "--seed", "99"]);
    assert!(other.status.success());
    let read = |d: &str| std::fs::read(dir.path().join(d).join("maxima.csv")).unwrap();
    assert_eq!(read("basin"), read("basin2"));
    assert_ne!(read("basin"), read("basin3"));
}

#[test]
fn more_folds_than_stations_is_a_validation_error() {
    let dir = setup();
    let out = gevreg(dir.path(), &["cv", "--config", "run.toml", "--data", "basin", "--folds", "21"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cv.folds"));
}

#[test]
fn config_errors_name_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "model = \"linear\"\n\n[sampler]\nn_chains = \"four\"\n").unwrap();
    let out = gevreg(dir.path(), &["fit", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4"), "{err}");

    std::fs::write(dir.path().join("bad.toml"), "[sampler]\ntarget_accept = 1.5\n").unwrap();
    let out = gevreg(dir.path(), &["fit", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sampler.target_accept"));
}

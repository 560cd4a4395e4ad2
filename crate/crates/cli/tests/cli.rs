use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use frk::estimation::{aecm_fit, initial_params, AecmConfig};
use frk::geometry::{place_knots, Domain, KnotScheme, Metric};
use frk::io::read_observations;
use frk::model::SmeModel;
use frk::prediction::{PredictionRequest, Predictor};
use nalgebra::{DMatrix, DVector};

fn frk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frk"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Simulates one paper-design replicate into `dir/sim`.
fn simulated(dir: &Path) -> PathBuf {
    let out = dir.join("sim");
    let o = frk(&[
        "simulate",
        "--seed",
        "11",
        "--b",
        "1",
        "--sigma-delta2",
        "0.1",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(|v| v.parse().unwrap_or(f64::NAN)).collect())
        .collect();
    (header, rows)
}

fn column(header: &[String], rows: &[Vec<f64>], name: &str) -> Vec<f64> {
    let j = header.iter().position(|h| h == name).unwrap();
    rows.iter().map(|r| r[j]).collect()
}

#[test]
fn simulate_writes_paper_sized_sets() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path());
    assert_eq!(read_csv(&sim.join("observations_001.csv")).1.len(), 64);
    assert_eq!(read_csv(&sim.join("truth_001.csv")).1.len(), 256);
    assert_eq!(read_csv(&sim.join("targets.csv")).1.len(), 256);
    assert!(fs::read_to_string(sim.join("manifest.toml"))
        .unwrap()
        .contains("k_type = \"matern\""));

    let three = dir.path().join("three");
    let o = frk(&[
        "simulate",
        "--replicates",
        "3",
        "--seed",
        "11",
        "--b",
        "1",
        "--sigma-delta2",
        "0.1",
        "--out",
        s(&three),
    ]);
    assert!(o.status.success());
    for r in 1..=3 {
        assert!(three.join(format!("observations_{r:03}.csv")).exists());
        assert!(three.join(format!("truth_{r:03}.csv")).exists());
    }
    // replicate 1 does not depend on how many replicates were requested
    assert_eq!(
        fs::read(sim.join("observations_001.csv")).unwrap(),
        fs::read(three.join("observations_001.csv")).unwrap()
    );
    assert_ne!(
        fs::read(three.join("observations_001.csv")).unwrap(),
        fs::read(three.join("observations_002.csv")).unwrap()
    );
}

#[test]
fn bad_output_dir_fails_without_partial_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = frk(&["simulate", "--out", s(&dir.path().join("missing/deeper/out"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);

    let sim = simulated(dir.path());
    let obs = sim.join("observations_001.csv");
    let o = frk(&[
        "fit",
        "--data",
        s(&obs),
        "--knot-grid",
        "5",
        "--sigma-eps2",
        "1",
        "--method",
        "em",
        "--out",
        s(&dir.path().join("nowhere/fit.toml")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("nowhere").exists());
}

#[test]
fn fit_reports_fields_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let obs = simulated(dir.path()).join("observations_001.csv");
    let fit = dir.path().join("em.toml");
    let o = frk(&[
        "fit",
        "--data",
        s(&obs),
        "--knot-grid",
        "0.5,256.5:5",
        "--sigma-eps2",
        "1",
        "--method",
        "em",
        "--out",
        s(&fit),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for field in ["loglik", "sigma_delta2", "K eigenvalues"] {
        assert!(text.contains(field), "missing {field} in {text}");
    }
    assert!(!text.contains("b trace"));
    let file = fs::read_to_string(&fit).unwrap();
    assert!(file.contains("format_version = 1") && file.contains("method = \"em\""));

    let o = frk(&[
        "fit",
        "--data",
        s(&obs),
        "--knot-grid",
        "0.5,256.5:5",
        "--sigma-eps2",
        "1",
        "--out",
        s(&dir.path().join("aecm.toml")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("\nb ") && text.contains("b trace"));
}

#[test]
fn usage_and_data_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let obs = simulated(dir.path()).join("observations_001.csv");
    let out = dir.path().join("f.toml");

    let o = frk(&["fit", "--data", s(&obs), "--knot-grid", "5", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--sigma-eps2 is required"));

    let o = frk(&["fit", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));

    let o = frk(&[
        "fit",
        "--data",
        s(&obs),
        "--knot-grid",
        "5",
        "--sigma-eps2",
        "1",
        "--metric",
        "manhattan",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "coord1,y\n1,2.0\n2,3.0\n3,oops\n4,1.0\n").unwrap();
    let o = frk(&[
        "fit",
        "--data",
        s(&bad),
        "--knot-grid",
        "3",
        "--sigma-eps2",
        "1",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
    assert!(!out.exists());

    let o = frk(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn collinear_covariates_are_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let mut text = String::from("coord1,a,b,y\n");
    for i in 0..30 {
        text.push_str(&format!("{i},{i},{i},{}\n", (i as f64 * 0.3).sin()));
    }
    fs::write(&data, text).unwrap();
    let o = frk(&[
        "fit",
        "--data",
        s(&data),
        "--knot-grid",
        "4",
        "--sigma-eps2",
        "1",
        "--out",
        s(&dir.path().join("f.toml")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn fit_predict_round_trip_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path());
    let obs = sim.join("observations_001.csv");
    let fit = dir.path().join("fit.toml");
    let pred = dir.path().join("pred.csv");
    let o = frk(&[
        "fit",
        "--data",
        s(&obs),
        "--knot-grid",
        "0.5,256.5:5",
        "--sigma-eps2",
        "1",
        "--out",
        s(&fit),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = frk(&[
        "predict",
        "--model",
        s(&fit),
        "--data",
        s(&obs),
        "--targets",
        s(&sim.join("targets.csv")),
        "--decompose",
        "--out",
        s(&pred),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (h, rows) = read_csv(&pred);
    assert_eq!(rows.len(), 256);
    let (yhat, kse) = (column(&h, &rows, "yhat"), column(&h, &rows, "kse"));
    let (trend, spatial) = (column(&h, &rows, "trend"), column(&h, &rows, "spatial"));
    for i in 0..rows.len() {
        assert_eq!(trend[i] + spatial[i], yhat[i]);
    }

    // the same pipeline without the file round trip
    let data = read_observations(fs::File::open(&obs).unwrap(), true).unwrap();
    let layout = place_knots(&Domain::Interval { lo: 0.5, hi: 256.5 }, &[5], KnotScheme::Regular1d).unwrap();
    let model = SmeModel::new(data, layout, Metric::Euclidean).unwrap();
    let init = initial_params(&model, 1.0, 1.5).unwrap();
    let fitted = aecm_fit(&init, &model, &AecmConfig::default()).unwrap();
    let targets: Vec<_> = (1..=256).map(|i| frk::geometry::Location::d1(i as f64)).collect();
    let x0 = DMatrix::from_fn(256, 2, |i, j| if j == 0 { 1.0 } else { (i + 1) as f64 });
    let req = PredictionRequest::new(targets, x0, DVector::from_element(256, 1.0), &model.data).unwrap();
    let direct = Predictor::new(&fitted.params, &model).unwrap().predict(&req).unwrap();
    for i in 0..256 {
        assert!(
            (direct.yhat[i] - yhat[i]).abs() <= 1e-12 * direct.yhat[i].abs().max(1.0),
            "row {i}"
        );
        assert!(
            (direct.kse[i] - kse[i]).abs() <= 1e-12 * direct.kse[i].abs().max(1.0),
            "row {i}"
        );
    }
}

#[test]
fn version_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path());
    let obs = sim.join("observations_001.csv");
    let fit = dir.path().join("fit.toml");
    let o = frk(&[
        "fit",
        "--data",
        s(&obs),
        "--knot-grid",
        "5",
        "--sigma-eps2",
        "1",
        "--method",
        "em",
        "--out",
        s(&fit),
    ]);
    assert!(o.status.success());
    let text = fs::read_to_string(&fit)
        .unwrap()
        .replace("format_version = 1", "format_version = 99");
    fs::write(&fit, text).unwrap();
    let pred = dir.path().join("p.csv");
    let o = frk(&[
        "predict",
        "--model",
        s(&fit),
        "--data",
        s(&obs),
        "--targets",
        s(&sim.join("targets.csv")),
        "--out",
        s(&pred),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("version 99"), "{}", stderr(&o));
    assert!(!pred.exists());
}

#[test]
fn grid_targets_for_intercept_only_models() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let mut text = String::from("coord1,coord2,y\n");
    for i in 0..40 {
        let (x, y) = ((i % 8) as f64, (i / 8) as f64);
        text.push_str(&format!("{x},{y},{}\n", (x * 0.7).sin() + (y * 0.5).cos()));
    }
    fs::write(&data, text).unwrap();
    let fit = dir.path().join("fit.toml");
    let o = frk(&[
        "fit",
        "--data",
        s(&data),
        "--knot-grid",
        "3",
        "--resolutions",
        "2",
        "--sigma-eps2",
        "0.05",
        "--method",
        "em",
        "--out",
        s(&fit),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(&fit).unwrap().contains("resolution = 2"));
    let pred = dir.path().join("p.csv");
    let o = frk(&[
        "predict",
        "--model",
        s(&fit),
        "--data",
        s(&data),
        "--grid",
        "0:7:0.5,0:4:1",
        "--level",
        "0.9",
        "--out",
        s(&pred),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (h, rows) = read_csv(&pred);
    assert_eq!(rows.len(), 15 * 5);
    let (lo, hi, yhat) = (
        column(&h, &rows, "lo"),
        column(&h, &rows, "hi"),
        column(&h, &rows, "yhat"),
    );
    assert!((0..rows.len()).all(|i| lo[i] <= yhat[i] && yhat[i] <= hi[i]));
}

#[test]
fn cv_partitions_rows_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let obs = simulated(dir.path()).join("observations_001.csv");
    let run = |folds: &str, out: &Path| {
        let o = frk(&[
            "cv",
            "--data",
            s(&obs),
            "--knot-grid",
            "0.5,256.5:5",
            "--sigma-eps2",
            "1",
            "--method",
            "em",
            "--max-iter",
            "50",
            "--folds",
            folds,
            "--seed",
            "3",
            "--out",
            s(out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        read_csv(out)
    };
    let a = dir.path().join("a.csv");
    let (h, rows) = run("5", &a);
    assert_eq!(rows.len(), 6);
    let n_test = column(&h, &rows, "n_test");
    assert_eq!(n_test[..5].iter().sum::<f64>(), 64.0);
    assert_eq!(n_test[5], 64.0);
    let b = dir.path().join("b.csv");
    run("5", &b);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let loo = dir.path().join("loo.csv");
    let (h, rows) = run("64", &loo);
    assert_eq!(rows.len(), 65);
    assert!(column(&h, &rows, "n_test")[..64].iter().all(|&n| n == 1.0));
}

#[test]
fn evaluate_writes_metrics_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let o = frk(&[
        "evaluate",
        "--k-types",
        "M",
        "--sigma-eps2",
        "1",
        "--b",
        "1.5",
        "--sigma-delta2",
        "1",
        "--designs",
        "random",
        "--replicates",
        "3",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (h, rows) = read_csv(&out);
    assert_eq!(rows.len(), 1);
    assert_eq!(column(&h, &rows, "replicates"), vec![3.0]);
    assert!(column(&h, &rows, "mspe_aecm")[0] > 0.0);
}

#[test]
fn dump_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = frk(&[
        "fit",
        "--dump-config",
        "--sigma-eps2",
        "2.5",
        "--method",
        "em",
        "--knot-grid",
        "7,25",
    ]);
    assert!(o.status.success());
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, stdout(&o)).unwrap();
    let again = frk(&["fit", "--config", s(&cfg), "--dump-config"]);
    assert_eq!(stdout(&o), stdout(&again));
    let over = frk(&["fit", "--config", s(&cfg), "--sigma-eps2", "4", "--dump-config"]);
    assert!(stdout(&over).contains("sigma_eps2 = 4.0"));

    fs::write(&cfg, "unknown_key = 1\n").unwrap();
    assert_eq!(
        frk(&["fit", "--config", s(&cfg), "--dump-config"]).status.code(),
        Some(1)
    );
}

use mnbr_cli::ingest::{
    canonical_csv, canonical_formula, dataset_digest, ingest_csv, ModelFormulaLite,
};
use serde_json::Value;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn mnbr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mnbr"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .expect("binary runs")
}

fn seizure_args(cmd: &str, out: &Path) -> Vec<String> {
    let mut v: Vec<String> = [
        cmd,
        "--data",
        data("seizures.csv").to_str().unwrap(),
        "--id",
        "id",
        "--response",
        "Y",
        "--terms",
        "trt,period,trt:period",
        "--offset",
        "log:weeks",
        "--out",
        out.to_str().unwrap(),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    if cmd != "fit" && cmd != "influence" {
        v.extend(["--seed".into(), "11".into()]);
    }
    v
}

fn run_ok(args: &[String]) {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = mnbr(&refs);
    assert!(out.status.success(), "{:?}: {}", args, String::from_utf8_lossy(&out.stderr));
}

fn exit_code(args: &[&str]) -> i32 {
    mnbr(args).status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn fit_reports_the_seizure_estimates() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&seizure_args("fit", dir.path()));
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("fit.json")).unwrap()).unwrap();
    assert_eq!(v["converged"], true);
    assert_eq!(v["n_clusters"], 59);
    let coef = v["coefficients"].as_array().unwrap();
    let expected = [
        ("(Intercept)", 1.348, 0.153),
        ("trtprogabide", 0.028, 0.211),
        ("period", 0.112, 0.047),
        ("trtprogabide:period", -0.105, 0.065),
        ("phi", 1.607, 0.278),
    ];
    for (row, (name, est, se)) in coef.iter().zip(expected) {
        assert_eq!(row["name"], name);
        let e = row["estimate"].as_f64().unwrap();
        let s = row["se"].as_f64().unwrap();
        assert!((e - est).abs() <= 0.005, "{name}: {e}");
        assert!((s - se).abs() <= 0.003, "{name} se: {s}");
    }
    assert!((v["lambda"].as_f64().unwrap() - 0.789).abs() <= 0.005);
    assert!(v["poisson"]["pearson_over_df"].as_f64().unwrap() > 2.0);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    let digest = mnbr_cli::ingest::sha256_hex(&fs::read(data("seizures.csv")).unwrap());
    assert_eq!(manifest["input_digest"], digest.as_str());
    assert_eq!(manifest["timestamp"], "2023-11-14T22:13:20Z");
}

#[test]
fn fit_with_drop_writes_relative_deviations() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = seizure_args("fit", dir.path());
    args.extend(["--drop".into(), "49".into()]);
    run_ok(&args);
    let prd = fs::read_to_string(dir.path().join("prd.csv")).unwrap();
    let phi: Vec<&str> = prd.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(phi[0], "phi");
    assert!((phi[2].parse::<f64>().unwrap() - 2.060).abs() <= 0.005);
    assert!((phi[3].parse::<f64>().unwrap() + 28.21).abs() <= 1.0);
}

#[test]
fn influence_direction_peaks_at_patient_49() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = seizure_args("influence", dir.path());
    args.extend(["--scheme", "weight", "--level", "subject"].map(String::from));
    run_ok(&args);
    let mut r = csv::Reader::from_path(dir.path().join("local_influence.csv")).unwrap();
    let top = r
        .records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[1].to_string(), rec[3].parse::<f64>().unwrap())
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    assert_eq!(top.0, "49");

    let mut r = csv::Reader::from_path(dir.path().join("global_influence.csv")).unwrap();
    let mut gd: Vec<(String, f64)> = r
        .records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[1].to_string(), rec[2].parse::<f64>().unwrap())
        })
        .collect();
    gd.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut top2 = [gd[0].0.as_str(), gd[1].0.as_str()];
    top2.sort();
    assert_eq!(top2, ["25", "49"]);
}

#[test]
fn influence_scheme_flags() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = seizure_args("influence", dir.path());
    args.extend(["--scheme", "weight-obs"].map(String::from));
    run_ok(&args);
    let local = fs::read_to_string(dir.path().join("local_influence.csv")).unwrap();
    assert_eq!(local.lines().count(), 296);
    assert!(local.lines().nth(1).unwrap().starts_with("1,1:1,"));

    // dummies cannot carry the explanatory perturbation
    let mut args = seizure_args("influence", dir.path());
    args.extend(["--scheme", "explanatory", "--covariate", "period"].map(String::from));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(exit_code(&refs), 2);

    let mut args = seizure_args("influence", dir.path());
    args.extend(["--scheme", "explanatory"].map(String::from));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(exit_code(&refs), 2);
}

#[test]
fn explanatory_scheme_on_a_continuous_covariate() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("id,y,x\n");
    let xs = [0.3, -1.2, 0.8, 1.9, -0.4, 0.1, 2.2, -0.9, 0.5, -1.7, 1.1, 0.0];
    let ys = [0, 1, 12, 15, 2, 3, 30, 25, 1, 0, 8, 14];
    for (k, (x, y)) in xs.iter().zip(ys).enumerate() {
        text.push_str(&format!("c{},{y},{x}\n", k / 2));
    }
    let path = write(dir.path(), "x.csv", &text);
    let out = dir.path().join("out");
    let args = [
        "influence",
        "--data",
        path.to_str().unwrap(),
        "--id",
        "id",
        "--response",
        "y",
        "--terms",
        "x",
        "--scheme",
        "explanatory",
        "--covariate",
        "x",
        "--scale-sx",
        "0.5",
        "--out",
        out.to_str().unwrap(),
    ];
    let o = mnbr(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(out.join("influence.json")).unwrap()).unwrap();
    assert_eq!(v["local"]["scheme"], "explanatory");
    assert_eq!(v["local"]["scale"], 0.5);
}

#[test]
fn residuals_and_envelope_outputs() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&seizure_args("residuals", dir.path()));
    let res = fs::read_to_string(dir.path().join("residuals.csv")).unwrap();
    assert_eq!(res.lines().next().unwrap(), "index,id,measurement,value");
    assert_eq!(res.lines().count(), 60);

    let mut args = seizure_args("residuals", dir.path());
    args.extend(["--model", "poisson"].map(String::from));
    run_ok(&args);
    let res = fs::read_to_string(dir.path().join("residuals.csv")).unwrap();
    assert_eq!(res.lines().count(), 296);

    let mut args = seizure_args("envelope", dir.path());
    args.extend(["--nsim", "19"].map(String::from));
    run_ok(&args);
    let mut r = csv::Reader::from_path(dir.path().join("envelope.csv")).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        ["index", "id", "theoretical", "lower", "median", "upper", "observed"]
    );
    let rows: Vec<Vec<f64>> = r
        .records()
        .map(|rec| rec.unwrap().iter().skip(2).map(|s| s.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 59);
    for w in rows.windows(2) {
        assert!(w[0][4] <= w[1][4], "observed residuals are sorted");
    }
    for row in &rows {
        assert!(row[1] <= row[2] && row[2] <= row[3]);
    }

    let mut args = seizure_args("envelope", dir.path());
    args.extend(["--nsim", "5"].map(String::from));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(exit_code(&refs), 2);
}

#[test]
fn simulate_single_replication() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "study.cfg",
        "generator = poisson_glg\nphi = 3\nn = 40\nm = 3\nbeta = 1.5, 1.0, 0.0\n\
         covariates = standard_normal, dummy_two_level\nreplications = 1\n",
    );
    let out = dir.path().join("sim");
    let o = mnbr(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "5", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(out.join("simulation.json")).unwrap()).unwrap();
    let s = &v["summary"];
    assert_eq!(s["r_effective"], 1);
    assert_eq!(v["config"]["seed"], 5);
    for k in 0..4 {
        let bias = s["bias"][k].as_f64().unwrap();
        let rmse = s["rmse"][k].as_f64().unwrap();
        let mean = s["mean_estimate"][k].as_f64().unwrap();
        let truth = s["truth"][k].as_f64().unwrap();
        assert_eq!(bias, mean - truth);
        assert!((rmse - bias.abs()).abs() <= 1e-12);
    }

    let bad = write(dir.path(), "bad.cfg", "generator = poisson_glg\nphi = 3\n");
    assert_eq!(exit_code(&["simulate", "--config", bad.to_str().unwrap(), "--seed", "1"]), 2);
}

#[test]
fn canonical_csv_round_trips() {
    let formula = ModelFormulaLite::parse("Y", "factor(trt),period,trt:period", "log:weeks", true).unwrap();
    let a = ingest_csv(&data("seizures.csv"), "id", &formula).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "canon.csv", &canonical_csv(&a).unwrap());
    let b = ingest_csv(&path, "id", &canonical_formula(&a)).unwrap();
    assert_eq!(a, b);
    assert_eq!(dataset_digest(&a).unwrap(), dataset_digest(&b).unwrap());

    let formula = ModelFormulaLite::parse("Y", "factor(year)", "log:length", true).unwrap();
    let a = ingest_csv(&data("accidents_quoted.csv"), "road", &formula).unwrap();
    assert_eq!((a.n_clusters(), a.n_covariates()), (7, 5));
    assert_eq!(a.covariate_names()[1], "year1988");
    let path = write(dir.path(), "canon2.csv", &canonical_csv(&a).unwrap());
    let b = ingest_csv(&path, "id", &canonical_formula(&a)).unwrap();
    assert_eq!(dataset_digest(&a).unwrap(), dataset_digest(&b).unwrap());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for (cmd, extra) in [
        ("fit", vec!["--drop", "49,25"]),
        ("residuals", vec![]),
        ("envelope", vec!["--nsim", "19"]),
        ("influence", vec!["--drop", "49"]),
    ] {
        let mut outs = Vec::new();
        for (k, threads) in ["1", "3"].iter().enumerate() {
            let out = dir.path().join(format!("{cmd}{k}"));
            let mut args = seizure_args(cmd, &out);
            args.extend(extra.iter().map(|s| s.to_string()));
            args.extend(["--threads".to_string(), threads.to_string()]);
            run_ok(&args);
            outs.push(out);
        }
        let mut names: Vec<_> = fs::read_dir(&outs[0]).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert!(names.len() >= 2, "{cmd}: {names:?}");
        for name in names {
            let a = fs::read(outs[0].join(&name)).unwrap();
            let b = fs::read(outs[1].join(&name)).unwrap();
            assert!(a == b, "{cmd}: {name:?} differs between runs");
        }
    }
}

#[test]
fn exit_codes_follow_the_fault_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = |p: &PathBuf| p.to_str().unwrap().to_string();
    let fit = |path: &str, terms: &str| {
        exit_code(&["fit", "--data", path, "--id", "id", "--response", "y", "--terms", terms, "--out", d.to_str().unwrap()])
    };

    let missing = write(d, "missing.csv", "id,y\n1,3\n2,4\n");
    assert_eq!(fit(&s(&missing), "x"), 2);

    let negative = write(d, "neg.csv", "id,y,x\n1,3,0.1\n1,-2,0.4\n2,4,0.2\n");
    assert_eq!(fit(&s(&negative), "x"), 2);

    let fractional = write(d, "frac.csv", "id,y,x\n1,3.5,0.1\n2,4,0.2\n");
    assert_eq!(fit(&s(&fractional), "x"), 2);

    // less spread than Poisson: phi runs to the boundary and the
    // information is singular there
    let under = write(d, "under.csv", "id,y,x\n1,3,1\n1,5,2\n2,2,1\n2,4,3\n3,1,2\n3,6,1\n");
    assert_eq!(fit(&s(&under), "x"), 3);
    let report: Value = serde_json::from_str(&fs::read_to_string(d.join("fit.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], false);
    assert!(report["diagnostic"].as_str().unwrap().contains("positive definite"));

    assert_eq!(exit_code(&["fit", "--data", "/nonexistent.csv", "--id", "id", "--response", "y"]), 2);
    assert_eq!(exit_code(&["fit", "--bogus"]), 2);
}

#[test]
fn single_row_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "one.csv", "id,y\nonly,4\n");
    let formula = ModelFormulaLite::parse("y", "", "none", true).unwrap();
    let d = ingest_csv(&path, "id", &formula).unwrap();
    assert_eq!((d.n_clusters(), d.n_measurements()), (1, 1));
    // one cluster cannot identify an intercept and phi
    let code = exit_code(&["fit", "--data", path.to_str().unwrap(), "--id", "id", "--response", "y", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 2);
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use miar::{run_methods, DMatrix, DVector, LinearIVModel, Method};
use miar_cli::data::{write_matrix, Frame};
use proptest::prelude::*;
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn miar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_miar")).args(args).output().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).unwrap_or_else(|_| panic!("stderr: {}", String::from_utf8_lossy(&o.stderr)))
}

fn iv20(extra: &[&str]) -> Vec<String> {
    let path = fixture("iv20.csv");
    let mut v: Vec<String> =
        ["--data", path.to_str().unwrap(), "--y", "y", "--x", "x"].iter().map(|s| s.to_string()).collect();
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn run_owned(head: &[&str], rest: Vec<String>) -> Output {
    let mut args: Vec<&str> = head.to_vec();
    args.extend(rest.iter().map(String::as_str));
    miar(&args)
}

/// Columns read straight from the fixture with the csv crate.
fn fixture_columns(name: &str, cols: &[&str]) -> Vec<Vec<f64>> {
    let mut rd = csv::Reader::from_path(fixture(name)).unwrap();
    let headers = rd.headers().unwrap().clone();
    let idx: Vec<usize> = cols.iter().map(|c| headers.iter().position(|h| h == *c).unwrap()).collect();
    let mut out = vec![Vec::new(); cols.len()];
    for rec in rd.records() {
        let rec = rec.unwrap();
        for (o, &j) in out.iter_mut().zip(&idx) {
            o.push(rec[j].parse().unwrap());
        }
    }
    out
}

#[test]
fn test_output_matches_library_bit_for_bit() {
    let o = run_owned(&["test", "--method", "mi-ar"], iv20(&["--z", "z1,z2,z3,z4", "--beta", "0.5"]));
    let j = stdout_json(&o);
    for field in ["method", "statistic", "critical_value", "p_value", "reject", "n", "k", "schema_version"] {
        assert!(j.get(field).is_some(), "missing {field}");
    }
    let c = fixture_columns("iv20.csv", &["y", "x", "z1", "z2", "z3", "z4"]);
    let n = c[0].len();
    let m = LinearIVModel::new(
        DVector::from_vec(c[0].clone()),
        DMatrix::from_vec(n, 1, c[1].clone()),
        DMatrix::from_fn(n, 4, |i, l| c[2 + l][i]),
    )
    .unwrap();
    let lib = run_methods(&m, &[0.5], &[Method::MiAR], 0.05).remove(0).unwrap();
    assert_eq!(j["method"], "mi-ar");
    assert_eq!(j["statistic"].as_f64().unwrap().to_bits(), lib.statistic.to_bits());
    assert_eq!(j["critical_value"].as_f64().unwrap().to_bits(), lib.critical_value.to_bits());
    assert_eq!(j["reject"].as_bool().unwrap(), lib.reject);
    assert_eq!(j["schema_version"], 1);
}

#[test]
fn wrong_beta_length_is_an_input_error() {
    let o = run_owned(&["test", "--method", "mi-ar"], iv20(&["--z", "z1,z2", "--beta", "0.5,1"]));
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "DimensionMismatch");
    assert!(o.stdout.is_empty());
}

#[test]
fn collinear_instruments_are_a_numerical_error() {
    let o = run_owned(&["test", "--method", "mi-score"], iv20(&["--z", "z*", "--beta", "0.5"]));
    assert_eq!(o.status.code(), Some(3));
    let e = stderr_json(&o);
    assert_eq!(e["error"], "MomentRankDeficient");
    assert_eq!(e["exit_code"], 3);
}

#[test]
fn input_problems_exit_with_two() {
    let cases: Vec<Vec<String>> = vec![
        iv20(&["--z", "nope", "--beta", "0.5"]),
        iv20(&["--z", "z1,z2", "--beta", "abc"]),
        iv20(&["--z", "z1,z2", "--beta", "0.5", "--cluster", "cluster", "--alpha", "1.5"]),
    ];
    for c in cases {
        let o = run_owned(&["test", "--method", "mi-ar"], c);
        assert_eq!(o.status.code(), Some(2));
        stderr_json(&o);
    }
    let o = run_owned(&["test", "--method", "mi-score"], iv20(&["--z", "z1,z2", "--beta", "0.5", "--cluster", "cluster"]));
    assert_eq!(o.status.code(), Some(2));
    let o = miar(&["test", "--method", "mi-ar"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "UsageError");
    let o = run_owned(&["test", "--method", "warp"], iv20(&["--z", "z1", "--beta", "0"]));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("gap.csv");
    std::fs::write(&p, "y,x,z1,z2\n1,2,3,4\n2,,1,0\n0.5,1,2,2\n1,1,1,-1\n").unwrap();
    let o = miar(&["test", "--method", "ar", "--data", p.to_str().unwrap(), "--y", "y", "--x", "x", "--z", "z1,z2", "--beta", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_json(&o)["message"].as_str().unwrap().contains("missing value in column 'x'"));
}

#[test]
fn non_median_quantile_warns() {
    let o = run_owned(&["test", "--method", "mi-ar"], iv20(&["--z", "z1,z2,z3", "--moments", "quantile", "--tau", "0.3", "--beta", "0,0.5"]));
    let j = stdout_json(&o);
    assert_eq!(j["warnings"].as_array().unwrap().len(), 1);
    let o = run_owned(&["test", "--method", "mi-ar"], iv20(&["--z", "z1,z2,z3", "--moments", "quantile", "--beta", "0,0.5"]));
    assert!(stdout_json(&o).get("warnings").is_none());
}

fn close(a: &Value, b: &Value, path: &str) {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs().max(y.abs())), "{path}: {x} vs {y}");
        }
        (Value::Object(x), Value::Object(y)) => {
            assert_eq!(x.keys().collect::<Vec<_>>(), y.keys().collect::<Vec<_>>(), "{path}");
            for (k, v) in x {
                close(v, &y[k], &format!("{path}.{k}"));
            }
        }
        (Value::Array(x), Value::Array(y)) => {
            assert_eq!(x.len(), y.len(), "{path}");
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                close(u, v, &format!("{path}[{i}]"));
            }
        }
        _ => assert_eq!(a, b, "{path}"),
    }
}

fn golden(name: &str, got: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("MIAR_UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(got).unwrap() + "\n").unwrap();
    }
    let want: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    close(got, &want, name);
}

#[test]
fn golden_outputs() {
    let cases: [(&str, &[&str]); 5] = [
        ("mi_ar.json", &["--method", "mi-ar", "--z", "z1,z2,z3,z4", "--beta", "0.5"]),
        ("cluster_mi_ar_controls.json", &["--method", "mi-ar", "--z", "z1,z2,z3", "--f", "const,w", "--cluster", "cluster", "--beta", "0.5"]),
        ("jk_score.json", &["--method", "jk-score", "--z", "z1,z2,z3,z4", "--beta", "0.2"]),
        ("hful.json", &["--method", "hful", "--z", "z1,z2,z3,z4", "--beta", "0.5"]),
        ("ch_exact.json", &["--method", "ch-exact", "--z", "z1,z2,z3,z4", "--beta", "0,0.5", "--draws", "300"]),
    ];
    for (name, args) in cases {
        let o = run_owned(&["test"], iv20(args));
        golden(name, &stdout_json(&o));
    }
}

fn invert(data: &str, method: &str, grid: &str, alphas: &[&str], out: &Path) -> Value {
    let path = fixture(data);
    let mut args = vec!["invert", "--method", method, "--data", path.to_str().unwrap(), "--y", "y", "--x", "x", "--z", "z*", "--grid", grid, "--out", out.to_str().unwrap()];
    for a in alphas {
        args.extend(["--alpha", a]);
    }
    stdout_json(&miar(&args))
}

#[test]
fn one_point_grid_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.csv");
    let j = invert("strong_iv.csv", "mi-ar", "1:1.0001:0.001", &["0.05"], &out);
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("alpha,grid_point,statistic,critical,accepted,error\n"));
    assert_eq!(j["grid"]["points"], 1);
}

#[test]
fn inverted_sets_nest_and_mi_is_shorter() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.csv");
    let mi = invert("strong_iv.csv", "mi-ar", "0:2:0.005", &["0.01", "0.05", "0.1"], &out);
    let ar = invert("strong_iv.csv", "ar", "0:2:0.005", &["0.01", "0.05", "0.1"], &out);
    for j in [&mi, &ar] {
        let sets = j["sets"].as_array().unwrap();
        for w in sets.windows(2) {
            let (a, b) = (&w[0]["interval"], &w[1]["interval"]);
            assert!(a[0].as_f64() <= b[0].as_f64() && b[1].as_f64() <= a[1].as_f64());
        }
    }
    for i in 0..3 {
        let (m, a) = (&mi["sets"][i], &ar["sets"][i]);
        assert_eq!(a["touches_boundary"], false);
        assert!(m["length"].as_f64().unwrap() / a["length"].as_f64().unwrap() < 1.0);
    }
}

const SMALL_SIM: &str = r#"
dgp = "linear_iv"
methods = ["mi-ar", "ar"]
reps = 8
seed = 5
[params]
n = 100
k = [6]
pi = 0.2
"#;

#[test]
fn simulate_is_deterministic_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, SMALL_SIM).unwrap();
    let run = |out: &str, seed: Option<&str>| {
        let out = dir.path().join(out);
        let mut args = vec!["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        if let Some(s) = seed {
            args.extend(["--seed", s]);
        }
        let o = miar(&args);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8(o.stdout).unwrap().starts_with("method"));
        std::fs::read(out).unwrap()
    };
    let a = run("a.csv", None);
    assert_eq!(a, run("b.csv", None));
    assert_eq!(a, run("c.csv", Some("5")));
    assert!(String::from_utf8(a).unwrap().starts_with("method,k,true_param,rate,reps,errors,mc_se\n"));

    std::fs::write(&cfg, SMALL_SIM.replace("reps = 8", "reps = 0")).unwrap();
    let o = miar(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("d.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(&cfg, "dgp = [").unwrap();
    let o = miar(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("d.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "InvalidInput");
}

#[test]
fn bundled_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(root).unwrap() {
        let p = entry.unwrap().path();
        miar::SimConfig::from_path(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn frame_reads_fixture() {
    let f = Frame::read_path(&fixture("iv20.csv")).unwrap();
    assert_eq!(f.nrows(), 20);
    assert_eq!(f.resolve("z*").unwrap(), ["z1", "z2", "z3", "z4", "z1_twice"]);
    assert_eq!(f.labels("cluster").unwrap()[5], "g1");
    assert!(f.numeric("cluster").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip(rows in 1usize..12, cols in 1usize..5, vals in prop::collection::vec(-1e12f64..1e12, 60)) {
        let m = DMatrix::from_fn(rows, cols, |i, j| vals[(i * cols + j) % vals.len()] / (1.0 + j as f64 * 7.0));
        let headers: Vec<String> = (0..cols).map(|j| format!("c{j}")).collect();
        let mut buf = Vec::new();
        write_matrix(&mut buf, &headers, &m).unwrap();
        let f = Frame::from_reader(buf.as_slice()).unwrap();
        prop_assert_eq!(f.headers(), headers.as_slice());
        prop_assert_eq!(f.matrix(&headers).unwrap(), m);
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdspde")).args(args).env_remove("MDSPDE_SEED").output().expect("binary runs")
}

fn cfg(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn validate_canonical_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["validate", "--config", &cfg("canon.toml"), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["report"]["passed"], true);
    assert_eq!(v["report"]["ell"], 0.5);
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("hypotheses.json").exists());
}

#[test]
fn hypothesis_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs().join("canon.toml"))
        .unwrap()
        .replace(r#"g = { family = "zero" }"#, r#"g = { family = "tanh_y_damped", kappa = 0.9 }"#);
    let path = dir.path().join("bad.toml");
    fs::write(&path, text).unwrap();
    let out = run(&["validate", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out =
        run(&["rate", "--config", path.to_str().unwrap(), "--psi", "zero", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["rate", "--config", &cfg("lin.toml")]).status.code(), Some(1));
    assert_eq!(run(&["rate", "--config", &cfg("lin.toml"), "--psi", "cubic"]).status.code(), Some(1));
    assert_eq!(run(&["validate", "--config", "/nonexistent.toml"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("typo.toml");
    let text = fs::read_to_string(configs().join("lin.toml")).unwrap().replace("[run]", "[run]\npaht = 3");
    fs::write(&path, text).unwrap();
    let out = run(&["validate", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("paht"));
}

#[test]
fn rate_of_linear_path() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out =
        run(&["rate", "--config", &cfg("lin.toml"), "--psi", "linear:mode=1,slope=1", "--regime", "R1", "--out", d]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = stdout_json(&out)["S"].as_f64().unwrap();
    assert!((s - 7.0 / 6.0).abs() < 1e-6, "S = {s}");

    let out = run(&["rate", "--config", &cfg("lin.toml"), "--psi", "linear:mode=1,slope=1", "--out", d]);
    let s2 = stdout_json(&out)["S"].as_f64().unwrap();
    assert!((s2 - 7.0 / 6.0 / 1.09).abs() < 1e-4, "S = {s2}");
}

#[test]
fn estimate_matches_gaussian_tail() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = run(&[
        "estimate",
        "--config",
        &cfg("noiseonly.toml"),
        "--event",
        "terminal_mode:1,0.6",
        "--method",
        "is",
        "--n",
        "4000",
        "--out",
        d,
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    let p = v["estimate"]["p_hat"].as_f64().unwrap();
    let se = v["se"].as_f64().unwrap();
    // η₁(T) ~ N(0, √ε(1 − e^{−2})/2)
    let var = 0.05f64.sqrt() * (1.0 - (-2.0f64).exp()) / 2.0;
    let z = 0.6 / var.sqrt();
    let exact = statrs::function::erf::erfc(z / std::f64::consts::SQRT_2);
    assert!((p - exact).abs() <= 3.0 * se, "p = {p} ± {se}, exact {exact}");
    assert!(dir.path().join("estimate_is_seed1_n4000.json").exists());
}

#[test]
fn every_command_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[&[&str]] = &[
        &["simulate", "--config", &cfg("canon.toml"), "--n", "2", "--epsilon", "0.2"],
        &["average", "--config", &cfg("canon.toml"), "--dt", "0.01"],
        &["invariant", "--config", &cfg("canon.toml"), "--n", "100", "--x", "0.5,0.1"],
        &["psi2", "--config", &cfg("lin.toml"), "--m", "2", "--t-max", "12"],
        &["controls", "--config", &cfg("lin.toml"), "--psi", "linear:mode=2,slope=0.5"],
        &["occupation", "--config", &cfg("lin.toml"), "--regime", "R1", "--epsilon", "0.1", "--modes", "2"],
        &["asymptote", "--config", &cfg("lin.toml"), "--event", "terminal_mode:1,1"],
    ];
    for (i, args) in cases.iter().enumerate() {
        let sub = dir.path().join(i.to_string());
        let mut all = args.to_vec();
        all.extend(["--out", sub.to_str().unwrap()]);
        let out = run(&all);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        stdout_json(&out);
        let m: Value = serde_json::from_str(&fs::read_to_string(sub.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["command"], args[0]);
        assert_eq!(m["seed"], 1);
        assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
        for f in m["files"].as_array().unwrap() {
            assert!(sub.join(f.as_str().unwrap()).exists(), "{f} missing");
        }
    }
}

#[test]
fn asymptote_of_linear_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "asymptote",
        "--config",
        &cfg("lin.toml"),
        "--event",
        "terminal_mode:1,0.5",
        "--regime",
        "R1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let v = stdout_json(&out);
    let s = v["asymptote"]["inf_s"].as_f64().unwrap();
    assert!((s - 7.0 / 6.0 * 0.25).abs() < 1e-6, "{s}");
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("noseed.toml");
    fs::write(&path, fs::read_to_string(configs().join("canon.toml")).unwrap().replace("seed = 1\n", "")).unwrap();
    let seed_of = |extra: &[&str], env: Option<&str>| {
        let sub = dir.path().join("o");
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mdspde"));
        cmd.args(["validate", "--config", path.to_str().unwrap(), "--out", sub.to_str().unwrap()]).args(extra);
        match env {
            Some(e) => cmd.env("MDSPDE_SEED", e),
            None => cmd.env_remove("MDSPDE_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        let m: Value = serde_json::from_str(&fs::read_to_string(sub.join("manifest.json")).unwrap()).unwrap();
        m["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(&[], None), 0);
    assert_eq!(seed_of(&[], Some("17")), 17);
    assert_eq!(seed_of(&["--seed", "5"], Some("17")), 5);
}

/// Re-running from the manifest's recorded config and seed reproduces the result files.
#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let args = ["estimate", "--event", "terminal_norm:0.8", "--n", "300", "--epsilon", "0.2", "--seed", "11"];
    let mut a = args.to_vec();
    let c = cfg("canon.toml");
    a.extend(["--config", &c, "--out", first.to_str().unwrap()]);
    assert_eq!(run(&a).status.code(), Some(0));
    let m: Value = serde_json::from_str(&fs::read_to_string(first.join("manifest.json")).unwrap()).unwrap();

    let replay = dir.path().join("replay.toml");
    fs::write(&replay, m["config"].as_str().unwrap()).unwrap();
    let second = dir.path().join("second");
    let seed = m["seed"].to_string();
    let mut b = args.to_vec();
    b.truncate(7);
    b.extend(["--seed", &seed, "--config", replay.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(run(&b).status.code(), Some(0));

    let files = m["files"].as_array().unwrap();
    assert!(!files.is_empty());
    for f in files {
        let f = f.as_str().unwrap();
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f} differs");
    }
}

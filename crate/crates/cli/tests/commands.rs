use std::path::Path;
use std::process::{Command, Output};

use privacyface_cli::embeddings::{encode, Format};
use privacyface::linalg::Matrix;
use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privacyface"))
        .args(args)
        .env_remove("PRIVACYFACE_OUT")
        .env("RUST_LOG", "warn")
        .current_dir(dir)
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

const SMALL: &[&str] = &[
    "--set", "synth.identities_per_client=8",
    "--set", "synth.train_per_identity=4",
    "--set", "synth.eval_per_identity=2",
    "--set", "federation.negative_pairs=100",
    "--set", "dplc.min_cluster_size=2",
    "--rounds", "2",
];

#[test]
fn calibrate_prints_and_writes_noise_scales() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["calibrate", "--size", "512", "--rho", "1.3", "--eps", "1", "--delta", "5e-5", "--out", "o"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    let sigma = printed["tight"]["sigma"].as_f64().unwrap();
    assert!((sigma - 0.016_938_910_464_298_68).abs() < 1e-15);
    assert!((printed["naive"]["sigma"].as_f64().unwrap() - 9.000_724_905_850_79).abs() < 1e-9);
    let ratio = sigma / printed["weak"]["sigma"].as_f64().unwrap();
    assert!((ratio - (0.65f64).cos()).abs() < 1e-12);
    let file = json(&dir.path().join("o/calibrate.json"));
    assert_eq!(file["result"], printed);
    assert_eq!(file["header"]["seed"], 0);
    assert_eq!(file["header"]["config"]["federation"]["dplc"]["min_cluster_size"], 512);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "seed = 5\n[dplc]\nrho = 1.4\nepsilon = 2.0\n").unwrap();
    let out = run(dir.path(), &["calibrate", "--config", "run.toml", "--rho", "1.2"]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["rho"], 1.2);
    assert_eq!(v["epsilon"], 2.0);
    assert_eq!(json(&dir.path().join("out/calibrate.json"))["header"]["seed"], 5);
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_privacyface"))
        .args(["calibrate"])
        .env("PRIVACYFACE_OUT", "from-env")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("from-env/calibrate.json").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["cluster"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));

    let bad = run(dir.path(), &["calibrate", "--rho", "2.0"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("dplc.rho"));
    let typo = run(dir.path(), &["calibrate", "--set", "dplc.rh0=1"]);
    assert_eq!(typo.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&typo.stderr).contains("dplc.rh0"));
    assert_eq!(run(dir.path(), &["occupancy", "--steps", "1"]).status.code(), Some(2));

    std::fs::write(dir.path().join("bad.csv"), "2,3\n1,2,3\n").unwrap();
    assert_eq!(run(dir.path(), &["cluster", "--input", "bad.csv"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["cluster", "--input", "missing.csv"]).status.code(), Some(3));
    assert_eq!(run(dir.path(), &["calibrate", "--config", "missing.toml"]).status.code(), Some(3));
    assert!(!dir.path().join("out/clusters.json").exists());
}

#[test]
fn occupancy_curve_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["occupancy", "--d", "512", "--d", "8", "--rho-min", "0.8", "--rho-max", "1.57", "--steps", "50"]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("out/occupancy.csv")).unwrap();
    let mut lines = text.lines();
    let header: Value = serde_json::from_str(lines.next().unwrap().strip_prefix("# ").unwrap()).unwrap();
    assert_eq!(header["command"], "occupancy");
    assert_eq!(header["parameters"]["steps"], 50);
    assert_eq!(lines.next().unwrap(), "d,rho,ratio");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 100);
    let d512: Vec<&Vec<f64>> = rows.iter().filter(|r| r[0] == 512.0).collect();
    assert!(d512.windows(2).all(|w| w[1][2] >= w[0][2]));
    assert!((d512[49][2] - 0.5).abs() < 0.02);
    assert!(d512[0][2] < 1e-40);
}

#[test]
fn cluster_releases_planted_directions() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = Vec::new();
    for i in 0..40 {
        let t = 0.01 * (i % 7) as f64;
        rows.push(if i % 2 == 0 { vec![t.cos(), t.sin(), 0.0] } else { vec![0.0, 2.0 * t.sin(), -2.0 * t.cos()] });
    }
    let m = Matrix::from_rows(&rows).unwrap();
    std::fs::write(dir.path().join("w.bin"), encode(&m, Format::Binary)).unwrap();
    let out = run(
        dir.path(),
        &["cluster", "--input", "w.bin", "--set", "dplc.min_cluster_size=10", "--set", "dplc.max_queries=3", "--set", "dplc.mode=noise_free"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&dir.path().join("out/clusters.json"));
    let r = &v["result"];
    assert_eq!(r["renormalized_rows"], 20);
    assert_eq!(r["queries_used"], 2);
    assert_eq!(r["ledger_delta"]["epsilon"], 0.0);
    let clusters = r["clusters"].as_array().unwrap();
    assert_eq!(clusters.len(), 2);
    assert!(clusters.iter().all(|c| c["size"] == 20 && c["margin"] == 1.3));
    assert!((clusters[0]["center"][0].as_f64().unwrap() - 1.0).abs() < 0.01);

    let noisy = run(dir.path(), &["cluster", "--input", "w.bin", "--set", "dplc.min_cluster_size=10", "--set", "dplc.max_queries=3"]);
    assert_eq!(noisy.status.code(), Some(0));
    assert_eq!(json(&dir.path().join("out/clusters.json"))["result"]["ledger_delta"]["epsilon"], 2.0);
}

#[test]
fn simulate_is_reproducible_and_mode_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let go = |out: &str, mode: &str| {
        let mut args = vec!["simulate", "--seed", "3", "--out", out, "--mode", mode];
        args.extend_from_slice(SMALL);
        let o = run(dir.path(), &args);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    go("a", "phi-hat");
    let first = (read("a/rounds-phi-hat.jsonl"), read("a/summary-phi-hat.json"));
    go("a", "phi-hat");
    assert_eq!(first, (read("a/rounds-phi-hat.jsonl"), read("a/summary-phi-hat.json")));
    go("a", "phi");

    let text = String::from_utf8(read("a/rounds-phi-hat.jsonl")).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["header"]["seed"], 3);
    assert_eq!(lines[0]["header"]["config"]["federation"]["mode"], "phi-hat");
    assert_eq!(lines[2]["round"], 1);
    assert_eq!(lines[2]["ledger"][0]["epsilon"], 2.0);

    let phi = String::from_utf8(read("a/rounds-phi.jsonl")).unwrap();
    let phi: Vec<Value> = phi.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(phi[1]["online"], lines[1]["online"]);
    assert_eq!(phi[1]["clusters_released"], serde_json::json!([0, 0, 0, 0]));
    assert_eq!(phi[2]["ledger"][0]["epsilon"], 0.0);

    let summary = json(&dir.path().join("a/summary-phi-hat.json"));
    let counts = summary["result"]["fidelity"]["counts"].as_array().unwrap();
    assert_eq!(counts.len(), 100);
    let total: u64 = counts.iter().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(total as usize, summary["result"]["fidelity"]["samples"].as_array().unwrap().len());
    assert_eq!(summary["result"]["clusters_released"], 8);
}

#[test]
fn exported_centers_feed_the_attack() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["simulate", "--mode", "phi", "--export-embeddings"];
    args.extend_from_slice(SMALL);
    assert_eq!(run(dir.path(), &args).status.code(), Some(0));
    let out = run(
        dir.path(),
        &["attack", "--exposed", "out/gallery-phi.csv", "--gallery", "out/gallery-phi.csv", "--k", "1", "--k", "4"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["gallery_identities"], 32);
    assert_eq!(v["rates"][0]["success_rate"], 1.0);
    assert_eq!(v["rates"][1]["chance"], 0.125);

    let out = run(dir.path(), &["attack", "--exposed", "out/centers-phi.csv", "--gallery", "out/gallery-phi.csv", "--k", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let rate = v["rates"][0]["success_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));

    let mismatch = run(dir.path(), &["attack", "--exposed", "out/gallery-phi.csv", "--gallery", "out/gallery-phi.csv", "--samples-per-identity", "3"]);
    assert_eq!(mismatch.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_and_fails_on_impossible_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gradcheck", "--instances", "5"]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["max_relative_error"].as_f64().unwrap() < 1e-5);
    let strict = run(dir.path(), &["gradcheck", "--instances", "2", "--tolerance", "1e-300"]);
    assert_eq!(strict.status.code(), Some(3));
}

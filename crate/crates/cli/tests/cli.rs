use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_partial-bnn");

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

fn cli(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run_ok(args: &[&str]) -> Output {
    let o = cli(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    o
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

const SINE_MAP: &str = r#"
[dataset]
kind = "sine_small"

[architecture]
hidden = [16]
activation = "tanh"

[prior]
variance = 1.0

[likelihood]
kind = "gaussian"
noise = { kind = "fixed", variance = 0.0025 }

[map]
epochs = 300
lr = 0.01

[backend]
kind = "map"
"#;

fn small_hmc(partition: &str) -> String {
    format!(
        r#"
[dataset]
kind = "sine_small"

[architecture]
hidden = [8]
activation = "tanh"

{partition}

[prior]
variance = 1.0

[likelihood]
kind = "gaussian"
noise = {{ kind = "fixed", variance = 0.0025 }}

[map]
epochs = 200
lr = 0.01

[backend]
kind = "hmc"
chains = 2
warmup = 30
samples = 10
leapfrog_steps = 4
"#
    )
}

#[test]
fn map_run_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "map.toml", SINE_MAP);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run_ok(&["run", "-c", cfg.to_str().unwrap(), "--seed", "0", "--out", out.to_str().unwrap()]);
    }
    for f in ["metrics.csv", "predictive.csv", "results.json", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rows = csv_rows(&a.join("metrics.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][1], "map");
    let pred = std::fs::read_to_string(a.join("predictive.csv")).unwrap();
    assert_eq!(pred.lines().count(), 1 + partial_bnn_cli::config::DEFAULT_GRID_POINTS);
}

#[test]
fn json_config_gives_same_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let toml_cfg = write_config(dir.path(), "c.toml", SINE_MAP);
    let value: serde_json::Value = toml::from_str(SINE_MAP).unwrap();
    let json_cfg = write_config(dir.path(), "c.json", &serde_json::to_string(&value).unwrap());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["run", "-c", toml_cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    run_ok(&["run", "-c", json_cfg.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(std::fs::read(a.join("metrics.csv")).unwrap(), std::fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("manifest.json")).unwrap(), std::fs::read(b.join("manifest.json")).unwrap());
}

#[test]
fn manifest_records_hash_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "map.toml", SINE_MAP);
    let spaced = write_config(dir.path(), "spaced.toml", &SINE_MAP.replace(" = ", "   =   "));
    let changed = write_config(dir.path(), "changed.toml", &SINE_MAP.replace("[16]", "[17]"));
    let hash = |c: &Path, out: &str| {
        let out = dir.path().join(out);
        run_ok(&["run", "-c", c.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
        m["config_sha256"].as_str().unwrap().to_owned()
    };
    let h = hash(&cfg, "a");
    assert_eq!(h.len(), 64);
    assert_eq!(hash(&spaced, "b"), h);
    assert_ne!(hash(&changed, "c"), h);
}

#[test]
fn invalid_backend_exits_2_naming_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &SINE_MAP.replace("kind = \"map\"", "kind = \"nuts\""));
    let o = cli(&["run", "-c", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("backend"), "{}", stderr(&o));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn unknown_key_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &SINE_MAP.replace("lr = 0.01", "lr = 0.01\nmomentum = 0.9"));
    let o = cli(&["run", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("map"), "{}", stderr(&o));
    assert!(stderr(&o).contains("momentum"), "{}", stderr(&o));
}

#[test]
fn sweep_rows_are_seeds_times_ks() {
    let dir = tempfile::tempdir().unwrap();
    // Top-level keys have to precede the first table.
    let body = "seeds = [0, 1, 2]\n".to_owned()
        + &small_hmc("[partition]\nkind = \"top_abs_map\"\nk = 1")
        + "\n[sweep]\nks = [2, 4, 8, 25]\n";
    let cfg = write_config(dir.path(), "sweep.toml", &body);
    let out = dir.path().join("o");
    run_ok(&["sweep", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let rows = csv_rows(&out.join("metrics.csv"));
    assert_eq!(rows.len(), 12);
    let mut pairs: Vec<(String, String)> = rows.iter().map(|r| (r[0].clone(), r[4].clone())).collect();
    pairs.dedup();
    assert_eq!(pairs.len(), 12);
    assert!(rows.iter().all(|r| r[1] == "posterior" && r[2] == "hmc"));
    assert_eq!(rows.iter().filter(|r| r[4] == "25").count(), 3);
}

#[test]
fn sweep_without_section_is_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &small_hmc(""));
    let o = cli(&["sweep", "-c", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sweep"));
}

#[test]
fn two_stage_persists_and_reports_both_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ts.toml", &small_hmc("[partition]\nkind = \"top_abs_map\"\nk = 5"));
    let out = dir.path().join("o");
    run_ok(&["two-stage", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let stage1 = out.join("seed_0/stage1");
    for f in ["map.json", "map.bin", "partition.json"] {
        assert!(stage1.join(f).is_file(), "{f}");
    }
    let part: serde_json::Value = serde_json::from_slice(&std::fs::read(stage1.join("partition.json")).unwrap()).unwrap();
    assert_eq!(part["k"], 5);
    let rows = csv_rows(&out.join("metrics.csv"));
    let stages: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(stages, ["map", "posterior"]);
    assert_eq!(rows[1][4], "5");

    // Stage 2 alone reuses the stored artifacts and reproduces the metrics.
    let again = dir.path().join("again");
    std::fs::create_dir_all(again.join("seed_0")).unwrap();
    copy_dir(&stage1, &again.join("seed_0/stage1"));
    run_ok(&["two-stage", "-c", cfg.to_str().unwrap(), "--out", again.to_str().unwrap(), "--stage", "2"]);
    assert_eq!(
        std::fs::read(out.join("metrics.csv")).unwrap(),
        std::fs::read(again.join("metrics.csv")).unwrap()
    );
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), to.join(e.file_name())).unwrap();
    }
}

#[test]
fn two_stage_second_without_first_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ts.toml", &small_hmc("[partition]\nkind = \"top_abs_map\"\nk = 5"));
    let o = cli(&["two-stage", "-c", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap(), "--stage", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing stage-1 artifact"), "{}", stderr(&o));
}

#[test]
fn other_backends_run() {
    let backends = [
        "kind = \"mfvi\"\nepochs = 50\nbatch_size = 16",
        "kind = \"laplace\"\nstructure = \"dense\"\ntune_prior_precision = true",
        "kind = \"laplace\"\npredictive = \"mc\"",
        "kind = \"swag\"\nepochs = 20\nrank = 5\nlr = 0.001",
    ];
    for (i, b) in backends.iter().enumerate() {
        let dir = tempfile::tempdir().unwrap();
        let body = small_hmc("[partition]\nkind = \"layers\"\nlayers = [\"output\"]");
        let body = body.split("[backend]").next().unwrap().to_owned() + "[backend]\n" + b + "\n";
        let cfg = write_config(dir.path(), "c.toml", &body);
        let out = dir.path().join("o");
        run_ok(&["run", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        let rows = csv_rows(&out.join("metrics.csv"));
        assert_eq!(rows.len(), 1, "backend {i}");
        let nll: f64 = rows[0][6].parse().unwrap();
        assert!(nll.is_finite(), "backend {i}: {nll}");
    }
}

#[test]
fn swag_variance_partition_runs() {
    let dir = tempfile::tempdir().unwrap();
    let part = "[partition]\nkind = \"top_swag_variance\"\nfraction = 0.25\nswag = { epochs = 10, rank = 4, lr = 0.001 }";
    let cfg = write_config(dir.path(), "c.toml", &small_hmc(part));
    let out = dir.path().join("o");
    run_ok(&["run", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let rows = csv_rows(&out.join("metrics.csv"));
    // 8 hidden units on 1D data: 25 parameters, a quarter rounded up.
    assert_eq!(rows[0][4], "7");
}

#[test]
fn csv_regression_with_gap_split() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        r#"
[dataset]
kind = "csv"
path = "{}"
targets = ["target"]
split = {{ kind = "gap", feature = 2 }}

[architecture]
hidden = [8]
activation = "leaky_relu"

[prior]
variance = 0.1

[likelihood]
kind = "gaussian"
noise = {{ kind = "learned_precision", shape = 3.0, rate = 1.0, initial_variance = 0.5 }}

[map]
epochs = 100
lr = 0.01

[backend]
kind = "hmc"
chains = 2
warmup = 20
samples = 10
leapfrog_steps = 4
"#,
        data_dir().join("diabetes.csv").display()
    );
    let cfg = write_config(dir.path(), "c.toml", &body);
    let out = dir.path().join("o");
    run_ok(&["run", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!out.join("predictive.csv").exists());
    let rows = csv_rows(&out.join("metrics.csv"));
    assert!(rows[0][6].parse::<f64>().unwrap().is_finite());
}

#[test]
fn classification_chains_feed_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        r#"
save_chain_predictions = true
save_posterior = true

[dataset]
kind = "csv"
path = "{}"
targets = ["species"]
classes = 3
split = {{ kind = "standard", test_fraction = 0.2 }}

[architecture]
hidden = [8]
activation = "relu"

[partition]
kind = "layers"
layers = ["output"]

[prior]
variance = 1.0

[map]
epochs = 200
lr = 0.01

[backend]
kind = "hmc"
chains = 3
warmup = 30
samples = 20
leapfrog_steps = 4
"#,
        data_dir().join("iris.csv").display()
    );
    let cfg = write_config(dir.path(), "c.toml", &body);
    let out = dir.path().join("o");
    run_ok(&["run", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let header = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows = csv_rows(&out.join("metrics.csv"));
    let acc_col = header.lines().next().unwrap().split(',').position(|c| c == "accuracy").unwrap();
    let acc: f64 = rows[0][acc_col].parse().unwrap();
    assert!(acc > 0.8, "accuracy {acc}");
    let seed_dir = out.join("seed_0");
    assert!(seed_dir.join("posterior.json").is_file());
    let chains: Vec<String> = (0..3)
        .map(|i| seed_dir.join(format!("chain_{i}.bin")).to_str().unwrap().to_owned())
        .collect();
    let mut args = vec!["diagnose", "--chains"];
    args.extend(chains.iter().map(String::as_str));
    let o = run_ok(&args);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let agreement = report["agreement"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&agreement));
    assert!(report["bootstrap_agreement"].as_f64().is_some());

    let o = cli(&["diagnose", "--chains", &chains[0]]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("≥2 chains required"), "{}", stderr(&o));
}

#[test]
fn ucda_certificate_json() {
    let o = run_ok(&["ucda-cert", "--tag", "c", "--d", "2", "--m", "3", "--trials", "2000"]);
    let cert: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(cert["tag"], "c");
    assert_eq!(cert["trials"], 2000);
    assert!(cert["max_recovery_error"].as_f64().unwrap() <= 1e-10);

    let o = run_ok(&["ucda-cert", "--tag", "d", "--d", "1", "--m", "2", "--trials", "100", "--lambda", "1", "5", "10"]);
    let certs: Vec<serde_json::Value> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(certs.len(), 3);
    assert_eq!(certs[2]["lambda"], 10.0);
}

#[test]
fn ucda_width_violation_is_reported() {
    let o = cli(&["ucda-cert", "--tag", "a", "--d", "2", "--m", "2", "--width", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!stderr(&o).is_empty());
}

#[test]
fn thread_cap_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "map.toml", SINE_MAP);
    let o = Command::new(BIN)
        .args(["run", "-c", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()])
        .env("PARTIAL_BNN_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let o = Command::new(BIN)
        .args(["run", "-c", cfg.to_str().unwrap()])
        .env("PARTIAL_BNN_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

use std::path::Path;
use std::process::{Command, Output};

use edm_downscale::config::{RunConfig, DEMO_CONFIG, OUTPUT_ROOT_ENV};
use edm_downscale::diagnostics::MetricsReport;

fn cli(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edm-downscale"))
        .args(args)
        .env(OUTPUT_ROOT_ENV, root)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "stdout: {stdout}\nstderr: {}", String::from_utf8_lossy(&out.stderr));
    stdout
}

#[test]
fn full_pipeline_through_the_binary() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("demo.toml");
    std::fs::write(&cfg, DEMO_CONFIG).unwrap();
    let cfg = cfg.to_str().unwrap();

    ok(cli(root.path(), &["gen-data", "--config", cfg]));
    let trained = ok(cli(root.path(), &["train", "--config", cfg]));
    assert_eq!(trained.lines().filter(|l| l.contains("final loss")).count(), 3);
    ok(cli(root.path(), &["sample", "--config", cfg, "--method", "bicubic"]));
    let post = ok(cli(root.path(), &["sample", "--config", cfg, "--method", "posterior-edm", "--ensemble", "3"]));
    assert!(post.contains("3 member(s)"), "{post}");
    ok(cli(root.path(), &["evaluate", "--config", cfg]));

    let dir = root.path().join("demo");
    let report = MetricsReport::read_csv(&dir.join("metrics.csv")).unwrap();
    let demo = RunConfig::demo();
    assert_eq!(report.config_hash, demo.hash());
    for model in ["truth", "bicubic", "posterior-edm"] {
        for ch in &demo.channels {
            assert!(report.get(model, &ch.name, "rmse_climatology").is_some(), "{model}/{}", ch.name);
        }
    }
    assert_eq!(report.get("truth", "temperature", "rmse_climatology"), Some(0.0));
    assert!(report.rows.iter().any(|r| r.model == "posterior-edm" && r.metric.starts_with("measurement_residual")));
    let log = std::fs::read_to_string(dir.join("run.log")).unwrap();
    for stage in ["stage=gen-data", "stage=train", "stage=sample", "stage=evaluate"] {
        assert!(log.contains(stage), "{stage} missing from run.log");
    }
}

#[test]
fn seed_flag_changes_the_data() {
    let root = tempfile::tempdir().unwrap();
    let write = |name: &str| {
        let p = root.path().join(format!("{name}.toml"));
        std::fs::write(&p, DEMO_CONFIG.replace("run_name = \"demo\"", &format!("run_name = \"{name}\""))).unwrap();
        p
    };
    let (a, b) = (write("a"), write("b"));
    ok(cli(root.path(), &["gen-data", "--config", a.to_str().unwrap(), "--seed", "1"]));
    ok(cli(root.path(), &["gen-data", "--config", b.to_str().unwrap(), "--seed", "2"]));
    let read = |n: &str| std::fs::read(root.path().join(n).join("data/fine.f32")).unwrap();
    assert_ne!(read("a"), read("b"));
}

#[test]
fn invalid_config_lists_every_problem() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("bad.toml");
    std::fs::write(&cfg, "[grid]\nn_lat = 15\nfactor = 2\n[data]\nn_test = 1\n[guidance]\nsigma_y = -1.0\n").unwrap();
    let out = cli(root.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["grid", "n_test", "sigma_y"] {
        assert!(err.contains(needle), "{needle} not reported: {err}");
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("typo.toml");
    std::fs::write(&cfg, "[sampling]\nn_ensembel = 3\n").unwrap();
    let out = cli(root.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_ensembel"));
}

#[test]
fn corrupt_bundle_names_the_file() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("demo.toml");
    std::fs::write(&cfg, DEMO_CONFIG).unwrap();
    let cfg = cfg.to_str().unwrap();
    ok(cli(root.path(), &["gen-data", "--config", cfg]));
    let payload = root.path().join("demo/data/fine.f32");
    let mut bytes = std::fs::read(&payload).unwrap();
    bytes[17] ^= 0x40;
    std::fs::write(&payload, bytes).unwrap();
    let out = cli(root.path(), &["sample", "--config", cfg, "--method", "bicubic"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("fine.f32") && err.contains("hash mismatch"), "{err}");
}

#[test]
fn sampling_before_training_fails_cleanly() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("demo.toml");
    std::fs::write(&cfg, DEMO_CONFIG).unwrap();
    let cfg = cfg.to_str().unwrap();
    ok(cli(root.path(), &["gen-data", "--config", cfg]));
    let out = cli(root.path(), &["sample", "--config", cfg, "--method", "regressor"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("regressor"));
}

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 1

[data]
num_source_domains = 6
num_val_domains = 1
num_target_domains = 2
num_classes = 3
input_dim = 4
samples_per_domain_range = [40, 60]
num_families = 3

[experts]
num_experts = 3

[experts.train]
epochs = 2

[student]
hidden_dims = [8]
feature_dim = 8

[aggregator]
heads = 2

[pretrain.student]
epochs = 2

[pretrain.aggregator]
epochs = 1

[meta]
epochs = 2
n_q = 8

[adapt]
n_su = 8
"#;

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metadmoe"))
        .arg("--config")
        .arg(dir.join("cfg.toml"))
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), SMALL).unwrap();
    dir
}

fn record(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn staged_commands_produce_artifacts() {
    let dir = setup();
    let out = dir.path().join("out");
    let data = out.join("data");
    let data = data.to_str().unwrap();
    ok(cli(dir.path(), &["gen-data"]));
    assert!(out.join("data").is_dir());
    ok(cli(dir.path(), &["train-experts", "--data", data]));
    assert!(out.join("experts/manifest.json").exists());
    assert!(out.join("experts/super_domains.json").exists());
    ok(cli(dir.path(), &["pretrain", "--data", data]));
    assert!(out.join("pretrain/manifest.json").exists());
    assert!(out.join("erm/manifest.json").exists());
    ok(cli(dir.path(), &["meta-train", "--data", data]));
    for f in [
        "manifest.json",
        "curve.csv",
        "mask_log.json",
        "counters.json",
    ] {
        assert!(out.join("meta").join(f).exists(), "{f}");
    }
    let curve = std::fs::read_to_string(out.join("meta/curve.csv")).unwrap();
    assert!(curve.starts_with("epoch,mean_loss,val_metric,beta_a,beta_s"));
    ok(cli(dir.path(), &["adapt-eval", "--data", data]));
    let r = record(&out.join("record.json"));
    for m in ["meta_dmoe", "meta_dmoe_no_adapt", "erm", "arm_bn"] {
        let acc = r["reports"][m]["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc), "{m}");
    }
    assert_eq!(r["reports"]["erm"]["adaptation_update_count"], 0);
}

#[test]
fn run_is_reproducible_and_reportable() {
    let a = setup();
    let b = setup();
    ok(cli(a.path(), &["run"]));
    ok(cli(b.path(), &["run"]));
    let ra = record(&a.path().join("out/record.json"));
    let rb = record(&b.path().join("out/record.json"));
    assert_eq!(ra["reports"], rb["reports"]);
    assert_eq!(ra["checkpoint_hash"], rb["checkpoint_hash"]);
    assert_eq!(ra["config_hash"], rb["config_hash"]);

    let report_dir = a.path().join("report");
    let out = Command::new(env!("CARGO_BIN_EXE_metadmoe"))
        .arg("--out")
        .arg(&report_dir)
        .arg("report")
        .arg(a.path().join("out"))
        .arg(b.path().join("out/record.json"))
        .output()
        .unwrap();
    ok(out);
    let table = std::fs::read_to_string(report_dir.join("table.csv")).unwrap();
    assert!(
        table.lines().any(|l| l.contains(",meta_dmoe,2,")),
        "{table}"
    );
    assert!(report_dir.join("summary.csv").exists());
}

#[test]
fn seed_flag_overrides_config() {
    let dir = setup();
    ok(cli(dir.path(), &["--seed", "7", "gen-data"]));
    let other = setup();
    ok(cli(other.path(), &["gen-data"]));
    let read =
        |d: &tempfile::TempDir| std::fs::read(d.path().join("out/data/domain_0000_x.f32")).unwrap();
    assert_ne!(read(&dir), read(&other));
    let again = setup();
    ok(cli(again.path(), &["gen-data"]));
    assert_eq!(read(&again), read(&other));
}

#[test]
fn ablation_and_privacy_runs() {
    let dir = setup();
    let stdout = ok(cli(
        dir.path(),
        &[
            "ablate",
            "--axis",
            "num_experts",
            "--values",
            "1,2",
            "--repeats",
            "1",
        ],
    ));
    assert!(stdout.contains("table.csv"));
    let failures: serde_json::Value = record(&dir.path().join("out/failures.json"));
    assert_eq!(failures.as_array().unwrap().len(), 0);
    assert!(dir
        .path()
        .join("out/ablation_num_experts_accuracy.svg")
        .exists());

    let p = tempfile::tempdir().unwrap();
    std::fs::write(p.path().join("cfg.toml"), SMALL).unwrap();
    let stdout = ok(cli(p.path(), &["privacy-run"]));
    assert!(
        stdout.contains("0 private reads after expert pretraining"),
        "{stdout}"
    );
    let audit = record(&p.path().join("out/audit_log.json"));
    assert!(!audit.as_array().unwrap().is_empty());
}

#[test]
fn errors_are_structured() {
    let dir = setup();
    std::fs::write(dir.path().join("cfg.toml"), "[adapt]\nalpha = -1.0\n").unwrap();
    let out = cli(dir.path(), &["gen-data"]);
    assert!(!out.status.success());
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "invalid_config");

    let dir = setup();
    let missing = dir.path().join("nowhere");
    let out = cli(
        dir.path(),
        &["adapt-eval", "--model", missing.to_str().unwrap()],
    );
    assert!(!out.status.success());
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert!(err["error"]["message"]
        .as_str()
        .unwrap()
        .contains("nowhere"));
}

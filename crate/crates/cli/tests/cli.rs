use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
eval_episodes = 3
ckm_test_samples = 200
dynamic_samples = 200
checkpoint_every = 0

[collect]
samples = 300

[ckm]
epochs = 2
members = 3
width = 16
blocks = 1

[ppo]
max_episodes = 2
rollout_len = 64
minibatch = 32
epochs = 1
hidden = [16, 16]
"#;

fn uavckm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uavckm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn uavckm")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn manifest(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn full_workflow_writes_artifacts_and_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();

    ok(&uavckm(d, &["--config", "tiny.toml", "--out", "data", "ckm", "collect", "--cep", "5"]));
    assert!(d.join("data/world.json").exists());
    let csv = std::fs::read_to_string(d.join("data/dataset.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("uav_x,uav_y,uav_z,gu_x,gu_y,gu_z,flag,env_hash,gain_db"), "{header}");
    assert_eq!(csv.lines().count(), 301);
    assert_eq!(manifest(&d.join("data"))["command"], "ckm collect");

    let common = ["--config", "tiny.toml", "--world", "data/world.json"];
    let with = |extra: &[&'static str]| -> Vec<&str> { common.iter().copied().chain(extra.iter().copied()).collect() };

    ok(&uavckm(d, &with(&["--out", "model", "ckm", "train", "--dataset", "data/dataset.csv"])));
    assert!(d.join("model/ckm.json").exists());
    ok(&uavckm(d, &with(&["--out", "model_eval", "ckm", "eval", "--model", "model/ckm.json"])));
    let m = manifest(&d.join("model_eval"));
    assert!(m["summary"]["clean_rmse_db"].as_f64().unwrap().is_finite());
    ok(&uavckm(d, &with(&["--out", "upd", "ckm", "update", "--model", "model/ckm.json", "--dataset", "data/dataset.csv"])));
    assert!(d.join("upd/ckm_updated.json").exists());

    ok(&uavckm(d, &with(&["--out", "pec", "rl", "train", "--scheme", "PEC_PPO", "--ckm", "model/ckm.json"])));
    let curve = std::fs::read_to_string(d.join("pec/learning_curve.csv")).unwrap();
    assert_eq!(curve.lines().next().unwrap(), "episode,return,completion_time,success,punishment_count");
    assert_eq!(curve.lines().count(), 3);

    ok(&uavckm(d, &with(&["--out", "los", "rl", "train", "--scheme", "LOS_PPO"])));
    assert!(!d.join("los/ckm_robust.json").exists());
    assert!(!d.join("los/ckm_ordinary.json").exists());

    ok(&uavckm(d, &with(&[
        "--out", "pec_eval", "rl", "eval", "--checkpoint", "pec/policy.json", "--scheme", "PEC_PPO", "--ckm", "model/ckm.json",
    ])));
    for f in ["eval_rows.csv", "eval_report.json", "trajectory.csv", "power_payload.csv", "manifest.json"] {
        assert!(d.join("pec_eval").join(f).exists(), "{f}");
    }
    let power = std::fs::read_to_string(d.join("pec_eval/power_payload.csv")).unwrap();
    for line in power.lines().skip(1) {
        let p = line.split(',').nth(1).unwrap();
        assert!(p == "OFF" || p == "26", "{p}");
    }

    ok(&uavckm(d, &with(&[
        "--out", "sweep", "exp", "cep-sweep", "--checkpoint", "pec/policy.json", "--scheme", "PEC_PPO", "--ckm", "model/ckm.json", "--ceps", "0,5",
    ])));
    let sweep = std::fs::read_to_string(d.join("sweep/cep_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);

    ok(&uavckm(d, &with(&[
        "--out", "dyn", "exp", "dynamic", "--pec", "pec/policy.json", "--os", "pec/policy.json", "--ckm", "model/ckm.json",
    ])));
    let m = manifest(&d.join("dyn"));
    assert_eq!(m["summary"]["removed_buildings"], 3);
    assert!(d.join("dyn/world_after.json").exists());
}

#[test]
fn exit_codes_follow_error_category() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();

    std::fs::write(d.join("bad.json"), r#"{"seeds": []}"#).unwrap();
    let o = uavckm(d, &["--config", "bad.json", "ckm", "collect"]);
    assert_eq!(o.status.code(), Some(2));

    let o = uavckm(d, &["--out", "x", "rl", "eval", "--checkpoint", "missing.json", "--scheme", "LOS_PPO"]);
    assert_eq!(o.status.code(), Some(3));

    std::fs::write(d.join("junk.json"), "{\"format\": \"uavckm-ppo\", \"version\": 99, \"payload\": {}}").unwrap();
    let o = uavckm(d, &["--out", "x", "rl", "eval", "--checkpoint", "junk.json", "--scheme", "LOS_PPO"]);
    assert_eq!(o.status.code(), Some(4));

    let o = uavckm(d, &["rl", "train", "--scheme", "NOT_A_SCHEME"]);
    assert_eq!(o.status.code(), Some(2));
}

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
agents = 2
rounds = 3

[scene_inline]
seed = 3
feature_dim = 16

[scene_inline.camera]
width = 32
height = 32
hfov_deg = 50.0

[[scene_inline.primitive]]
shape = { kind = "sphere", radius = 0.15 }
position = [-0.3, 0.0, 0.15]
albedo = [0.7, 0.4, 0.2]
class_id = 1

[[scene_inline.primitive]]
shape = { kind = "box", half_extents = [0.12, 0.12, 0.12] }
position = [0.3, 0.0, 0.12]
albedo = [0.2, 0.5, 0.8]
class_id = 2

[train]
rays_per_round = 16
samples_per_ray = 8
shared_rays_per_peer = 8

[eval]
max_cells = 16
gt_density = 500.0
"#;

fn instmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_instmap")).args(args).env("INSTMAP_LOG", "off").output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("experiment.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn error_json(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("error.json")).unwrap()).unwrap()
}

#[test]
fn unknown_field_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("warp_speed = 9\n{TINY}"));
    let out = tmp.path().join("out");
    let o = instmap(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_json(&out);
    assert_eq!(e["kind"], "config");
    assert!(e["error"].as_str().unwrap().contains("warp_speed"));
}

#[test]
fn empty_sweep_axis_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{TINY}\n[sweep]\ncomm_rates = []\n"));
    let out = tmp.path().join("out");
    let o = instmap(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--axis", "comm-rate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&out)["kind"], "config");
}

#[test]
fn run_then_retrieve() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("out");
    let o = instmap(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--rounds", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.json", "metrics.csv", "traffic.csv", "rounds.csv", "config.resolved.toml", "instances.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["rounds"], 2);

    let o = instmap(&["retrieve", "--run", out.to_str().unwrap(), "--query-class", "2", "--weights", "0.5,0.5", "--top", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "rank,global_id,class_id,score");
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1].split(',').nth(2), Some("2"));
}

#[test]
fn retrieve_rejects_single_weight() {
    let o = instmap(&["retrieve", "--run", "/nonexistent", "--query-class", "1", "--weights", "1.0"]);
    assert_eq!(o.status.code(), Some(2));
}

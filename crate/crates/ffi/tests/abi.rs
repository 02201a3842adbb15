use std::ffi::{CStr, CString};
use std::ptr;

use instmap_ffi::*;

const TINY: &str = r#"
agents = 2
rounds = 2

[scene_inline]
seed = 3
feature_dim = 16

[scene_inline.camera]
width = 32
height = 32
hfov_deg = 50.0

[[scene_inline.primitive]]
shape = { kind = "sphere", radius = 0.2 }
position = [0.0, 0.0, 0.2]
albedo = [0.7, 0.4, 0.2]
class_id = 1

[train]
rays_per_round = 16
samples_per_ray = 8
shared_rays_per_peer = 8

[eval]
max_cells = 16
gt_density = 500.0
"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(instmap_last_error_message()) }.to_str().unwrap().to_owned()
}

fn config(text: &str) -> (InstmapStatus, *mut InstmapConfig) {
    let text = CString::new(text).unwrap();
    let mut cfg = ptr::null_mut();
    let s = unsafe { instmap_config_from_toml(text.as_ptr(), &mut cfg) };
    (s, cfg)
}

#[test]
fn null_arguments_are_reported() {
    let mut cfg = ptr::null_mut();
    let s = unsafe { instmap_config_from_toml(ptr::null(), &mut cfg) };
    assert_eq!(s, InstmapStatus::NullArgument);
    assert!(cfg.is_null());
    assert!(last_error().contains("toml"));
    assert_eq!(unsafe { instmap_config_validate(ptr::null()) }, InstmapStatus::NullArgument);
    assert!(unsafe { instmap_run_metrics_json(ptr::null()) }.is_null());
    assert_eq!(unsafe { instmap_field_encoded_len(ptr::null()) }, 0);
    unsafe {
        instmap_config_free(ptr::null_mut());
        instmap_run_free(ptr::null_mut());
        instmap_field_free(ptr::null_mut());
    }
}

#[test]
fn unknown_field_is_a_config_error() {
    let (s, cfg) = config("agents = 2\nwarp_speed = 9\n");
    assert_eq!(s, InstmapStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("warp_speed"), "{}", last_error());
}

#[test]
fn validation_failure_sets_message() {
    let (s, cfg) = config(TINY);
    assert_eq!(s, InstmapStatus::Ok);
    assert_eq!(last_error(), "");
    unsafe {
        assert_eq!(instmap_config_set_agents(cfg, 0), InstmapStatus::Ok);
        assert_eq!(instmap_config_validate(cfg), InstmapStatus::Config);
        assert!(last_error().contains("agents"));
        let mut run = ptr::null_mut();
        assert_eq!(instmap_run(cfg, 0, &mut run), InstmapStatus::Config);
        assert!(run.is_null());
        instmap_config_free(cfg);
    }
}

#[test]
fn run_and_query_fields() {
    let (s, cfg) = config(TINY);
    assert_eq!(s, InstmapStatus::Ok);
    unsafe {
        assert_eq!(instmap_config_set_rounds(cfg, 3), InstmapStatus::Ok);
        let mut run = ptr::null_mut();
        assert_eq!(instmap_run(cfg, 7, &mut run), InstmapStatus::Ok, "{}", last_error());
        let json = CStr::from_ptr(instmap_run_metrics_json(run)).to_str().unwrap();
        let v: serde_json::Value = serde_json::from_str(json).unwrap();
        assert_eq!(v["rounds"], 3);
        let (mut ratio, mut comp) = (f64::NAN, f64::NAN);
        assert_eq!(instmap_run_completion(run, &mut ratio, &mut comp), InstmapStatus::Ok);
        assert!((0.0..=100.0).contains(&ratio));

        let dir = tempfile::tempdir().unwrap();
        let d = CString::new(dir.path().to_str().unwrap()).unwrap();
        assert_eq!(instmap_run_write(run, cfg, d.as_ptr()), InstmapStatus::Ok);
        assert!(dir.path().join("metrics.json").exists());
        assert!(dir.path().join("config.resolved.toml").exists());

        let mut field = ptr::null_mut();
        assert_eq!(instmap_run_field(run, 0, 999, &mut field), InstmapStatus::Pipeline);
        assert_eq!(instmap_run_field(run, 0, 1, &mut field), InstmapStatus::Ok, "{}", last_error());
        let n = instmap_field_encoded_len(field);
        let mut buf = vec![0u8; n];
        assert_eq!(instmap_field_encode(field, buf.as_mut_ptr(), n - 1), InstmapStatus::Protocol);
        assert_eq!(instmap_field_encode(field, buf.as_mut_ptr(), n), InstmapStatus::Ok);
        let mut copy = ptr::null_mut();
        assert_eq!(instmap_field_decode(buf.as_ptr(), n, &mut copy), InstmapStatus::Ok);
        assert_eq!(instmap_field_decode(buf.as_ptr(), n - 3, &mut ptr::null_mut()), InstmapStatus::Protocol);

        let xyz = [0.0, 0.0, 0.2, 0.1, 0.1, 0.1];
        let (mut s1, mut c1) = ([0.0; 2], [0.0; 6]);
        let (mut s2, mut c2) = ([0.0; 2], [0.0; 6]);
        assert_eq!(instmap_field_query(field, xyz.as_ptr(), 2, s1.as_mut_ptr(), c1.as_mut_ptr()), InstmapStatus::Ok);
        assert_eq!(instmap_field_query(copy, xyz.as_ptr(), 2, s2.as_mut_ptr(), c2.as_mut_ptr()), InstmapStatus::Ok);
        assert_eq!((s1, c1), (s2, c2));
        assert!(s1.iter().all(|v| (0.0..=1.0).contains(v)));

        instmap_field_free(field);
        instmap_field_free(copy);
        instmap_run_free(run);
        instmap_config_free(cfg);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/instmap.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    let version = unsafe { CStr::from_ptr(instmap_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

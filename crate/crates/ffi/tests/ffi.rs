use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use metadmoe_ffi::*;

const SMALL: &str = r#"
seed = 3

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
epochs = 1
n_q = 8

[adapt]
n_su = 8
"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mdm_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn take_string(p: *mut std::ffi::c_char) -> String {
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { mdm_string_free(p) };
    s
}

fn small_config() -> *mut MdmConfig {
    let toml = CString::new(SMALL).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(
        unsafe { mdm_config_from_toml(toml.as_ptr(), &mut cfg) },
        MdmStatus::Ok,
        "{}",
        last_error()
    );
    cfg
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(mdm_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    let mut cfg = ptr::null_mut();
    let status = unsafe { mdm_config_from_toml(ptr::null(), &mut cfg) };
    assert_eq!(status, MdmStatus::NullPointer);
    assert!(cfg.is_null());
    assert!(last_error().contains("toml"));
    assert_eq!(
        unsafe { mdm_config_default(ptr::null_mut()) },
        MdmStatus::NullPointer
    );
    unsafe {
        mdm_config_free(ptr::null_mut());
        mdm_registry_free(ptr::null_mut());
        mdm_model_free(ptr::null_mut());
        mdm_string_free(ptr::null_mut());
    }
}

#[test]
fn invalid_config_maps_to_status() {
    let bad = CString::new("[adapt]\nnum_inner_steps = 0\n").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(
        unsafe { mdm_config_from_toml(bad.as_ptr(), &mut cfg) },
        MdmStatus::InvalidConfig
    );
    assert!(!last_error().is_empty());
    let unknown = CString::new("[nope]\nx = 1\n").unwrap();
    let status = unsafe { mdm_config_from_toml(unknown.as_ptr(), &mut cfg) };
    assert_ne!(status, MdmStatus::Ok);
}

#[test]
fn config_hash_follows_seed() {
    let cfg = small_config();
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(mdm_config_hash(cfg, &mut h), MdmStatus::Ok);
        let a = take_string(h);
        assert_eq!(a.len(), 64);
        assert_eq!(mdm_config_set_seed(cfg, 99), MdmStatus::Ok);
        assert_eq!(mdm_config_hash(cfg, &mut h), MdmStatus::Ok);
        assert_ne!(take_string(h), a);
        let mut t = ptr::null_mut();
        assert_eq!(mdm_config_to_toml(cfg, &mut t), MdmStatus::Ok);
        assert!(take_string(t).contains("seed = 99"));
        mdm_config_free(cfg);
    }
}

#[test]
fn pipeline_save_load_and_predict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    unsafe {
        let mut reg = ptr::null_mut();
        assert_eq!(mdm_registry_generate(cfg, &mut reg), MdmStatus::Ok);
        assert_eq!(mdm_registry_num_domains(reg), 9);
        assert_eq!(mdm_registry_input_dim(reg), 4);

        let data = CString::new(dir.path().join("data").to_str().unwrap()).unwrap();
        assert_eq!(
            mdm_registry_save(reg, data.as_ptr()),
            MdmStatus::Ok,
            "{}",
            last_error()
        );
        let mut reloaded = ptr::null_mut();
        assert_eq!(
            mdm_registry_load(data.as_ptr(), &mut reloaded),
            MdmStatus::Ok
        );
        assert_eq!(mdm_registry_num_domains(reloaded), 9);
        mdm_registry_free(reloaded);

        let mut model = ptr::null_mut();
        let mut record = ptr::null_mut();
        assert_eq!(
            mdm_run_pipeline(cfg, reg, &mut model, &mut record),
            MdmStatus::Ok,
            "{}",
            last_error()
        );
        let record: serde_json::Value = serde_json::from_str(&take_string(record)).unwrap();
        assert!(record["reports"]["meta_dmoe"]["accuracy"].is_number());
        assert_eq!(mdm_model_num_outputs(model), 3);

        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut adapted = vec![0.0; 30];
        assert_eq!(
            mdm_model_adapt_predict(
                model,
                x.as_ptr(),
                10,
                x.as_ptr(),
                10,
                4,
                1,
                adapted.as_mut_ptr(),
                30
            ),
            MdmStatus::Ok,
            "{}",
            last_error()
        );
        let mut plain = vec![0.0; 30];
        assert_eq!(
            mdm_model_adapt_predict(
                model,
                ptr::null(),
                0,
                x.as_ptr(),
                10,
                4,
                0,
                plain.as_mut_ptr(),
                30
            ),
            MdmStatus::Ok
        );
        assert!(adapted.iter().all(|v| v.is_finite()));
        assert_ne!(adapted, plain);

        let mut small = vec![0.0; 5];
        assert_eq!(
            mdm_model_adapt_predict(
                model,
                ptr::null(),
                0,
                x.as_ptr(),
                10,
                4,
                0,
                small.as_mut_ptr(),
                5
            ),
            MdmStatus::BufferTooSmall
        );
        assert_eq!(
            mdm_model_adapt_predict(
                model,
                ptr::null(),
                0,
                x.as_ptr(),
                8,
                5,
                0,
                plain.as_mut_ptr(),
                30
            ),
            MdmStatus::Shape
        );
        assert_eq!(
            mdm_model_adapt_predict(
                model,
                ptr::null(),
                0,
                x.as_ptr(),
                10,
                4,
                1,
                plain.as_mut_ptr(),
                30
            ),
            MdmStatus::NullPointer
        );

        let ckpt = CString::new(dir.path().join("model").to_str().unwrap()).unwrap();
        assert_eq!(
            mdm_model_save(model, ckpt.as_ptr()),
            MdmStatus::Ok,
            "{}",
            last_error()
        );
        let mut loaded = ptr::null_mut();
        assert_eq!(mdm_model_load(ckpt.as_ptr(), &mut loaded), MdmStatus::Ok);
        let mut again = vec![0.0; 30];
        assert_eq!(
            mdm_model_adapt_predict(
                loaded,
                x.as_ptr(),
                10,
                x.as_ptr(),
                10,
                4,
                1,
                again.as_mut_ptr(),
                30
            ),
            MdmStatus::Ok
        );
        assert_eq!(again, adapted);

        mdm_model_free(loaded);
        mdm_model_free(model);
        mdm_registry_free(reg);
        mdm_config_free(cfg);
    }
}

#[test]
fn missing_checkpoint_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = CString::new(dir.path().join("absent").to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    let status = unsafe { mdm_model_load(p.as_ptr(), &mut m) };
    assert!(
        matches!(status, MdmStatus::Io | MdmStatus::Format),
        "{status:?}"
    );
    assert!(m.is_null());
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(include.join("metadmoe.h").exists());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "metadmoe.h"
int run(const char *toml) {
    MdmConfig *cfg = NULL;
    MdmStatus s = mdm_config_from_toml(toml, &cfg);
    if (s != MDM_STATUS_OK) return (int)s;
    MdmRegistry *reg = NULL;
    s = mdm_registry_generate(cfg, &reg);
    MdmModel *model = NULL;
    char *record = NULL;
    if (s == MDM_STATUS_OK) s = mdm_run_pipeline(cfg, reg, &model, &record);
    mdm_string_free(record);
    mdm_model_free(model);
    mdm_registry_free(reg);
    mdm_config_free(cfg);
    return (int)s;
}
"#,
    )
    .unwrap();
    for (compiler, lang) in [("gcc", "c"), ("g++", "c++")] {
        let Ok(out) = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg("-I")
            .arg(&include)
            .arg(&src)
            .output()
        else {
            eprintln!("{compiler} not available, skipping");
            continue;
        };
        assert!(
            out.status.success(),
            "{compiler}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use advocacy_ffi::*;

fn new_model(variant: &str, classes: usize) -> *mut AdvModel {
    let v = CString::new(variant).unwrap();
    let mut m = ptr::null_mut();
    let status = unsafe { adv_model_new(v.as_ptr(), classes, 1, 8, 8, 7, &mut m) };
    assert_eq!(status, AdvStatus::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let p = adv_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn predict_and_log_probs_agree() {
    let m = new_model("advocacy", 3);
    assert_eq!(unsafe { adv_model_num_classes(m) }, 3);
    let images: Vec<f32> = (0..2 * 64).map(|i| (i % 7) as f32 / 7.0).collect();
    let mut lp = vec![0f32; 6];
    let mut labels = [0u32; 2];
    unsafe {
        assert_eq!(adv_model_log_probs(m, images.as_ptr(), 2, lp.as_mut_ptr()), AdvStatus::Ok);
        assert_eq!(adv_model_predict(m, images.as_ptr(), 2, labels.as_mut_ptr()), AdvStatus::Ok);
        adv_model_free(m);
    }
    for (row, &label) in lp.chunks(3).zip(&labels) {
        let total: f32 = row.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-5);
        let best = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
        assert_eq!(label as usize, best + 1);
    }
}

#[test]
fn attention_maps_are_in_unit_range() {
    let m = new_model("attention", 2);
    let image = vec![0.5f32; 64];
    let mut a = vec![-1f32; 64];
    unsafe {
        assert_eq!(adv_model_attention(m, image.as_ptr(), 1, a.as_mut_ptr()), AdvStatus::Ok);
        assert_eq!(adv_model_attention(m, image.as_ptr(), 2, a.as_mut_ptr()), AdvStatus::InvalidArgument);
        adv_model_free(m);
    }
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn checkpoint_round_trip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let m = new_model("multi_attention", 2);
    let images = vec![0.25f32; 64];
    let (mut before, mut after) = ([0f32; 2], [0f32; 2]);
    let mut loaded = ptr::null_mut();
    unsafe {
        assert_eq!(adv_model_save(m, path.as_ptr()), AdvStatus::Ok);
        assert_eq!(adv_model_load(path.as_ptr(), &mut loaded), AdvStatus::Ok);
        adv_model_log_probs(m, images.as_ptr(), 1, before.as_mut_ptr());
        adv_model_log_probs(loaded, images.as_ptr(), 1, after.as_mut_ptr());
        adv_model_free(m);
        adv_model_free(loaded);
    }
    assert_eq!(before, after);
}

#[test]
fn errors_map_to_status_codes() {
    let mut m = ptr::null_mut();
    let bad = CString::new("judge_only").unwrap();
    let missing = CString::new("/nonexistent/dir/m.ckpt").unwrap();
    let mut out = 0f64;
    unsafe {
        assert_eq!(adv_model_new(bad.as_ptr(), 2, 1, 8, 8, 0, &mut m), AdvStatus::InvalidArgument);
        assert!(last_error().contains("judge_only"));
        let v = CString::new("advocacy").unwrap();
        assert_eq!(adv_model_new(v.as_ptr(), 1, 1, 8, 8, 0, &mut m), AdvStatus::Config);
        assert!(last_error().contains("model.num_classes"));
        assert_eq!(adv_model_new(ptr::null(), 2, 1, 8, 8, 0, &mut m), AdvStatus::NullPointer);
        assert_eq!(adv_model_load(missing.as_ptr(), &mut m), AdvStatus::Io);
        assert!(m.is_null());
        assert_eq!(adv_model_predict(ptr::null(), ptr::null(), 1, ptr::null_mut()), AdvStatus::NullPointer);
        assert_eq!(adv_model_num_classes(ptr::null()), 0);
        adv_model_free(ptr::null_mut());
        assert_eq!(adv_error_reduction(0.9942, 0.9916, &mut out), AdvStatus::Ok);
        assert_eq!(adv_error_reduction(0.9, 1.0, &mut out), AdvStatus::InvalidArgument);
    }
    assert_eq!(out.round(), 31.0);
    let version = unsafe { CStr::from_ptr(adv_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps/
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("libadvocacy_ffi.a");
    assert!(lib.is_file(), "static library not built at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "advocacy.h"
int main(void) {
    AdvModel *m = NULL;
    if (adv_model_new("honest_advocacy", 2, 1, 8, 8, 1, &m) != ADV_STATUS_OK) return 1;
    float img[64] = {0};
    uint32_t label = 0;
    if (adv_model_predict(m, img, 1, &label) != ADV_STATUS_OK) return 2;
    if (label < 1 || label > 2) return 3;
    if (adv_model_load("/nonexistent", &m) != ADV_STATUS_IO) return 4;
    if (adv_last_error() == NULL) return 5;
    adv_model_free(m);
    printf("ok %s\n", adv_version());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let cc = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .expect("run cc");
    assert!(cc.status.success(), "{}", String::from_utf8_lossy(&cc.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}

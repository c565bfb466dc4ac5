use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use mrrn_ffi::*;

const TINY: &str = "[arch]\npreset = \"tiny\"\n";

fn last_error() -> String {
    unsafe { CStr::from_ptr(mrrn_last_error()) }.to_string_lossy().into_owned()
}

fn new_model(config: &str, seed: u64) -> *mut MrrnModel {
    let c = CString::new(config).unwrap();
    let mut m = ptr::null_mut();
    let st = unsafe { mrrn_model_new(c.as_ptr(), seed, &mut m) };
    assert_eq!(st, MrrnStatus::Ok, "{}", last_error());
    assert!(!m.is_null());
    m
}

fn shape(m: *const MrrnModel) -> (usize, usize) {
    let (mut s, mut k) = (0, 0);
    assert_eq!(unsafe { mrrn_model_shape(m, &mut s, &mut k) }, MrrnStatus::Ok);
    (s, k)
}

fn images(n: usize, s: usize) -> Vec<f32> {
    (0..n * s * s).map(|i| ((i * 7) % 13) as f32 / 13.0).collect()
}

#[test]
fn tiny_model_counts_and_forward() {
    let m = new_model(TINY, 1);
    let mut count = 0;
    assert_eq!(unsafe { mrrn_model_param_count(m, &mut count) }, MrrnStatus::Ok);
    assert_eq!(count, 1914);
    let (s, k) = shape(m);
    let x = images(2, s);
    let mut logits = vec![0f32; 2 * k * s * s];
    assert_eq!(unsafe { mrrn_model_set_training(m, true) }, MrrnStatus::Ok);
    let st = unsafe { mrrn_model_forward(m, x.as_ptr(), x.len(), 2, logits.as_mut_ptr(), logits.len()) };
    assert_eq!(st, MrrnStatus::Ok, "{}", last_error());
    assert!(logits.iter().all(|v| v.is_finite()));
    assert_eq!(last_error(), "");

    let mut labels = vec![255u8; 2 * s * s];
    let st = unsafe { mrrn_model_predict(m, x.as_ptr(), x.len(), 2, labels.as_mut_ptr(), labels.len()) };
    assert_eq!(st, MrrnStatus::Ok);
    // Labels agree with the argmax of the logits from the same mode.
    for (p, &l) in labels.iter().enumerate() {
        let (n, pix) = (p / (s * s), p % (s * s));
        let at = |c: usize| logits[(n * k + c) * s * s + pix];
        let best = (0..k).fold(0, |b, c| if at(c) > at(b) { c } else { b });
        assert_eq!(l as usize, best);
    }
    unsafe { mrrn_model_free(m) };
}

#[test]
fn fresh_model_in_eval_mode_reports_engine_error() {
    let m = new_model(TINY, 2);
    assert_eq!(unsafe { mrrn_model_set_training(m, false) }, MrrnStatus::Ok);
    let (s, k) = shape(m);
    let x = images(1, s);
    let mut logits = vec![0f32; k * s * s];
    let st = unsafe { mrrn_model_forward(m, x.as_ptr(), x.len(), 1, logits.as_mut_ptr(), logits.len()) };
    assert_eq!(st, MrrnStatus::Engine);
    assert!(!last_error().is_empty());
    unsafe { mrrn_model_free(m) };
}

#[test]
fn argument_errors_map_to_status_codes() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mrrn_model_new(ptr::null(), 0, &mut m) }, MrrnStatus::NullArgument);
    assert!(last_error().contains("config"));
    let bad = CString::new("threads = 4\n").unwrap();
    assert_eq!(unsafe { mrrn_model_new(bad.as_ptr(), 0, &mut m) }, MrrnStatus::InvalidArgument);
    let garbage = CString::new("[arch\n").unwrap();
    assert_eq!(unsafe { mrrn_model_new(garbage.as_ptr(), 0, &mut m) }, MrrnStatus::InvalidArgument);
    assert!(m.is_null());

    let m = new_model(TINY, 3);
    let (s, _) = shape(m);
    let x = images(1, s);
    let mut short = vec![0f32; 3];
    let st = unsafe { mrrn_model_forward(m, x.as_ptr(), x.len(), 1, short.as_mut_ptr(), short.len()) };
    assert_eq!(st, MrrnStatus::BufferSize);
    let st = unsafe { mrrn_model_forward(m, ptr::null(), x.len(), 1, short.as_mut_ptr(), short.len()) };
    assert_ne!(st, MrrnStatus::Ok);
    let mut n = 0;
    assert_eq!(unsafe { mrrn_model_param_count(ptr::null(), &mut n) }, MrrnStatus::NullArgument);
    unsafe { mrrn_model_free(m) };
    unsafe { mrrn_model_free(ptr::null_mut()) };
}

#[test]
fn checkpoint_round_trip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    for precision in ["f32", "f64"] {
        let a = new_model(&format!("precision = \"{precision}\"\n{TINY}"), 4);
        let b = new_model(&format!("precision = \"{precision}\"\n{TINY}"), 5);
        assert_eq!(unsafe { mrrn_model_save(a, path.as_ptr()) }, MrrnStatus::Ok, "{}", last_error());
        let mut c = ptr::null_mut();
        assert_eq!(unsafe { mrrn_model_load(path.as_ptr(), &mut c) }, MrrnStatus::Ok);
        let (mut ac, mut ab) = (false, true);
        assert_eq!(unsafe { mrrn_model_equal(a, c, &mut ac) }, MrrnStatus::Ok);
        assert_eq!(unsafe { mrrn_model_equal(a, b, &mut ab) }, MrrnStatus::Ok);
        assert!(ac && !ab);
        unsafe { [a, b, c].into_iter().for_each(|m| mrrn_model_free(m)) };
    }
    let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { mrrn_model_load(missing.as_ptr(), &mut c) }, MrrnStatus::Io);
    std::fs::write(dir.path().join("junk"), b"not a checkpoint").unwrap();
    let junk = CString::new(dir.path().join("junk").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mrrn_model_load(junk.as_ptr(), &mut c) }, MrrnStatus::Decode);
}

#[test]
fn dsc_and_phantom() {
    let pred = [1u8, 1, 0, 2];
    let truth = [1u8, 0, 0, 2];
    let mut d = 0.0;
    assert_eq!(unsafe { mrrn_dsc(pred.as_ptr(), truth.as_ptr(), 4, 1, &mut d) }, MrrnStatus::Ok);
    assert!((d - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(unsafe { mrrn_dsc(pred.as_ptr(), truth.as_ptr(), 4, 5, &mut d) }, MrrnStatus::Ok);
    assert_eq!(d, 1.0);

    let s = 64;
    let (mut img, mut mask) = (vec![0f32; s * s], vec![9u8; s * s]);
    assert_eq!(unsafe { mrrn_phantom_generate(s, 7, img.as_mut_ptr(), mask.as_mut_ptr()) }, MrrnStatus::Ok);
    assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(mask.iter().all(|&l| l <= 5));
    for label in 1..=5 {
        assert!(mask.contains(&label), "label {label} missing");
    }
    let (mut img2, mut mask2) = (vec![0f32; s * s], vec![0u8; s * s]);
    unsafe { mrrn_phantom_generate(s, 7, img2.as_mut_ptr(), mask2.as_mut_ptr()) };
    assert_eq!(img, img2);
    assert_eq!(mask, mask2);
    assert_eq!(unsafe { mrrn_phantom_generate(0, 7, img.as_mut_ptr(), mask.as_mut_ptr()) }, MrrnStatus::InvalidArgument);
}

/// The static library cargo built next to this test binary.
fn static_lib() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().join("libmrrn_ffi.a")
}

const C_SMOKE: &str = r#"
#include <stdio.h>
#include "mrrn.h"
int main(void) {
    MrrnModel *m = NULL;
    if (mrrn_model_new("[arch]\npreset = \"tiny\"\n", 1, &m) != MRRN_STATUS_OK) return 1;
    uint64_t n = 0;
    if (mrrn_model_param_count(m, &n) != MRRN_STATUS_OK) return 2;
    size_t s = 0, k = 0;
    mrrn_model_shape(m, &s, &k);
    float img[16 * 16] = {0};
    float logits[2 * 16 * 16];
    if (s != 16 || k != 2) return 3;
    if (mrrn_model_forward(m, img, s * s, 1, logits, 3) != MRRN_STATUS_BUFFER_SIZE) return 4;
    printf("%llu %s\n", (unsigned long long)n, mrrn_last_error());
    mrrn_model_free(m);
    return 0;
}
"#;

#[test]
fn header_compiles_and_links_from_c() {
    let lib = static_lib();
    assert!(lib.exists(), "{} missing", lib.display());
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let exe = dir.path().join("smoke");
    std::fs::write(&src, C_SMOKE).unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("1914 logits holds 3 values"), "{text}");
}

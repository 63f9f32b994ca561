use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use fup_lab_ffi::*;

fn last_error() -> String {
    let p = fup_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn cantor_measure_round_trip() {
    let digits = [0u32, 2];
    let mut mu = ptr::null_mut();
    let st = unsafe { fup_measure_cantor(3, digits.as_ptr(), 2, 4, &mut mu) };
    assert_eq!(st, FupStatus::Ok);
    unsafe {
        assert_eq!(fup_measure_len(mu), 16);
        assert_eq!(fup_measure_dim(mu), 1);
        let mut coords = vec![0.0; 16];
        let mut weights = vec![0.0; 16];
        assert_eq!(fup_measure_copy(mu, coords.as_mut_ptr(), weights.as_mut_ptr()), FupStatus::Ok);
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(coords.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(coords[0], 0.0);
        fup_measure_free(mu);
    }
}

#[test]
fn cantor_norm_matches_core() {
    let a = [0u32, 2];
    let mut r = 0.0;
    let st = unsafe { fup_cantor_norm(3, a.as_ptr(), 2, a.as_ptr(), 2, 3, &mut r) };
    assert_eq!(st, FupStatus::Ok);
    let spec = fup_lab::cantor::CantorSpec::line(3, &a, &a, 3);
    let want = fup_lab::cantor::fup_norm(&spec, &fup_lab::Budget::from_env()).unwrap().r;
    assert_eq!(r, want);
}

#[test]
fn invalid_input_sets_message() {
    let digits = [0u32, 7];
    let mut mu = ptr::null_mut();
    let st = unsafe { fup_measure_cantor(3, digits.as_ptr(), 2, 2, &mut mu) };
    assert_eq!(st, FupStatus::InvalidInput);
    assert!(mu.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn null_pointers_are_reported() {
    let st = unsafe { fup_measure_cloud(1, 5, 1e-3, 0, ptr::null_mut()) };
    assert_eq!(st, FupStatus::NullPointer);
    let mut v = 0.0;
    let st = unsafe { fup_regularity_constant(ptr::null(), 0.01, 1.0, 0.5, &mut v) };
    assert_eq!(st, FupStatus::NullPointer);
    assert!(last_error().contains("measure"));
    unsafe {
        fup_measure_free(ptr::null_mut());
        fup_schottky_free(ptr::null_mut());
        assert_eq!(fup_measure_len(ptr::null()), 0);
    }
}

#[test]
fn fio_norm_of_coarse_cloud_is_total_mass_bound() {
    let mut x = ptr::null_mut();
    let mut y = ptr::null_mut();
    unsafe {
        assert_eq!(fup_measure_cloud(1, 20, 1e-3, 1, &mut x), FupStatus::Ok);
        assert_eq!(fup_measure_cloud(1, 30, 1e-3, 2, &mut y), FupStatus::Ok);
        let mut n = 0.0;
        // h far above the diameter: every phase is ~0, so the norm is |X|^{1/2}|Y|^{1/2}
        assert_eq!(fup_fio_norm(x, y, 1e9, &mut n), FupStatus::Ok);
        assert!((n - 1.0).abs() < 1e-6, "{n}");
        assert_eq!(fup_fio_norm(x, y, 1e-3, &mut n), FupStatus::Ok);
        assert!(n > 0.0 && n <= 1.0 + 1e-12);
        fup_measure_free(x);
        fup_measure_free(y);
    }
}

#[test]
fn schottky_handles() {
    let mut g = ptr::null_mut();
    unsafe {
        assert_eq!(fup_schottky_default(&mut g), FupStatus::Ok);
        assert_eq!(fup_schottky_genus(g), 2);
        let mut m = 0.0;
        assert_eq!(fup_schottky_circle_margin(g, &mut m), FupStatus::Ok);
        assert!(m > 0.0);
        let mut mu = ptr::null_mut();
        assert_eq!(fup_schottky_limit_set(g, 3, &mut mu), FupStatus::Ok);
        // 2g(2g-1)^{n-1} reduced words of length n
        assert_eq!(fup_measure_len(mu), 4 * 3 * 3);
        fup_measure_free(mu);
        fup_schottky_free(g);
    }
    let cx = [0.0, 3.0];
    let cy = [0.0, 0.0];
    let r = [2.0, 2.0];
    let mut bad = ptr::null_mut();
    let st = unsafe { fup_schottky_from_disks(cx.as_ptr(), cy.as_ptr(), r.as_ptr(), 2, &mut bad) };
    assert_eq!(st, FupStatus::InvalidInput);
}

#[test]
fn run_config_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CString::new(r#"{"command": "cantor", "parameters": {"kmax": 3}}"#).unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let st = unsafe { fup_run_config(cfg.as_ptr(), out.as_ptr()) };
    assert_eq!(st, FupStatus::Ok);
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("cantor_sweep.csv").exists());
    let bad = CString::new(r#"{"command": "cantor", "extra": 1}"#).unwrap();
    assert_eq!(unsafe { fup_run_config(bad.as_ptr(), out.as_ptr()) }, FupStatus::InvalidInput);
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(fup_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn static_lib() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let profile_dir = exe.parent()?.parent()?;
    let lib = profile_dir.join("libfup_lab_ffi.a");
    lib.exists().then_some(lib)
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "fup_lab.h"

int main(void) {
    uint32_t a[2] = {0, 2};
    double r = -1.0;
    if (fup_cantor_norm(3, a, 2, a, 2, 3, &r) != FUP_STATUS_OK) return 10;
    FupMeasure *mu = NULL;
    if (fup_measure_cantor(3, a, 2, 3, &mu) != FUP_STATUS_OK) return 11;
    if (fup_measure_len(mu) != 8) return 12;
    fup_measure_free(mu);
    uint32_t bad[2] = {0, 9};
    if (fup_measure_cantor(3, bad, 2, 3, &mu) != FUP_STATUS_INVALID_INPUT) return 13;
    if (fup_last_error() == NULL) return 14;
    printf("%.17g\n", r);
    return 0;
}
"#;

#[test]
fn header_compiles_and_links_from_c() {
    let Some(lib) = static_lib() else {
        eprintln!("static library not built alongside the test binary; skipping C link check");
        return;
    };
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let exe = dir.path().join("main");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status();
    let Ok(status) = status else {
        eprintln!("no C compiler available; skipping C link check");
        return;
    };
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C program exit {:?}", out.status.code());
    let r: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    let spec = fup_lab::cantor::CantorSpec::line(3, &[0, 2], &[0, 2], 3);
    let want = fup_lab::cantor::fup_norm(&spec, &fup_lab::Budget::from_env()).unwrap().r;
    assert_eq!(r, want);
}

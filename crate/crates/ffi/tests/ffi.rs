use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use lawreg_ffi::*;

fn last_error() -> String {
    let mut needed = 0usize;
    unsafe {
        assert_eq!(lawreg_last_error(ptr::null_mut(), 0, &mut needed), LawregStatus::Ok);
        let mut buf = vec![0 as std::ffi::c_char; needed];
        assert_eq!(lawreg_last_error(buf.as_mut_ptr(), buf.len(), &mut needed), LawregStatus::Ok);
        CStr::from_ptr(buf.as_ptr()).to_str().unwrap().to_owned()
    }
}

fn grid_1d(n: usize, f: impl Fn(f64) -> f64) -> *mut LawregGrid {
    let vals: Vec<f64> = (0..n).map(|i| f(i as f64 / (n - 1) as f64)).collect();
    let mut g = ptr::null_mut();
    let st = unsafe { lawreg_grid_new(1, &0.0, &1.0, &n, vals.as_ptr(), &mut g) };
    assert_eq!(st, LawregStatus::Ok, "{}", last_error());
    g
}

// root of (1 + s) ln(1 + s) = 1
fn log_entropy_level() -> f64 {
    let (mut lo, mut hi) = (0.0f64, 10.0f64);
    for _ in 0..200 {
        let m = 0.5 * (lo + hi);
        if (1.0 + m) * (1.0 + m).ln() < 1.0 {
            lo = m;
        } else {
            hi = m;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(lawreg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn scalar_functions() {
    let c = std::f64::consts::PI.powf(-0.25);
    assert!((lawreg_hermite_h(0, 0.0) - c).abs() < 1e-14);
    let t = 0.7;
    let h1 = 2f64.sqrt() * t * c * (-0.5 * t * t).exp();
    assert!((lawreg_hermite_h(1, t) - h1).abs() < 1e-14);
    assert!(lawreg_neumann_kernel(0.0, 0.2, 0.3).is_nan());
    assert!((lawreg_neumann_kernel(0.1, 0.2, 0.7) - lawreg_neumann_kernel(0.1, 0.7, 0.2)).abs() < 1e-14);
    // long-time limit is the uniform density
    assert!((lawreg_neumann_kernel(20.0, 0.1, 0.9) - 1.0).abs() < 1e-12);
}

#[test]
fn young_handles() {
    unsafe {
        let mut e = ptr::null_mut();
        assert_eq!(lawreg_young_log_entropy(&mut e), LawregStatus::Ok);
        let mut v = 0.0;
        assert_eq!(lawreg_young_eval(e, 2.0, &mut v), LawregStatus::Ok);
        assert!((v - 3.0 * 3f64.ln()).abs() < 1e-14);
        assert_eq!(lawreg_young_beta(e, 1e6, &mut v), LawregStatus::Ok);
        assert!(v > 0.0 && v.is_finite());
        lawreg_young_free(e);

        let mut p = ptr::null_mut();
        assert_eq!(lawreg_young_power(3.0, &mut p), LawregStatus::Ok);
        assert_eq!(lawreg_young_eval(p, 2.0, &mut v), LawregStatus::Ok);
        assert!((v - 8.0).abs() < 1e-12);
        // beta for t^p is t^{1 - 1/p}
        assert_eq!(lawreg_young_beta(p, 1e3, &mut v), LawregStatus::Ok);
        assert!((v - 100.0).abs() < 1e-6, "{v}");
        lawreg_young_free(p);

        let mut bad = ptr::null_mut();
        assert_eq!(lawreg_young_power(0.5, &mut bad), LawregStatus::NotYoung);
        assert!(bad.is_null());
        assert!(!last_error().is_empty());
        lawreg_young_free(ptr::null_mut());
    }
}

#[test]
fn norms_match_closed_forms() {
    unsafe {
        let mut p2 = ptr::null_mut();
        assert_eq!(lawreg_young_power(2.0, &mut p2), LawregStatus::Ok);
        let mut ent = ptr::null_mut();
        assert_eq!(lawreg_young_log_entropy(&mut ent), LawregStatus::Ok);

        let c = grid_1d(201, |_| 2.0);
        assert_eq!(lawreg_grid_len(c), 201);
        let mut v = 0.0;
        assert_eq!(lawreg_luxembourg_norm(c, p2, &mut v), LawregStatus::Ok);
        assert!((v - 2.0).abs() < 1e-9, "{v}");
        assert_eq!(lawreg_luxembourg_norm(c, ent, &mut v), LawregStatus::Ok);
        let want = 2.0 / log_entropy_level();
        assert!((v - want).abs() < 1e-8 * want, "{v} vs {want}");

        let x = grid_1d(401, |x| x);
        assert_eq!(lawreg_luxembourg_norm(x, p2, &mut v), LawregStatus::Ok);
        assert!((v - 1.0 / 3f64.sqrt()).abs() < 1e-4, "{v}");
        assert_eq!(lawreg_sobolev_orlicz_norm(x, 1, p2, &mut v), LawregStatus::Ok);
        // derivative norms drop a two-node edge buffer; the integrals run over [a, b] up to O(h)
        let (a, b): (f64, f64) = (2.0 / 400.0, 1.0 - 2.0 / 400.0);
        let want = ((b * b * b - a * a * a) / 3.0).sqrt() + (b - a).sqrt();
        assert!((v - want).abs() < 2.0 / 400.0, "{v} vs {want}");

        lawreg_grid_free(c);
        lawreg_grid_free(x);
        lawreg_young_free(p2);
        lawreg_young_free(ent);
    }
}

#[test]
fn grid_errors() {
    unsafe {
        let mut g = ptr::null_mut();
        let vals = [1.0; 4];
        assert_eq!(lawreg_grid_new(1, &0.0, &1.0, &4, ptr::null(), &mut g), LawregStatus::NullPointer);
        assert!(last_error().contains("null pointer"));
        assert_eq!(lawreg_grid_new(0, &0.0, &1.0, &4, vals.as_ptr(), &mut g), LawregStatus::InvalidArgument);
        assert_eq!(lawreg_grid_new(1, &1.0, &0.0, &4, vals.as_ptr(), &mut g), LawregStatus::InvalidGrid);
        assert!(g.is_null());
        assert_eq!(lawreg_grid_len(ptr::null()), 0);
        let mut v = 0.0;
        assert_eq!(lawreg_luxembourg_norm(ptr::null(), ptr::null(), &mut v), LawregStatus::NullPointer);
    }
}

#[test]
fn success_clears_last_error() {
    unsafe {
        let mut bad = ptr::null_mut();
        assert_eq!(lawreg_young_power(1.0, &mut bad), LawregStatus::NotYoung);
        assert!(!last_error().is_empty());
        let mut e = ptr::null_mut();
        assert_eq!(lawreg_young_log_entropy(&mut e), LawregStatus::Ok);
        assert_eq!(last_error(), "");
        lawreg_young_free(e);
    }
}

#[test]
fn measures_and_dk() {
    unsafe {
        let a = [-1.0, 0.0, 1.0];
        let b = [-1.0, 0.5, 1.0];
        let mut mu = ptr::null_mut();
        let mut nu = ptr::null_mut();
        assert_eq!(lawreg_measure_new(1, 3, a.as_ptr(), ptr::null(), &mut mu), LawregStatus::Ok);
        let w = [0.25, 0.5, 0.25];
        assert_eq!(lawreg_measure_new(1, 3, b.as_ptr(), w.as_ptr(), &mut nu), LawregStatus::Ok);
        let mut d = -1.0;
        assert_eq!(lawreg_dk_lower(mu, mu, 1, &0.0, 1.0, &mut d), LawregStatus::Ok);
        assert!(d.abs() < 1e-12, "{d}");
        assert_eq!(lawreg_dk_lower(mu, nu, 1, &0.0, 1.0, &mut d), LawregStatus::Ok);
        assert!(d > 1e-3, "{d}");
        let mut m = ptr::null_mut();
        assert_eq!(lawreg_measure_new(0, 3, a.as_ptr(), w.as_ptr(), &mut m), LawregStatus::DimensionMismatch);
        assert!(m.is_null());
        lawreg_measure_free(mu);
        lawreg_measure_free(nu);
    }
}

#[test]
fn run_round_trip() {
    let cfg = CString::new(r#"{"kind": "orlicz-check", "params": {"cases": 4, "holder_cases": 10}}"#).unwrap();
    unsafe {
        let mut r = ptr::null_mut();
        assert_eq!(lawreg_run(cfg.as_ptr(), &mut r), LawregStatus::Ok, "{}", last_error());
        assert!(lawreg_report_pass(r));
        assert_eq!(lawreg_report_verdict(r), LawregVerdict::None);

        let mut needed = 0usize;
        assert_eq!(lawreg_report_json(r, ptr::null_mut(), 0, &mut needed), LawregStatus::Ok);
        assert!(needed > 2);
        let mut small = vec![0 as std::ffi::c_char; needed - 1];
        assert_eq!(lawreg_report_json(r, small.as_mut_ptr(), small.len(), &mut needed), LawregStatus::BufferTooSmall);
        assert!(last_error().contains("need"));
        let mut buf = vec![0 as std::ffi::c_char; needed];
        assert_eq!(lawreg_report_json(r, buf.as_mut_ptr(), buf.len(), &mut needed), LawregStatus::Ok);
        let text = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
        let doc: serde_json::Value = serde_json::from_str(text).unwrap();
        assert_eq!(doc["kind"], "orlicz-check");
        assert_eq!(doc["pass"], true);
        lawreg_report_free(r);
    }
}

#[test]
fn run_rejects_bad_config() {
    let cfg = CString::new("{\"kind\": \"orlicz-check\",\n \"params\": {\"nope\": 1}}").unwrap();
    unsafe {
        let mut r = ptr::null_mut();
        assert_eq!(lawreg_run(cfg.as_ptr(), &mut r), LawregStatus::ConfigError);
        assert!(r.is_null());
        let msg = last_error();
        assert!(msg.starts_with("2:"), "{msg}");
        assert!(msg.contains("nope"), "{msg}");
        assert_eq!(lawreg_run(ptr::null(), &mut r), LawregStatus::NullPointer);
        let bytes = [0xffu8, 0xfe, 0];
        assert_eq!(lawreg_run(bytes.as_ptr() as *const _, &mut r), LawregStatus::InvalidUtf8);
    }
}

fn header() -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include").join("lawreg.h");
    std::fs::read_to_string(path).expect("generated header")
}

#[test]
fn header_declares_the_api() {
    let h = header();
    for name in [
        "lawreg_last_error",
        "lawreg_version",
        "lawreg_hermite_h",
        "lawreg_neumann_kernel",
        "lawreg_young_log_entropy",
        "lawreg_young_power",
        "lawreg_young_eval",
        "lawreg_young_beta",
        "lawreg_young_free",
        "lawreg_grid_new",
        "lawreg_grid_len",
        "lawreg_luxembourg_norm",
        "lawreg_sobolev_orlicz_norm",
        "lawreg_grid_free",
        "lawreg_measure_new",
        "lawreg_dk_lower",
        "lawreg_measure_free",
        "lawreg_run",
        "lawreg_report_pass",
        "lawreg_report_verdict",
        "lawreg_report_json",
        "lawreg_report_free",
        "LAWREG_STATUS_BUFFER_TOO_SMALL = 4",
        "LAWREG_STATUS_PANIC = 16",
        "LAWREG_VERDICT_INCONCLUSIVE = 2",
        "typedef struct LawregReport LawregReport;",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

const SMOKE: &str = r#"
#include <stdio.h>
#include <string.h>
#include "lawreg.h"

int main(void) {
    LawregYoung *e = NULL;
    double v = 0.0;
    if (lawreg_young_power(2.0, &e) != LAWREG_STATUS_OK) return 1;
    if (lawreg_young_eval(e, 3.0, &v) != LAWREG_STATUS_OK || v != 9.0) return 2;
    lawreg_young_free(e);
    LawregReport *r = NULL;
    if (lawreg_run("{\"kind\": \"bogus\"}", &r) != LAWREG_STATUS_CONFIG_ERROR) return 3;
    char msg[256];
    size_t need = 0;
    if (lawreg_last_error(msg, sizeof msg, &need) != LAWREG_STATUS_OK || strlen(msg) == 0) return 4;
    printf("%s\n", lawreg_version());
    return 0;
}
"#;

// Builds a C program against the header and the static library when a C compiler exists.
#[test]
fn c_smoke_program() {
    let Some(cc) = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
    else {
        eprintln!("no C compiler, skipping");
        return;
    };
    let test_exe = std::env::current_exe().unwrap();
    let profile_dir = test_exe.parent().and_then(|d| d.parent()).unwrap().to_path_buf();
    let lib = profile_dir.join("liblawreg_ffi.a");
    if !lib.exists() {
        // cargo test links the rlib only; build the static library for the same profile
        let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
        let mut cmd = Command::new(cargo);
        cmd.args(["build", "--lib", "-p", "lawreg-ffi"]);
        if profile_dir.file_name().is_some_and(|n| n == "release") {
            cmd.arg("--release");
        }
        let status = cmd.status().unwrap();
        assert!(status.success(), "building the static library failed");
    }
    assert!(lib.exists(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, SMOKE).unwrap();
    let exe = dir.path().join("smoke");
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let out = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), env!("CARGO_PKG_VERSION"));
}

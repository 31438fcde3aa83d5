use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use qstab_ffi::*;

fn last_error() -> String {
    let p = qstab_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn benchmark(rho: f64) -> *mut QstabSystem {
    let mut sys = ptr::null_mut();
    assert_eq!(unsafe { qstab_system_benchmark(rho, rho, 0.5, &mut sys) }, QstabStatus::Ok);
    assert!(!sys.is_null());
    sys
}

#[test]
fn closed_forms_through_handles() {
    let sys = benchmark(0.3);
    let (mut no, mut full) = (0.0, 0.0);
    unsafe {
        assert_eq!(qstab_mu_star_no(sys, &mut no), QstabStatus::Ok);
        assert_eq!(qstab_mu_star_full(sys, &mut full), QstabStatus::Ok);
        qstab_system_free(sys);
    }
    assert!((no - 0.5).abs() < 1e-12);
    assert!((full - 0.65).abs() < 1e-12);
}

#[test]
fn controller_bound_and_simulation() {
    let sys = benchmark(0.6);
    let mut ctrl = ptr::null_mut();
    let (mut bound, mut sim) = (0.0, 0.0);
    unsafe {
        assert_eq!(qstab_controller_myopic(sys, 1, 0.001, &mut ctrl), QstabStatus::Ok);
        assert_eq!(qstab_controller_size(ctrl), 1);
        assert_eq!(qstab_stability_bound(ctrl, sys, &mut bound), QstabStatus::Ok);
        assert_eq!(qstab_simulate_controller(ctrl, sys, 200_000, 3, &mut sim), QstabStatus::Ok);
        qstab_controller_free(ctrl);
        qstab_system_free(sys);
    }
    assert!((bound - 0.5).abs() < 1e-12);
    assert!((sim - 0.5).abs() < 0.01);
}

#[test]
fn solver_and_myopic_simulation() {
    let sys = benchmark(0.4);
    let (mut mu, mut sim) = (0.0, 0.0);
    unsafe {
        assert_eq!(qstab_solve_rvi(sys, QstabScheme::Output as i32, 100, 1e-4, 10_000, &mut mu), QstabStatus::Ok);
        assert_eq!(qstab_simulate_myopic(sys, QstabScheme::Output as i32, 400_000, 1, &mut sim), QstabStatus::Ok);
        assert_eq!(qstab_solve_rvi(sys, QstabScheme::Full as i32, 100, 1e-4, 10, &mut mu), QstabStatus::Incompatible);
        assert_eq!(qstab_solve_rvi(sys, 17, 100, 1e-4, 10, &mut mu), QstabStatus::InvalidArgument);
        assert_eq!(qstab_solve_rvi(sys, QstabScheme::State as i32, 100, 1e-4, 2, &mut mu), QstabStatus::NonConvergence);
        qstab_system_free(sys);
    }
    assert!((mu - 0.5359).abs() < 0.003, "{mu}");
    assert!((sim - 0.5359).abs() < 0.005, "{sim}");
}

#[test]
fn json_round_trip_and_errors() {
    let doc = CString::new(
        r#"{"lambda": 0.4, "server1": {"gamma": 0.5, "rho": 0.2, "mu0": 0.2, "mu1": 0.8},
            "server2": {"p": 0.25, "q": 0.25, "mu0": 0.1, "mu1": 0.9}}"#,
    )
    .unwrap();
    let mut sys = ptr::null_mut();
    unsafe {
        assert_eq!(qstab_system_from_json(doc.as_ptr(), &mut sys), QstabStatus::Ok);
        qstab_system_free(sys);
    }
    let bad = CString::new(r#"{"lambda": 0.4}"#).unwrap();
    let mut untouched = ptr::null_mut();
    unsafe {
        assert_eq!(qstab_system_from_json(bad.as_ptr(), &mut untouched), QstabStatus::Config);
        assert!(untouched.is_null());
        assert_eq!(qstab_system_from_json(ptr::null(), &mut untouched), QstabStatus::NullPointer);
        assert!(last_error().contains("json"));
        assert_eq!(qstab_controller_from_json(bad.as_ptr(), ptr::null_mut()), QstabStatus::Config);
        assert_eq!(qstab_mu_star_no(ptr::null(), ptr::null_mut()), QstabStatus::NullPointer);
        assert_eq!(qstab_system_benchmark(0.5, 0.5, 1.5, &mut untouched), QstabStatus::InvalidArgument);
        assert!(last_error().contains("1.5"), "{}", last_error());
        qstab_system_free(ptr::null_mut());
        qstab_controller_free(ptr::null_mut());
    }
    let v = unsafe { CStr::from_ptr(qstab_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn header_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

fn have_cc() -> bool {
    Command::new("cc").arg("--version").output().is_ok()
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(header_dir().join("qstab.h")).expect("header is generated by the build");
    for name in [
        "qstab_last_error",
        "qstab_version",
        "qstab_system_benchmark",
        "qstab_system_from_json",
        "qstab_system_free",
        "qstab_mu_star_no",
        "qstab_mu_star_full",
        "qstab_controller_myopic",
        "qstab_controller_from_json",
        "qstab_controller_free",
        "qstab_controller_size",
        "qstab_stability_bound",
        "qstab_solve_rvi",
        "qstab_simulate_myopic",
        "qstab_simulate_controller",
        "QSTAB_SCHEME_OUTPUT",
        "QSTAB_STATUS_OK",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    if have_cc() {
        let status = Command::new("cc")
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
            .arg(header_dir().join("qstab.h"))
            .status()
            .unwrap();
        assert!(status.success());
    }
}

#[test]
fn c_program_links_against_static_library() {
    // target/<profile>/deps/<test binary> -> target/<profile>/libqstab_ffi.a
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libqstab_ffi.a");
    if !have_cc() || !lib.exists() {
        eprintln!("skipping: cc or {} not available", lib.display());
        return;
    }
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("qstab_smoke");
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/c/smoke.c");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header_dir())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success(), "compiling the C smoke test failed");
    let run = Command::new(&out).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status);
    let text = String::from_utf8(run.stdout).unwrap();
    let fields: Vec<&str> = text.split_whitespace().collect();
    assert_eq!(fields[0], "0.500000");
    assert_eq!(fields[1], "0.650000");
    let bound: f64 = fields[2].parse().unwrap();
    assert!(bound > 0.5 && bound < 0.65);
    assert_eq!(fields[3], "err");
}

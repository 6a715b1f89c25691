use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use patch_ep::forward::{simulate, DegradationOperator, NoiseModel};
use patch_ep::gmm::save_gmm;
use patch_ep::synth::{synthetic_image, train_synthetic_gmm};
use patch_ep_ffi::*;

fn gmm_file(dir: &Path) -> CString {
    let path = dir.join("g.bin");
    save_gmm(&path, &train_synthetic_gmm(3, 4, 3, 24, 5).unwrap()).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = pep_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn restore_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = gmm_file(dir.path());
    let x = synthetic_image(16, 16, 2).unwrap();
    let y = simulate(&DegradationOperator::identity(16, 16), x.data(), NoiseModel::Gaussian { variance: 0.01 }, 3).unwrap();
    unsafe {
        let mut gmm = ptr::null_mut();
        assert_eq!(pep_gmm_load(path.as_ptr(), &mut gmm), PepStatus::Ok);
        assert_eq!((pep_gmm_components(gmm), pep_gmm_dim(gmm)), (3, 16));
        let mut cfg = ptr::null_mut();
        assert_eq!(pep_config_new(&mut cfg), PepStatus::Ok);
        let set = CString::new("experts=[0,5]").unwrap();
        assert_eq!(pep_config_set(cfg, set.as_ptr()), PepStatus::Ok);
        let mut op = ptr::null_mut();
        assert_eq!(pep_operator_identity(16, 16, &mut op), PepStatus::Ok);
        let mut res = ptr::null_mut();
        let status = pep_restore(gmm, cfg, op, PepNoise::Gaussian, 0.01, y.as_ptr(), y.len(), &mut res);
        assert_eq!(status, PepStatus::Ok);
        assert!(pep_last_error().is_null());
        assert_eq!(pep_result_len(res), 256);
        assert_eq!(pep_result_experts(res), 2);
        let mut mean = vec![0.0; 256];
        let mut var = vec![0.0; 256];
        assert_eq!(pep_result_mean(res, mean.as_mut_ptr(), 256), PepStatus::Ok);
        assert_eq!(pep_result_variance(res, var.as_mut_ptr(), 256), PepStatus::Ok);
        assert!(var.iter().all(|v| *v > 0.0));
        let (mut restored, mut observed) = (0.0, 0.0);
        assert_eq!(pep_psnr(x.data().as_ptr(), mean.as_ptr(), 256, &mut restored), PepStatus::Ok);
        assert_eq!(pep_psnr(x.data().as_ptr(), y.as_ptr(), 256, &mut observed), PepStatus::Ok);
        assert!(restored > observed);
        let mut frac = 0.0;
        assert_eq!(pep_coverage(x.data().as_ptr(), mean.as_ptr(), var.as_ptr(), 256, 0.95, &mut frac), PepStatus::Ok);
        assert!(frac > 0.5 && frac <= 1.0);
        let report: serde_json::Value = serde_json::from_str(CStr::from_ptr(pep_result_report(res)).to_str().unwrap()).unwrap();
        assert_eq!(report["experts"].as_array().unwrap().len(), 2);
        pep_result_free(res);
        pep_operator_free(op);
        pep_config_free(cfg);
        pep_gmm_free(gmm);
    }
}

#[test]
fn failures_map_to_status_codes() {
    unsafe {
        let mut gmm = ptr::null_mut();
        assert_eq!(pep_gmm_load(ptr::null(), &mut gmm), PepStatus::NullPointer);
        assert!(last_error().contains("path"));
        let missing = CString::new("/nonexistent/g.bin").unwrap();
        assert_eq!(pep_gmm_load(missing.as_ptr(), &mut gmm), PepStatus::Io);
        assert!(gmm.is_null());

        let mut cfg = ptr::null_mut();
        assert_eq!(pep_config_new(&mut cfg), PepStatus::Ok);
        let before = CStr::from_ptr(pep_config_to_json(cfg)).to_owned();
        for bad in ["ep.damping=2", "no_such_key=1", "novalue"] {
            let s = CString::new(bad).unwrap();
            assert_eq!(pep_config_set(cfg, s.as_ptr()), PepStatus::InvalidArgument, "{bad}");
        }
        let json = pep_config_to_json(cfg);
        assert_eq!(CStr::from_ptr(json), before.as_c_str());
        pep_string_free(json);
        let text = CString::new(r#"{"ep": {"damping": 0.5}}"#).unwrap();
        let mut parsed = ptr::null_mut();
        assert_eq!(pep_config_from_json(text.as_ptr(), &mut parsed), PepStatus::Ok);
        pep_config_free(parsed);

        let mut op = ptr::null_mut();
        assert_eq!(pep_operator_identity(0, 4, &mut op), PepStatus::InvalidArgument);
        let kernel = [1.0 / 9.0; 9];
        assert_eq!(pep_operator_convolution(4, 4, kernel.as_ptr(), 3, &mut op), PepStatus::Ok);
        let x = [1.0; 16];
        let mut hx = [0.0; 16];
        assert_eq!(pep_operator_apply(op, x.as_ptr(), hx.as_mut_ptr(), 16), PepStatus::Ok);
        assert!(hx.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert_eq!(pep_operator_apply(op, x.as_ptr(), hx.as_mut_ptr(), 15), PepStatus::InvalidArgument);
        let y = [1.0; 16];
        let mut res = ptr::null_mut();
        let status = pep_restore(ptr::null(), cfg, op, PepNoise::Poisson, 0.0, y.as_ptr(), 16, &mut res);
        assert_eq!(status, PepStatus::NullPointer);
        assert!(res.is_null());
        pep_operator_free(op);
        pep_config_free(cfg);

        pep_gmm_free(ptr::null_mut());
        pep_result_free(ptr::null_mut());
        assert_eq!(pep_result_len(ptr::null()), 0);
        assert!(pep_result_report(ptr::null()).is_null());
        assert!(pep_config_to_json(ptr::null()).is_null());
    }
    assert_eq!(unsafe { CStr::from_ptr(pep_version()) }.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "patch_ep.h"

int main(int argc, char **argv) {
    if (argc != 2) return 10;
    PepGmm *gmm = NULL;
    if (pep_gmm_load(argv[1], &gmm) != PEP_STATUS_OK) return 11;
    PepConfig *cfg = NULL;
    if (pep_config_new(&cfg) != PEP_STATUS_OK) return 12;
    if (pep_config_set(cfg, "experts=[0]") != PEP_STATUS_OK) return 13;
    if (pep_config_set(cfg, "ep.damping=7") != PEP_STATUS_INVALID_ARGUMENT) return 14;
    if (pep_last_error() == NULL) return 15;
    PepOperator *op = NULL;
    if (pep_operator_identity(8, 8, &op) != PEP_STATUS_OK) return 16;
    double y[64];
    for (int i = 0; i < 64; i++) y[i] = 0.3 + 0.01 * (i % 8);
    PepResult *res = NULL;
    if (pep_restore(gmm, cfg, op, PEP_NOISE_GAUSSIAN, 0.01, y, 64, &res) != PEP_STATUS_OK) {
        fprintf(stderr, "%s\n", pep_last_error());
        return 17;
    }
    double mean[64], var[64];
    if (pep_result_len(res) != 64) return 18;
    if (pep_result_mean(res, mean, 64) != PEP_STATUS_OK) return 19;
    if (pep_result_variance(res, var, 64) != PEP_STATUS_OK) return 20;
    for (int i = 0; i < 64; i++) if (!(var[i] > 0.0)) return 21;
    if (strstr(pep_result_report(res), "experts") == NULL) return 22;
    printf("%s %.6f\n", pep_version(), mean[0]);
    pep_result_free(res);
    pep_operator_free(op);
    pep_config_free(cfg);
    pep_gmm_free(gmm);
    return 0;
}
"#;

/// Directory holding the library artifacts for the profile this test was built with.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_compiles_against_the_header_and_runs() {
    let header_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(header_dir.join("patch_ep.h").is_file());
    let lib = artifact_dir().join("libpatch_ep_ffi.a");
    assert!(lib.is_file(), "static library missing at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let exe = dir.path().join("main");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let out = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .expect("C compiler runs");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let gmm = gmm_file(dir.path());
    let run = Command::new(&exe).arg(gmm.to_str().unwrap()).output().unwrap();
    assert!(run.status.success(), "exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.starts_with(env!("CARGO_PKG_VERSION")));
}

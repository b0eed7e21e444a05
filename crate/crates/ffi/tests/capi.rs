use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use divseg_ffi::*;

fn last_error() -> String {
    let p = dseg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_arch(channels: &[usize]) -> DsegArch {
    DsegArch {
        channels: channels.as_ptr(),
        levels: channels.len(),
        classes: 4,
        groups: 2,
    }
}

#[test]
fn divergences_match_closed_forms() {
    let p = [0.5, 0.5];
    let q = [0.25, 0.75];
    let mut out = f64::NAN;
    let s = unsafe {
        dseg_divergence(
            DsegDivergence::KullbackLeibler,
            p.as_ptr(),
            q.as_ptr(),
            2,
            2.0,
            &mut out,
        )
    };
    assert_eq!(s, DsegStatus::Ok);
    assert!((out - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-12);

    let w = [0.8, 0.2];
    assert_eq!(
        unsafe { dseg_hpd(w.as_ptr(), w.as_ptr(), 2, 1.1, &mut out) },
        DsegStatus::Ok
    );
    assert!((out - 0.1184).abs() < 1e-4);
    assert!(dseg_last_error().is_null());
}

#[test]
fn invalid_inputs_report_status_and_message() {
    let p = [0.5, 0.5];
    let mut out = 0.0;
    let s = unsafe { dseg_hpd(p.as_ptr(), p.as_ptr(), 2, 1.0, &mut out) };
    assert_eq!(s, DsegStatus::Config);
    assert!(last_error().contains("alpha"), "{}", last_error());

    let s = unsafe { dseg_hpd(ptr::null(), p.as_ptr(), 2, 2.0, &mut out) };
    assert_eq!(s, DsegStatus::NullPointer);
    assert!(last_error().contains('p'));

    let bad = [0.7, 0.7];
    let s = unsafe { dseg_hpd(bad.as_ptr(), p.as_ptr(), 2, 2.0, &mut out) };
    assert_ne!(s, DsegStatus::Ok);

    let s = unsafe { dseg_model_new(ptr::null(), 0, ptr::null_mut()) };
    assert_eq!(s, DsegStatus::NullPointer);
    let zero = [4usize, 0];
    let mut m = ptr::null_mut();
    let s = unsafe { dseg_model_new(&tiny_arch(&zero), 0, &mut m) };
    assert_eq!(s, DsegStatus::Config);
    assert!(m.is_null());
}

#[test]
fn dsc_regions_and_empty_flag() {
    let pred = [0u8, 1, 2, 3, 3, 0];
    let gt = [0u8, 1, 2, 2, 3, 3];
    let mut v = 0.0;
    let mut empty = 9u8;
    let s = unsafe {
        dseg_dsc(
            pred.as_ptr(),
            gt.as_ptr(),
            6,
            DsegRegion::EnhancingTumor,
            &mut v,
            &mut empty,
        )
    };
    assert_eq!(s, DsegStatus::Ok);
    assert!((v - 0.5).abs() < 1e-12);
    assert_eq!(empty, 0);
    let z = [0u8; 4];
    let s = unsafe { dseg_dsc(z.as_ptr(), z.as_ptr(), 4, DsegRegion::WholeTumor, &mut v, &mut empty) };
    assert_eq!(s, DsegStatus::Ok);
    assert_eq!((v, empty), (1.0, 1));
}

#[test]
fn model_round_trip_and_mask_exclusion() {
    let dir = tempfile::tempdir().unwrap();
    let channels = [4usize, 4, 8];
    let arch = tiny_arch(&channels);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dseg_model_new(&arch, 7, &mut model) }, DsegStatus::Ok);
    assert_eq!(unsafe { dseg_model_param_count(model) }, 9328);
    assert_eq!(unsafe { dseg_model_classes(model) }, 4);

    let path = CString::new(dir.path().join("m.dsegprm").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dseg_model_save(model, path.as_ptr()) }, DsegStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { dseg_model_load(path.as_ptr(), &arch, &mut loaded) },
        DsegStatus::Ok
    );

    let (d, h, w) = (8usize, 8, 8);
    let n = d * h * w;
    let mut vols = vec![0.0; 4 * n];
    let mut labels = vec![0u8; n];
    assert_eq!(
        unsafe { dseg_phantom(3, d, h, w, vols.as_mut_ptr(), labels.as_mut_ptr()) },
        DsegStatus::Ok
    );
    assert!(labels.contains(&3));

    let mut a = vec![0.0; 4 * n];
    let mut b = vec![0.0; 4 * n];
    let mut seg = vec![9u8; n];
    let mask = 0b0101;
    let s = unsafe {
        dseg_model_predict(
            model,
            vols.as_ptr(),
            d,
            h,
            w,
            mask,
            a.as_mut_ptr(),
            a.len(),
            seg.as_mut_ptr(),
        )
    };
    assert_eq!(s, DsegStatus::Ok);
    assert!(seg.iter().all(|&c| c < 4));
    let mut garbage = vols.clone();
    garbage[n..2 * n].fill(1e6);
    garbage[3 * n..].fill(-3.0);
    let s = unsafe {
        dseg_model_predict(
            loaded,
            garbage.as_ptr(),
            d,
            h,
            w,
            mask,
            b.as_mut_ptr(),
            b.len(),
            ptr::null_mut(),
        )
    };
    assert_eq!(s, DsegStatus::Ok);
    assert_eq!(a, b);

    let s = unsafe {
        dseg_model_predict(
            model,
            vols.as_ptr(),
            d,
            h,
            w,
            0,
            a.as_mut_ptr(),
            a.len(),
            ptr::null_mut(),
        )
    };
    assert_eq!(s, DsegStatus::Contract);
    let s = unsafe { dseg_model_predict(model, vols.as_ptr(), d, h, w, mask, a.as_mut_ptr(), 10, ptr::null_mut()) };
    assert_eq!(s, DsegStatus::BufferTooSmall);
    assert!(last_error().contains(&(4 * n).to_string()));

    unsafe {
        dseg_model_free(model);
        dseg_model_free(loaded);
        dseg_model_free(ptr::null_mut());
    }
}

#[test]
fn load_rejects_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.dsegprm");
    std::fs::write(&p, b"not a checkpoint").unwrap();
    let path = CString::new(p.to_str().unwrap()).unwrap();
    let channels = [4usize, 4, 8];
    let mut m = ptr::null_mut();
    let s = unsafe { dseg_model_load(path.as_ptr(), &tiny_arch(&channels), &mut m) };
    assert_eq!(s, DsegStatus::Parse);
    assert!(m.is_null());
    let missing = CString::new(dir.path().join("none").to_str().unwrap()).unwrap();
    let s = unsafe { dseg_model_load(missing.as_ptr(), &tiny_arch(&channels), &mut m) };
    assert_eq!(s, DsegStatus::Io);
}

#[test]
fn volume_write_then_read() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("v.vol").to_str().unwrap()).unwrap();
    let dims = [2usize, 2, 3, 4];
    let data: Vec<f64> = (0..48).map(|i| i as f64 * 0.25 - 3.0).collect();
    assert_eq!(
        unsafe { dseg_volume_write(path.as_ptr(), data.as_ptr(), dims.as_ptr()) },
        DsegStatus::Ok
    );

    let mut got_dims = [0usize; 4];
    let s = unsafe { dseg_volume_read(path.as_ptr(), ptr::null_mut(), 0, got_dims.as_mut_ptr()) };
    assert_eq!(s, DsegStatus::Ok);
    assert_eq!(got_dims, dims);
    let mut small = [0.0; 10];
    let s = unsafe { dseg_volume_read(path.as_ptr(), small.as_mut_ptr(), 10, got_dims.as_mut_ptr()) };
    assert_eq!(s, DsegStatus::BufferTooSmall);
    let mut out = vec![0.0; 48];
    let s = unsafe { dseg_volume_read(path.as_ptr(), out.as_mut_ptr(), 48, got_dims.as_mut_ptr()) };
    assert_eq!(s, DsegStatus::Ok);
    assert_eq!(out, data);
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(dseg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn header_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

fn cdylib() -> Option<PathBuf> {
    let deps = std::env::current_exe().ok()?.parent()?.to_path_buf();
    let lib = deps.parent()?.join("libdivseg_ffi.so");
    lib.exists().then_some(lib)
}

#[test]
fn c_program_links_against_header() {
    let Some(lib) = cdylib() else {
        eprintln!("skipping: libdivseg_ffi.so not built for this target");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/smoke.c"))
        .arg("-I")
        .arg(header_dir())
        .arg(&lib)
        .arg(format!("-Wl,-rpath,{}", lib.parent().unwrap().display()))
        .arg("-lm")
        .status();
    let Ok(status) = status else {
        eprintln!("skipping: no C compiler");
        return;
    };
    assert!(status.success(), "C smoke program failed to compile");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}

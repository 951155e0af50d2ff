use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use crrn::gin::GinConfig;
use crrn::iin::IinConfig;
use crrn::image_model::Resolution;
use crrn::training::{Checkpoint, TrainConfig};
use crrn_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { crrn_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn stub_checkpoint(dir: &Path) -> std::path::PathBuf {
    let cfg = TrainConfig {
        gin: GinConfig { base_channels: 4, ..GinConfig::default() },
        iin: IinConfig { base_channels: 4, ..IinConfig::default() },
        sizes: vec![Resolution { height: 32, width: 32 }],
        ..TrainConfig::default()
    };
    let path = dir.join("stub.safetensors");
    Checkpoint::untrained(cfg).unwrap().save(&path).unwrap();
    path
}

fn new_image(h: usize, w: usize, c: usize, f: impl Fn(usize) -> f32) -> *mut CrrnImage {
    let data: Vec<f32> = (0..h * w * c).map(f).collect();
    let mut img = ptr::null_mut();
    assert_eq!(unsafe { crrn_image_new(h, w, c, data.as_ptr(), &mut img) }, CrrnStatus::Ok);
    img
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(crrn_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn predict_with_zero_residual_stub_returns_input() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = stub_checkpoint(dir.path());
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { crrn_model_load(cstr(&ckpt).as_ptr(), &mut model) }, CrrnStatus::Ok);

    let img = new_image(32, 64, 3, |i| ((i * 13) % 97) as f32 / 96.0);
    let (mut b, mut r, mut g) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
    let status = unsafe { crrn_model_predict(model, img, false, &mut b, &mut r, &mut g) };
    assert_eq!(status, CrrnStatus::Ok);

    let (mut h, mut w, mut c) = (0, 0, 0);
    unsafe { crrn_image_dims(g, &mut h, &mut w, &mut c) };
    assert_eq!((h, w, c), (32, 64, 1));
    unsafe { crrn_image_dims(b, &mut h, &mut w, &mut c) };
    assert_eq!((h, w, c), (32, 64, 3));
    let n = h * w * c;
    let (bd, id) = unsafe {
        (
            std::slice::from_raw_parts(crrn_image_data(b), n),
            std::slice::from_raw_parts(crrn_image_data(img), n),
        )
    };
    assert_eq!(bd, id);

    let mut s = 0.0;
    assert_eq!(unsafe { crrn_ssim(b, img, &mut s) }, CrrnStatus::Ok);
    assert!((s - 1.0).abs() < 1e-9);
    assert_eq!(unsafe { crrn_si(b, img, &mut s) }, CrrnStatus::Ok);
    assert!((s - 1.0).abs() < 1e-9);

    let png = dir.path().join("b.png");
    assert_eq!(unsafe { crrn_image_save(b, cstr(&png).as_ptr()) }, CrrnStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { crrn_image_load(cstr(&png).as_ptr(), &mut back) }, CrrnStatus::Ok);

    unsafe {
        for p in [img, b, r, g, back] {
            crrn_image_free(p);
        }
        crrn_model_free(model);
    }
}

#[test]
fn indivisible_input_reports_dimension_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = stub_checkpoint(dir.path());
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { crrn_model_load(cstr(&ckpt).as_ptr(), &mut model) }, CrrnStatus::Ok);
    let img = new_image(40, 40, 3, |_| 0.5);
    let (mut b, mut r, mut g) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
    let status = unsafe { crrn_model_predict(model, img, false, &mut b, &mut r, &mut g) };
    assert_eq!(status, CrrnStatus::Dimension);
    assert!(last_error().contains("auto-resize"));
    assert!(b.is_null());

    let status = unsafe { crrn_model_predict(model, img, true, &mut b, &mut r, &mut g) };
    assert_eq!(status, CrrnStatus::Ok);
    let (mut h, mut w) = (0, 0);
    unsafe { crrn_image_dims(r, &mut h, &mut w, ptr::null_mut()) };
    assert_eq!((h, w), (40, 40));
    unsafe {
        for p in [img, b, r, g] {
            crrn_image_free(p);
        }
        crrn_model_free(model);
    }
}

#[test]
fn error_codes() {
    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/ckpt.safetensors").unwrap();
    assert_eq!(unsafe { crrn_model_load(missing.as_ptr(), &mut model) }, CrrnStatus::NotFound);
    assert!(last_error().contains("/nonexistent"));
    assert_eq!(unsafe { crrn_model_load(ptr::null(), &mut model) }, CrrnStatus::NullPointer);
    assert!(model.is_null());

    let data = [0.0f32; 12];
    let mut img = ptr::null_mut();
    assert_eq!(unsafe { crrn_image_new(2, 2, 2, data.as_ptr(), &mut img) }, CrrnStatus::Argument);

    let a = new_image(16, 16, 3, |_| 0.5);
    let b = new_image(16, 8, 3, |_| 0.5);
    let mut s = 0.0;
    assert_eq!(unsafe { crrn_ssim(a, b, &mut s) }, CrrnStatus::Dimension);
    unsafe {
        crrn_image_free(a);
        crrn_image_free(b);
        crrn_image_free(ptr::null_mut());
        crrn_model_free(ptr::null_mut());
    }
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/crrn.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["crrn_model_load", "crrn_model_predict", "crrn_image_new", "CRRN_STATUS_DIMENSION"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(&src, "#include \"crrn.h\"\nint main(void) { return (int)CRRN_STATUS_OK; }\n").unwrap();
    let Ok(out) = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler; header syntax not checked");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

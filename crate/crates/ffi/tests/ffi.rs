use std::ffi::{CStr, CString};
use std::ptr;

use vov3d_ffi::*;

fn last_error() -> String {
    let p = vov3d_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny(seed: u64) -> *mut Vov3dModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { vov3d_model_new_tiny(Vov3dVariant::D21d, 8, seed, &mut m) }, Vov3dStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn infer_through_handle() {
    let m = tiny(3);
    let (n, t, s) = (2, 4, 80);
    let input: Vec<f64> = (0..n * 3 * t * s * s).map(|i| ((i % 97) as f64) / 97.0).collect();
    let mut logits = vec![0.0; n * 8];
    let st = unsafe { vov3d_model_infer(m, input.as_ptr(), n, 3, t, s, s, logits.as_mut_ptr(), logits.len()) };
    assert_eq!(st, Vov3dStatus::Ok);
    assert!(logits.iter().all(|v| v.is_finite()));
    assert!(logits.iter().any(|&v| v != 0.0));

    let mut classes = 0;
    assert_eq!(unsafe { vov3d_model_num_classes(m, &mut classes) }, Vov3dStatus::Ok);
    assert_eq!(classes, 8);
    unsafe { vov3d_model_free(m) };
}

#[test]
fn error_codes_and_messages() {
    let m = tiny(0);
    let input = vec![0.0; 3 * 4 * 80 * 80];
    let mut small = vec![0.0; 4];
    let st = unsafe { vov3d_model_infer(m, input.as_ptr(), 1, 3, 4, 80, 80, small.as_mut_ptr(), small.len()) };
    assert_eq!(st, Vov3dStatus::BufferTooSmall);
    assert!(last_error().contains("need 8"));

    let mut logits = vec![0.0; 8];
    let st = unsafe { vov3d_model_infer(m, input.as_ptr(), 1, 4, 3, 80, 80, logits.as_mut_ptr(), logits.len()) };
    assert_eq!(st, Vov3dStatus::ShapeMismatch);

    let st = unsafe { vov3d_model_infer(ptr::null(), input.as_ptr(), 1, 3, 4, 80, 80, logits.as_mut_ptr(), 8) };
    assert_eq!(st, Vov3dStatus::NullPointer);

    let bad = CString::new("not = [valid").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { vov3d_model_from_config(bad.as_ptr(), 0, &mut out) }, Vov3dStatus::Format);
    assert!(out.is_null());

    let mut p = 0u64;
    assert_eq!(unsafe { vov3d_model_num_params(m, &mut p) }, Vov3dStatus::Ok);
    assert!(vov3d_last_error().is_null());
    unsafe { vov3d_model_free(m) };
}

#[test]
fn weights_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("w.bin").to_str().unwrap()).unwrap();
    let (a, b) = (tiny(1), tiny(2));
    assert_eq!(unsafe { vov3d_model_save_weights(a, path.as_ptr()) }, Vov3dStatus::Ok);
    assert_eq!(unsafe { vov3d_model_load_weights(b, path.as_ptr()) }, Vov3dStatus::Ok);
    let input: Vec<f64> = (0..3 * 4 * 80 * 80).map(|i| (i % 13) as f64 / 13.0).collect();
    let (mut la, mut lb) = (vec![0.0; 8], vec![0.0; 8]);
    unsafe {
        vov3d_model_infer(a, input.as_ptr(), 1, 3, 4, 80, 80, la.as_mut_ptr(), 8);
        vov3d_model_infer(b, input.as_ptr(), 1, 3, 4, 80, 80, lb.as_mut_ptr(), 8);
    }
    assert_eq!(la, lb);

    let missing = CString::new(dir.path().join("none.bin").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { vov3d_model_load_weights(b, missing.as_ptr()) }, Vov3dStatus::Io);
    unsafe {
        vov3d_model_free(a);
        vov3d_model_free(b);
    }
}

#[test]
fn config_and_cost_entry_points() {
    let toml = vov3d::net::ArchGraph::tiny(vov3d::blocks::Variant::D12d, 5).to_toml().unwrap();
    let text = CString::new(toml).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { vov3d_model_from_config(text.as_ptr(), 0, &mut m) }, Vov3dStatus::Ok);
    let mut trf = 0;
    assert_eq!(unsafe { vov3d_model_max_trf(m, &mut trf) }, Vov3dStatus::Ok);
    assert!(trf > 1 && trf % 2 == 1);
    unsafe { vov3d_model_free(m) };

    let (mut params, mut flops) = (0u64, 0u64);
    let st = unsafe { vov3d_model_cost(Vov3dSize::M, Vov3dVariant::D21d, 16, 224, &mut params, &mut flops) };
    assert_eq!(st, Vov3dStatus::Ok);
    assert!(params > 3_000_000 && params < 3_300_000);
    assert!(flops > 0);
}

#[test]
fn generated_header_declares_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/vov3d.h")).unwrap();
    for name in ["vov3d_model_new", "vov3d_model_infer", "vov3d_model_free", "vov3d_last_error", "VOV3D_STATUS_OK", "typedef struct Vov3dModel"] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

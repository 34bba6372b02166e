use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use facevox::checkpoint::Checkpoint;
use facevox::config::RunConfig;
use facevox::imaging::ImageTensor;
use facevox::inference::Predictor;
use facevox::network::Network;
use facevox::volumetric::{encode_points, EncodeOptions};
use facevox_ffi::*;

fn last_error() -> String {
    let p = fvx_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn encode(points: &[f64], dims: [usize; 3]) -> *mut FvxGrid {
    let mut g = ptr::null_mut();
    let st = unsafe { fvx_grid_encode(points.as_ptr(), points.len() / 3, dims.as_ptr(), 1.0, true, &mut g) };
    assert_eq!(st, FvxStatus::Ok);
    g
}

#[test]
fn grid_matches_core_and_round_trips_through_disk() {
    let pts = [2.0, 3.5, 4.0, 9.0, 8.0, 7.25];
    let g = encode(&pts, [12, 10, 8]);
    let mut dims = [0usize; 3];
    assert_eq!(unsafe { fvx_grid_dims(g, dims.as_mut_ptr()) }, FvxStatus::Ok);
    assert_eq!(dims, [12, 10, 8]);
    let mut vals = vec![0.0; 12 * 10 * 8];
    assert_eq!(unsafe { fvx_grid_values(g, vals.as_mut_ptr(), vals.len()) }, FvxStatus::Ok);
    let core = encode_points(&[[2.0, 3.5, 4.0], [9.0, 8.0, 7.25]], [12, 10, 8], 1.0, EncodeOptions::default()).unwrap();
    assert_eq!(vals, core.values());
    assert_eq!(unsafe { fvx_grid_values(g, vals.as_mut_ptr(), 3) }, FvxStatus::BufferTooSmall);

    let dir = tempfile::tempdir().unwrap();
    let path = cstr(&dir.path().join("g.cvr"));
    assert_eq!(unsafe { fvx_grid_save(g, path.as_ptr()) }, FvxStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { fvx_grid_load(path.as_ptr(), &mut back) }, FvxStatus::Ok);
    let mut vals2 = vec![0.0; vals.len()];
    assert_eq!(unsafe { fvx_grid_values(back, vals2.as_mut_ptr(), vals2.len()) }, FvxStatus::Ok);
    for (a, b) in vals.iter().zip(&vals2) {
        // stored as f32 on disk
        assert!((a - b).abs() <= 1e-7 * a.abs().max(1e-30));
    }
    unsafe {
        fvx_grid_free(g);
        fvx_grid_free(back);
        fvx_grid_free(ptr::null_mut());
    }
}

#[test]
fn decode_reports_count_and_respects_capacity() {
    let g = encode(&[3.0, 3.0, 3.0, 11.0, 11.0, 11.0], [16, 16, 16]);
    let mut count = 0usize;
    let st = unsafe { fvx_decode_peaks(g, 0.01, 2.0, ptr::null_mut(), 0, &mut count) };
    assert_eq!((st, count), (FvxStatus::BufferTooSmall, 2));
    let mut out = [0.0; 6];
    let st = unsafe { fvx_decode_peaks(g, 0.01, 2.0, out.as_mut_ptr(), 2, &mut count) };
    assert_eq!(st, FvxStatus::Ok);
    let mut got: Vec<[f64; 3]> = out.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    got.sort_by(|a, b| a[0].total_cmp(&b[0]));
    for (p, want) in got.iter().zip([3.0, 11.0]) {
        assert!(p.iter().all(|v| (v - want).abs() < 1e-6), "{p:?}");
    }
    unsafe { fvx_grid_free(g) };
}

#[test]
fn errors_set_status_and_message() {
    let mut g = ptr::null_mut();
    let dims = [4usize, 4, 4];
    let st = unsafe { fvx_grid_encode(ptr::null(), 1, dims.as_ptr(), 1.0, true, &mut g) };
    assert_eq!(st, FvxStatus::NullPointer);
    assert!(last_error().contains("null"));
    let p = [1.0, 1.0, 1.0];
    let st = unsafe { fvx_grid_encode(p.as_ptr(), 1, dims.as_ptr(), -1.0, true, &mut g) };
    assert_eq!(st, FvxStatus::InvalidArgument);
    let missing = CString::new("/definitely/not/here.cvr").unwrap();
    assert_eq!(unsafe { fvx_grid_load(missing.as_ptr(), &mut g) }, FvxStatus::NotFound);
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { fvx_model_load(missing.as_ptr(), &mut m) }, FvxStatus::NotFound);
    assert!(g.is_null() && m.is_null());
}

#[test]
fn metrics_constructed_cases() {
    let gt = [0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 4.0, 7.0, 1.0];
    let pred: Vec<f64> = gt.chunks(3).flat_map(|c| [c[0] + 1.0, c[1], c[2]]).collect();
    let mut v = 0.0;
    assert_eq!(unsafe { fvx_gte(pred.as_ptr(), gt.as_ptr(), 3, 0, 1, false, &mut v) }, FvxStatus::Ok);
    assert!((v - 10.0).abs() < 1e-9);
    let same = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    assert_eq!(unsafe { fvx_gte(same.as_ptr(), same.as_ptr(), 2, 0, 1, false, &mut v) }, FvxStatus::InvalidArgument);

    let gt = [0.0, 0.0, 0.0, 100.0, 100.0, 0.0];
    let pred = [2.0, 0.0, 5.0, 102.0, 100.0, -5.0];
    let bbox = [0.0, 0.0, 100.0, 100.0];
    assert_eq!(unsafe { fvx_nme(pred.as_ptr(), gt.as_ptr(), 2, bbox.as_ptr(), &mut v) }, FvxStatus::Ok);
    assert!((v - 2.0).abs() < 1e-9);
}

#[test]
fn model_prediction_matches_core() {
    let config = RunConfig::toy();
    let net = Network::new(config.model.clone()).unwrap();
    let ck = Checkpoint {
        config,
        state: net.init_state(5),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();

    let mut m = ptr::null_mut();
    assert_eq!(unsafe { fvx_model_load(cstr(&path).as_ptr(), &mut m) }, FvxStatus::Ok);
    let mut n = 0usize;
    assert_eq!(unsafe { fvx_model_n_landmarks(m, &mut n) }, FvxStatus::Ok);
    assert_eq!(n, 12);

    let (w, h) = (80usize, 72usize);
    let rgb: Vec<f64> = (0..3 * w * h).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
    let bbox = [6.0, 4.0, 64.0, 64.0];
    let mut out = vec![0.0; 3 * n];
    let st = unsafe { fvx_model_predict(m, rgb.as_ptr(), w, h, bbox.as_ptr(), out.as_mut_ptr(), n) };
    assert_eq!(st, FvxStatus::Ok);
    let st = unsafe { fvx_model_predict(m, rgb.as_ptr(), w, h, bbox.as_ptr(), out.as_mut_ptr(), n - 1) };
    assert_eq!(st, FvxStatus::BufferTooSmall);

    let image = ImageTensor::from_planar(w, h, rgb).unwrap();
    let bb = facevox::geometry::BBox::new(6.0, 4.0, 64.0, 64.0).unwrap();
    let want = Predictor::new(Checkpoint::load(&path).unwrap()).unwrap().predict(&image, Some(bb)).unwrap();
    assert_eq!(out, want.landmarks.to_flat());
    unsafe { fvx_model_free(m) };
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/facevox.h")
}

#[test]
fn header_declares_every_export() {
    let text = std::fs::read_to_string(header()).unwrap();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 14);
    for name in exports {
        assert!(text.contains(&format!("{name}(")), "header lacks {name}");
    }
    assert!(text.contains("typedef struct FvxGrid FvxGrid;"));
    assert!(text.contains("FVX_STATUS_OK = 0"));
}

/// Compiles and runs a C program against the header and static library
/// when a C compiler and the archive are available.
#[test]
fn c_program_links_and_runs() {
    let target = Path::new(env!("CARGO_TARGET_TMPDIR")).parent().unwrap().to_path_buf();
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    let lib = target.join(profile).join("libfacevox_ffi.a");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if !lib.exists() || Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or {} missing", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/c/smoke.c");
    let status = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}

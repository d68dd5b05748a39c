use std::ffi::{CStr, CString};
use std::ptr;

use mlde::dataset::DiagnosisClass;
use mlde::training::{init_model, save_checkpoint, TrainConfig, TrainedModel};
use mlde_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe {
        mlde_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn write_model(dir: &std::path::Path) -> (CString, TrainedModel) {
    let config = TrainConfig {
        seed: 3,
        ..TrainConfig::default()
    };
    let model = TrainedModel {
        target: DiagnosisClass::Bcc,
        model: init_model(&config).unwrap(),
        config,
        history: Vec::new(),
        degenerate: false,
    };
    let path = dir.join("BCC.mlde");
    save_checkpoint(&model, &path).unwrap();
    (CString::new(path.to_str().unwrap()).unwrap(), model)
}

#[test]
fn load_query_predict_free() {
    let dir = tempfile::tempdir().unwrap();
    let (path, reference) = write_model(dir.path());
    let mut handle = ptr::null_mut();
    unsafe {
        assert_eq!(mlde_model_load(path.as_ptr(), &mut handle), MldeStatus::Ok);
        assert!(!handle.is_null());

        let mut class = 99;
        assert_eq!(mlde_model_target(handle, &mut class), MldeStatus::Ok);
        assert_eq!(class, 2);

        let mut w = [0.0; 4];
        assert_eq!(mlde_model_fusion_weights(handle, w.as_mut_ptr()), MldeStatus::Ok);
        assert_eq!(w, [0.25; 4]);

        let (h, wd) = (40usize, 48usize);
        let pixels: Vec<u8> = (0..h * wd * 3).map(|i| (i * 37 % 251) as u8).collect();
        let mut fused = -1.0;
        let mut branches = [0.0; 4];
        let status = mlde_model_predict_rgb8(handle, pixels.as_ptr(), h, wd, &mut fused, branches.as_mut_ptr());
        assert_eq!(status, MldeStatus::Ok, "{}", last_error());
        let image =
            mlde::imaging::ImageTensor::new(h, wd, pixels.iter().map(|&b| f32::from(b) / 255.0).collect()).unwrap();
        let expected = reference.predict_image(&image).unwrap();
        assert_eq!(fused, expected.fused);
        assert_eq!(branches, expected.branches.p);

        let mut only = -1.0;
        let status = mlde_model_predict_rgb8(handle, pixels.as_ptr(), h, wd, &mut only, ptr::null_mut());
        assert_eq!(status, MldeStatus::Ok);
        assert_eq!(only, fused);

        mlde_model_free(handle);
        mlde_model_free(ptr::null_mut());
    }
}

#[test]
fn load_errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = write_model(dir.path());
    let mut handle = ptr::null_mut();
    unsafe {
        assert_eq!(mlde_model_load(ptr::null(), &mut handle), MldeStatus::NullPointer);
        assert_eq!(mlde_model_load(path.as_ptr(), ptr::null_mut()), MldeStatus::NullPointer);

        let missing = CString::new(dir.path().join("nope.mlde").to_str().unwrap()).unwrap();
        assert_eq!(mlde_model_load(missing.as_ptr(), &mut handle), MldeStatus::Io);
        assert!(handle.is_null());
        assert!(!last_error().is_empty());

        let p = std::path::PathBuf::from(path.to_str().unwrap());
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        std::fs::write(&p, &bytes).unwrap();
        assert_eq!(mlde_model_load(path.as_ptr(), &mut handle), MldeStatus::Checksum);
        assert!(handle.is_null());
    }
}

#[test]
fn predict_rejects_empty_image() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = write_model(dir.path());
    let mut handle = ptr::null_mut();
    unsafe {
        assert_eq!(mlde_model_load(path.as_ptr(), &mut handle), MldeStatus::Ok);
        let px = [0u8; 3];
        let mut fused = 0.0;
        let status = mlde_model_predict_rgb8(handle, px.as_ptr(), 0, 1, &mut fused, ptr::null_mut());
        assert_eq!(status, MldeStatus::InvalidArgument);
        assert_eq!(
            mlde_model_predict_rgb8(handle, ptr::null(), 1, 1, &mut fused, ptr::null_mut()),
            MldeStatus::NullPointer
        );
        mlde_model_free(handle);
    }
}

#[test]
fn fuse_matches_core() {
    let alpha = [0.3, -1.2, 2.0, 0.0];
    let p = [0.1, 0.9, 0.4, 0.7];
    let params = mlde::fusion::FusionParameters::new(alpha).unwrap();
    let probs = mlde::fusion::BranchProbabilities::new(p).unwrap();
    let mut out = 0.0;
    unsafe {
        assert_eq!(mlde_fuse(alpha.as_ptr(), p.as_ptr(), &mut out), MldeStatus::Ok);
    }
    assert_eq!(out, mlde::fusion::fuse(&probs, &params).unwrap());

    let expected = mlde::fusion::fuse_gradients(&probs, &params, -0.7).unwrap();
    let (mut ga, mut gp) = ([0.0; 4], [0.0; 4]);
    unsafe {
        let s = mlde_fuse_gradients(alpha.as_ptr(), p.as_ptr(), -0.7, ga.as_mut_ptr(), gp.as_mut_ptr());
        assert_eq!(s, MldeStatus::Ok);
    }
    assert_eq!(ga, expected.alpha);
    assert_eq!(gp, expected.p);
}

#[test]
fn fuse_rejects_bad_inputs() {
    let mut out = 0.0;
    let alpha = [0.0; 4];
    unsafe {
        assert_eq!(
            mlde_fuse(alpha.as_ptr(), [0.1, 0.2, 1.5, 0.3].as_ptr(), &mut out),
            MldeStatus::InvalidArgument
        );
        assert_eq!(
            mlde_fuse([f64::NAN, 0.0, 0.0, 0.0].as_ptr(), [0.5; 4].as_ptr(), &mut out),
            MldeStatus::NonFinite
        );
        let (mut ga, mut gp) = ([0.0; 4], [0.0; 4]);
        assert_eq!(
            mlde_fuse_gradients(
                alpha.as_ptr(),
                [0.5; 4].as_ptr(),
                f64::INFINITY,
                ga.as_mut_ptr(),
                gp.as_mut_ptr()
            ),
            MldeStatus::NonFinite
        );
        assert_eq!(
            mlde_fuse(ptr::null(), alpha.as_ptr(), &mut out),
            MldeStatus::NullPointer
        );
    }
    assert!(!last_error().is_empty());
}

#[test]
fn auc_worked_example_and_errors() {
    let scores = [0.9, 0.4, 0.35, 0.8];
    let labels = [1u8, 0, 1, 0];
    let mut out = 0.0;
    unsafe {
        assert_eq!(mlde_auc(scores.as_ptr(), labels.as_ptr(), 4, &mut out), MldeStatus::Ok);
        assert_eq!(out, 0.5);
        assert_eq!(
            mlde_auc(scores.as_ptr(), [1u8; 4].as_ptr(), 4, &mut out),
            MldeStatus::UndefinedAuc
        );
        assert_eq!(
            mlde_auc(ptr::null(), ptr::null(), 0, &mut out),
            MldeStatus::UndefinedAuc
        );
        assert_eq!(
            mlde_auc(scores.as_ptr(), [1u8, 0, 2, 0].as_ptr(), 4, &mut out),
            MldeStatus::InvalidArgument
        );
        assert_eq!(
            mlde_auc([f64::NAN, 0.1].as_ptr(), [1u8, 0].as_ptr(), 2, &mut out),
            MldeStatus::NonFinite
        );
    }
}

#[test]
fn class_codes_and_version() {
    assert_eq!(mlde_class_count(), 7);
    let codes: Vec<String> = (0..7)
        .map(|i| {
            unsafe { CStr::from_ptr(mlde_class_code(i)) }
                .to_str()
                .unwrap()
                .to_owned()
        })
        .collect();
    assert_eq!(codes, ["MEL", "NV", "BCC", "AKIEC", "BKL", "DF", "VASC"]);
    assert!(mlde_class_code(7).is_null());
    let v = unsafe { CStr::from_ptr(mlde_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn last_error_truncates_and_reports_length() {
    let mut out = 0.0;
    unsafe {
        assert_eq!(mlde_auc(ptr::null(), ptr::null(), 3, &mut out), MldeStatus::NullPointer);
        let full = mlde_last_error(ptr::null_mut(), 0);
        assert!(full > 4);
        let mut buf = [1 as std::ffi::c_char; 4];
        assert_eq!(mlde_last_error(buf.as_mut_ptr(), 4), full);
        assert_eq!(buf[3], 0);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_bytes().len(), 3);
    }
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/mlde.h");
    for name in [
        "mlde_model_load",
        "mlde_model_free",
        "mlde_model_target",
        "mlde_model_fusion_weights",
        "mlde_model_predict_rgb8",
        "mlde_fuse",
        "mlde_fuse_gradients",
        "mlde_auc",
        "mlde_class_code",
        "mlde_class_count",
        "mlde_last_error",
        "mlde_version",
        "typedef struct MldeModel MldeModel",
        "MLDE_STATUS_CHECKSUM = 4",
    ] {
        assert!(header.contains(name), "{name}");
    }
}

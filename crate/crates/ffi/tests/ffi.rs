use std::ffi::{c_char, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use fctn::metrics::ConfusionMatrix;
use fctn::model::{ArchSpec, Branch, ConvSpec, FctnModel, Prediction};
use fctn::pseudolabel::agreement_mask;
use fctn::trainer::save_model;
use fctn::Tensor;
use fctn_ffi::*;

fn small_spec() -> ArchSpec {
    ArchSpec {
        input_channels: 3,
        num_classes: 4,
        base_layers: vec![ConvSpec::new(4, 3, 1)],
        branch_layers: vec![ConvSpec::new(4, 3, 2), ConvSpec::new(4, 1, 1)],
    }
}

fn saved_model(dir: &Path) -> (FctnModel<f32>, PathBuf) {
    let model = FctnModel::<f32>::new(small_spec(), 5).unwrap();
    let path = dir.join("m.ckpt");
    save_model(&model, None, &path).unwrap();
    (model, path)
}

fn image(h: usize, w: usize, seed: u32) -> Vec<f32> {
    (0..h * w * 3)
        .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f32 / 1000.0)
        .collect()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { fctn_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(511)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn load(path: &Path) -> *mut FctnModelHandle {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { fctn_model_load(c.as_ptr(), &mut h) }, FctnStatus::Ok);
    assert!(!h.is_null());
    h
}

#[test]
fn predict_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = saved_model(dir.path());
    let h = load(&path);
    let (mut classes, mut cin) = (0usize, 0usize);
    assert_eq!(unsafe { fctn_model_info(h, &mut classes, &mut cin) }, FctnStatus::Ok);
    assert_eq!((classes, cin), (4, 3));

    let (ht, wd) = (6, 7);
    let img = image(ht, wd, 1);
    let mut labels = vec![0u8; ht * wd];
    let mut conf = vec![0f32; ht * wd];
    let st = unsafe {
        fctn_predict(h, FctnBranch::Ft, img.as_ptr(), ht, wd, 3, labels.as_mut_ptr(), conf.as_mut_ptr())
    };
    assert_eq!(st, FctnStatus::Ok);
    let x = Tensor::new(&[ht, wd, 3], img.clone()).unwrap();
    let expected = model.predict(Branch::Ft, &x).unwrap();
    assert_eq!(labels, expected.labels);
    assert_eq!(conf, expected.confidence);
    unsafe { fctn_model_free(h) };
}

#[test]
fn pseudo_label_matches_agreement_rule() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = saved_model(dir.path());
    let h = load(&path);
    let (ht, wd) = (5, 5);
    let img = image(ht, wd, 9);
    let x = Tensor::new(&[ht, wd, 3], img.clone()).unwrap();
    let logits = model.logits(&x, &[Branch::F1, Branch::F2]).unwrap();
    let (p1, p2) = (Prediction::from_logits(&logits[0]), Prediction::from_logits(&logits[1]));
    for thr in [0.0, 0.3, 0.6, 1.0] {
        let mut mask = vec![0u8; ht * wd];
        let mut cov = -1.0;
        let st = unsafe { fctn_pseudo_label(h, img.as_ptr(), ht, wd, 3, thr, mask.as_mut_ptr(), &mut cov) };
        assert_eq!(st, FctnStatus::Ok);
        assert_eq!(mask, agreement_mask(&p1, &p2, thr));
        let labeled = mask.iter().filter(|&&y| y != FCTN_IGNORE_ID).count();
        assert_eq!(cov, labeled as f64 / (ht * wd) as f64);
    }
    unsafe { fctn_model_free(h) };
}

#[test]
fn evaluate_matches_confusion_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = saved_model(dir.path());
    let h = load(&path);
    let (n, ht, wd) = (3, 4, 5);
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut cm = ConfusionMatrix::new(4);
    for i in 0..n {
        let img = image(ht, wd, 100 + i as u32);
        let gt: Vec<u8> = (0..ht * wd).map(|p| if p % 7 == 0 { 255 } else { ((p + i) % 4) as u8 }).collect();
        let x = Tensor::new(&[ht, wd, 3], img.clone()).unwrap();
        cm.accumulate(&model.predict(Branch::F1, &x).unwrap().labels, &gt).unwrap();
        images.extend(img);
        masks.extend(gt);
    }
    let report = cm.iou_report();
    let mut iou = vec![0.0; 4];
    let mut miou = 0.0;
    let st = unsafe {
        fctn_evaluate(
            h,
            FctnBranch::F1,
            images.as_ptr(),
            masks.as_ptr(),
            n,
            ht,
            wd,
            3,
            iou.as_mut_ptr(),
            &mut miou,
        )
    };
    assert_eq!(st, FctnStatus::Ok);
    for (a, b) in iou.iter().zip(&report.iou) {
        match b {
            Some(v) => assert_eq!(a, v),
            None => assert!(a.is_nan()),
        }
    }
    assert_eq!(Some(miou), report.miou);
    unsafe { fctn_model_free(h) };
}

#[test]
fn errors_have_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("nope.ckpt").to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { fctn_model_load(missing.as_ptr(), &mut h) }, FctnStatus::Io);
    assert!(h.is_null());
    assert!(last_error().contains("nope.ckpt"));

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"definitely not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fctn_model_load(junk.as_ptr(), &mut h) }, FctnStatus::Checkpoint);

    assert_eq!(unsafe { fctn_model_load(ptr::null(), &mut h) }, FctnStatus::NullPointer);
    assert!(last_error().contains("path"));

    let (_, path) = saved_model(dir.path());
    let h = load(&path);
    let img = image(4, 4, 0);
    let mut labels = vec![0u8; 16];
    let st = unsafe { fctn_predict(h, FctnBranch::Ft, img.as_ptr(), 4, 4, 5, labels.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, FctnStatus::Shape);
    let st = unsafe { fctn_predict(h, FctnBranch::Ft, ptr::null(), 4, 4, 3, labels.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, FctnStatus::NullPointer);
    let st = unsafe { fctn_pseudo_label(h, img.as_ptr(), 4, 4, 3, 1.5, labels.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, FctnStatus::InvalidArgument);
    // success clears the message
    let st = unsafe { fctn_predict(h, FctnBranch::F2, img.as_ptr(), 4, 4, 3, labels.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, FctnStatus::Ok);
    assert_eq!(last_error(), "");
    unsafe {
        fctn_model_free(h);
        fctn_model_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_interface() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/fctn.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "fctn_last_error",
        "fctn_model_load",
        "fctn_model_free",
        "fctn_model_info",
        "fctn_predict",
        "fctn_pseudo_label",
        "fctn_evaluate",
        "FCTN_STATUS_OK",
        "FCTN_IGNORE_ID",
        "typedef struct FctnModelHandle FctnModelHandle",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    // the header must be valid C when a compiler is around
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

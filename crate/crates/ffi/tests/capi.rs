use std::ffi::{CStr, CString};
use std::ptr;

use makd::data::step_rng;
use makd::transformer::{Input, ModelConfig, ModelKind, TransformerModel};
use makd_ffi::*;

fn saved_teacher(dir: &tempfile::TempDir) -> (TransformerModel, CString) {
    let cfg = ModelConfig::new(ModelKind::EncoderMlm, 2, 8, 2, 11, 6);
    let model = TransformerModel::init(cfg, &mut step_rng(3, 0, 1)).unwrap();
    let path = dir.path().join("teacher.ckpt");
    model.save(&path).unwrap();
    (model, CString::new(path.to_str().unwrap()).unwrap())
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(makd_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn load_logits_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = saved_teacher(&dir);
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { makd_model_load(path.as_ptr(), &mut h) }, MakdStatus::Ok);
    let ids = [3usize, 5, 7, 1];
    let mut out = vec![0.0; ids.len() * 11];
    let st = unsafe { makd_model_logits(h, ids.as_ptr(), ids.len(), out.as_mut_ptr(), out.len()) };
    assert_eq!(st, MakdStatus::Ok);
    assert_eq!(out, model.logits(&Input::single(&ids)).unwrap().data());

    let mut info = MakdModelInfo::default();
    assert_eq!(unsafe { makd_model_info(h, &mut info) }, MakdStatus::Ok);
    assert_eq!((info.layers, info.hidden, info.heads, info.vocab_size), (2, 8, 2, 11));
    assert_eq!(info.parameters, model.num_params());
    assert_eq!(unsafe { makd_model_num_params(h) }, model.num_params());
    assert_eq!(info.factorized, 0);
    unsafe { makd_model_free(h) };
}

#[test]
fn wrong_buffer_size_is_a_shape_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, path) = saved_teacher(&dir);
    let mut h = ptr::null_mut();
    unsafe { makd_model_load(path.as_ptr(), &mut h) };
    let mut out = vec![0.0; 3];
    let st = unsafe { makd_model_logits(h, [1usize, 2].as_ptr(), 2, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, MakdStatus::Shape);
    assert!(last_error().contains("need 22"));
    unsafe { makd_model_free(h) };
}

#[test]
fn factorize_then_save_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = saved_teacher(&dir);
    let mut t = ptr::null_mut();
    unsafe { makd_model_load(path.as_ptr(), &mut t) };
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { makd_model_factorize(t, 2, &mut s) }, MakdStatus::Ok);
    let mut info = MakdModelInfo::default();
    unsafe { makd_model_info(s, &mut info) };
    assert_eq!(info.factorized, 1);
    assert!(info.parameters < model.num_params());

    let out = CString::new(dir.path().join("student.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { makd_model_save(s, out.as_ptr()) }, MakdStatus::Ok);
    let reloaded = TransformerModel::load(std::path::Path::new(out.to_str().unwrap())).unwrap();
    assert_eq!(reloaded.num_params(), info.parameters);

    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { makd_model_factorize(t, 0, &mut bad) }, MakdStatus::Rank);
    assert!(bad.is_null());
    unsafe {
        makd_model_free(s);
        makd_model_free(t);
    }
}

#[test]
fn missing_file_and_null_pointers() {
    let mut h = ptr::null_mut();
    let p = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { makd_model_load(p.as_ptr(), &mut h) }, MakdStatus::MissingFile);
    assert!(last_error().contains("/nonexistent/model.ckpt"));
    assert_eq!(unsafe { makd_model_load(ptr::null(), &mut h) }, MakdStatus::NullPointer);
    assert_eq!(unsafe { makd_model_info(ptr::null(), ptr::null_mut()) }, MakdStatus::NullPointer);
    assert_eq!(unsafe { makd_model_num_params(ptr::null()) }, 0);
    unsafe { makd_model_free(ptr::null_mut()) };
}

#[test]
fn rouge_l_through_the_c_interface() {
    let (c, r) = (CString::new("the cat sat").unwrap(), CString::new("the dog sat").unwrap());
    let (mut p, mut rc, mut f) = (0.0, 0.0, 0.0);
    assert_eq!(unsafe { makd_rouge_l(c.as_ptr(), r.as_ptr(), &mut p, &mut rc, &mut f) }, MakdStatus::Ok);
    for v in [p, rc, f] {
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }
    assert_eq!(last_error(), "");
    let empty = CString::new("").unwrap();
    let st = unsafe { makd_rouge_l(c.as_ptr(), empty.as_ptr(), ptr::null_mut(), ptr::null_mut(), &mut f) };
    assert_eq!(st, MakdStatus::InvalidArgument);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(makd_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn generated_header_declares_the_interface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/makd.h")).unwrap();
    for name in [
        "makd_model_load",
        "makd_model_free",
        "makd_model_logits",
        "makd_model_factorize",
        "makd_rouge_l",
        "makd_last_error",
        "MAKD_STATUS_MISSING_FILE",
        "typedef struct MakdModel MakdModel",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use adapt2::data::{self, SynthSpec};
use adapt2::models::{self, ModelBundle, Origin};
use adapt2::pretext::{Pretext, PretextConfig, PretextKind};
use adapt2::rng;
use adapt2_ffi::*;

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = adapt2_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// A small untrained SimCLR model and a matching synthetic dataset on disk.
fn fixtures(dir: &Path) -> (CString, CString) {
    let ds = data::synth_generate(&SynthSpec { windows_per_class: 6, ..SynthSpec::desk() }, 1).unwrap();
    let (_, norm) = data::normalize(&ds).unwrap();
    let pretext = Pretext::new(PretextConfig::new(PretextKind::SimClr), Default::default()).unwrap();
    let params = pretext.init_params(&mut rng::seeded(0)).unwrap();
    let bundle = ModelBundle { encoder: pretext.encoder.clone(), params, origin: Origin::Meta, norm: Some(norm) };
    let (d, m) = (dir.join("set.ads"), dir.join("model.bin"));
    data::write_dataset(&ds, &d).unwrap();
    bundle.save(&m).unwrap();
    (cpath(&d), cpath(&m))
}

#[test]
fn replay_finetune_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (dpath, mpath) = fixtures(dir.path());
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(adapt2_dataset_load(dpath.as_ptr(), &mut ds), Adapt2Status::Ok);
        let (mut len, mut ch, mut ts, mut classes, mut domains) = (0, 0, 0, 0, 0);
        assert_eq!(adapt2_dataset_shape(ds, &mut len, &mut ch, &mut ts, &mut classes, &mut domains), Adapt2Status::Ok);
        assert_eq!((len, ch, classes, domains), (4 * 4 * 6, 3, 4, 4));

        let mut model = ptr::null_mut();
        assert_eq!(adapt2_model_load(mpath.as_ptr(), &mut model), Adapt2Status::Ok);
        let (mut inc, mut dim, mut nc) = (0, 0, 0);
        assert_eq!(adapt2_model_info(model, &mut inc, &mut dim, &mut nc), Adapt2Status::Ok);
        assert_eq!((inc, nc), (3, 0));

        let mut replayed = ptr::null_mut();
        assert_eq!(adapt2_model_replay(model, ds, 2, 0.01, 7, &mut replayed), Adapt2Status::Ok);
        let mut tuned = ptr::null_mut();
        assert_eq!(adapt2_model_finetune(replayed, ds, Adapt2Protocol::LinearEval, 0.0, 5, &mut tuned), Adapt2Status::Ok);
        assert_eq!(adapt2_model_info(tuned, &mut inc, &mut dim, &mut nc), Adapt2Status::Ok);
        assert_eq!(nc, 4);

        // Predictions and embeddings through the C path equal the library's.
        let raw = data::read_dataset(dpath.to_str().unwrap()).unwrap();
        let first: Vec<f32> = raw.windows[..3].iter().flat_map(|w| w.values.data().to_vec()).collect();
        let mut labels = [usize::MAX; 3];
        assert_eq!(adapt2_model_predict(tuned, first.as_ptr(), 3, ts, labels.as_mut_ptr()), Adapt2Status::Ok);
        let saved = dir.path().join("tuned.bin");
        let spath = cpath(&saved);
        assert_eq!(adapt2_model_save(tuned, spath.as_ptr()), Adapt2Status::Ok);
        let bundle = ModelBundle::load(&saved).unwrap();
        let normed: Vec<_> = raw.windows[..3].iter().map(|w| bundle.norm.as_ref().unwrap().apply(&w.values).unwrap()).collect();
        assert_eq!(labels.to_vec(), adapt2::metrics::predict(&bundle, &normed).unwrap());

        let mut emb = vec![0.0f32; 3 * dim];
        assert_eq!(adapt2_model_embed(tuned, first.as_ptr(), 3, ts, emb.as_mut_ptr(), emb.len()), Adapt2Status::Ok);
        assert_eq!(emb, models::embed(&bundle.params, &bundle.encoder, &normed).unwrap().data());

        adapt2_model_free(tuned);
        adapt2_model_free(replayed);
        adapt2_model_free(model);
        adapt2_dataset_free(ds);
    }
}

#[test]
fn failures_report_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let (dpath, mpath) = fixtures(dir.path());
    unsafe {
        let mut ds = ptr::null_mut();
        let missing = cpath(&dir.path().join("missing.ads"));
        assert_eq!(adapt2_dataset_load(missing.as_ptr(), &mut ds), Adapt2Status::Io);
        assert!(ds.is_null());
        assert!(last_error().contains("i/o"));
        assert_eq!(adapt2_dataset_load(ptr::null(), &mut ds), Adapt2Status::NullArgument);
        assert_eq!(adapt2_dataset_load(mpath.as_ptr(), &mut ds), Adapt2Status::Format);

        let mut model = ptr::null_mut();
        assert_eq!(adapt2_model_load(mpath.as_ptr(), &mut model), Adapt2Status::Ok);
        assert!(adapt2_last_error_message().is_null(), "success clears the message");
        let values = [0.0f32; 3 * 16];
        let mut labels = [0usize; 1];
        assert_eq!(adapt2_model_predict(model, values.as_ptr(), 1, 16, labels.as_mut_ptr()), Adapt2Status::InvalidArgument);
        assert!(last_error().contains("classifier"));
        let mut emb = [0.0f32; 1];
        assert_eq!(adapt2_model_embed(model, values.as_ptr(), 1, 16, emb.as_mut_ptr(), 1), Adapt2Status::InvalidArgument);

        assert_eq!(adapt2_dataset_load(dpath.as_ptr(), &mut ds), Adapt2Status::Ok);
        let mut out = ptr::null_mut();
        assert_eq!(adapt2_model_replay(model, ds, 1, -1.0, 0, &mut out), Adapt2Status::Config);
        assert!(out.is_null());
        adapt2_model_free(model);
        adapt2_dataset_free(ds);
        adapt2_dataset_free(ptr::null_mut());
    }
}

#[test]
fn buffers_become_datasets() {
    let values: Vec<f32> = (0..4 * 3 * 8).map(|i| i as f32).collect();
    let labels = [0i64, 1, -1, 1];
    let domains = [0usize, 0, 1, 1];
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(adapt2_dataset_from_buffers(values.as_ptr(), labels.as_ptr(), domains.as_ptr(), 4, 3, 8, 2, &mut ds), Adapt2Status::Ok);
        let dir = tempfile::tempdir().unwrap();
        let p = cpath(&dir.path().join("b.ads"));
        assert_eq!(adapt2_dataset_save(ds, p.as_ptr()), Adapt2Status::Ok);
        adapt2_dataset_free(ds);
        let back = data::read_dataset(p.to_str().unwrap()).unwrap();
        assert_eq!(back.windows[2].label, None);
        assert_eq!(back.windows[3].values.data()[0], 72.0);
        assert_eq!(back.n_domains(), 2);

        assert_eq!(adapt2_dataset_from_buffers(values.as_ptr(), ptr::null(), domains.as_ptr(), 4, 3, 8, 2, &mut ds), Adapt2Status::Ok);
        adapt2_dataset_free(ds);
        assert_eq!(adapt2_dataset_from_buffers(ptr::null(), labels.as_ptr(), domains.as_ptr(), 4, 3, 8, 2, &mut ds), Adapt2Status::NullArgument);
    }
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/adapt2.h")).unwrap();
    for name in ["adapt2_model_replay", "adapt2_model_finetune", "adapt2_last_error_message", "ADAPT2_STATUS_NULL_ARGUMENT", "typedef struct Adapt2Model Adapt2Model"] {
        assert!(header.contains(name), "header lacks {name}");
    }
    // If a C compiler is around, make sure the header parses on its own.
    if let Ok(status) = std::process::Command::new("cc").args(["-fsyntax-only", "-x", "c", "-"]).stdin(std::process::Stdio::piped()).spawn().and_then(|mut c| {
        use std::io::Write;
        c.stdin.take().unwrap().write_all(header.as_bytes())?;
        c.wait()
    }) {
        assert!(status.success(), "header does not compile as C");
    }
}

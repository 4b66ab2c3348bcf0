use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use frnet::flow::GrayFrame;
use frnet::model::{write_checkpoint, Model, ModelConfig, Variant};
use frnet_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let need = unsafe { fr_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let msg = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
    assert_eq!(need, msg.len() + 1);
    msg
}

fn texture(h: usize, w: usize, dx: f32) -> Vec<f32> {
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f32, (i % w) as f32 - dx);
            0.5 + 0.2 * (x * 0.35).sin() * (y * 0.27).cos() + 0.1 * ((x + y) * 0.13).sin()
        })
        .collect()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(fr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn parameter_counts() {
    let mut n = 0u64;
    assert_eq!(
        unsafe { fr_count_parameters(FrVariant::Basic, 3, &mut n) },
        FrStatus::Ok
    );
    assert_eq!(
        n as usize,
        frnet::model::count_parameters(&ModelConfig::new(Variant::Basic, 3))
    );
    assert_eq!(
        unsafe { fr_count_parameters(FrVariant::Fr, 1, &mut n) },
        FrStatus::InvalidArgument
    );
    assert!(last_error().contains("class"), "{}", last_error());
    assert_eq!(
        unsafe { fr_count_parameters(FrVariant::Fr, 3, ptr::null_mut()) },
        FrStatus::NullPointer
    );
    assert_eq!(last_error(), "out is null");
}

#[test]
fn metrics_worked_example() {
    // Two 3x3 folds stored back to back.
    let counts: [u64; 18] = [2, 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0];
    let mut m = FrMetrics::default();
    assert_eq!(
        unsafe { fr_compute_metrics(counts.as_ptr(), 3, 2, &mut m) },
        FrStatus::Ok
    );
    let folds: Vec<_> = counts
        .chunks_exact(9)
        .map(|c| {
            frnet::protocols::ConfusionMatrix::from_rows(c.chunks_exact(3).map(<[u64]>::to_vec).collect()).unwrap()
        })
        .collect();
    let want = frnet::protocols::compute_metrics(&folds).unwrap();
    assert_eq!((m.acc, m.uf1, m.uar), (want.acc, want.uf1, want.uar));
    assert_eq!(
        unsafe { fr_compute_metrics(counts.as_ptr(), 3, 0, &mut m) },
        FrStatus::InvalidArgument
    );
    let zeros = [0u64; 9];
    assert_eq!(
        unsafe { fr_compute_metrics(zeros.as_ptr(), 3, 1, &mut m) },
        FrStatus::Data
    );
}

#[test]
fn flow_and_apex_match_the_library() {
    let (h, w) = (48, 48);
    let onset = texture(h, w, 0.0);
    let apex = texture(h, w, 1.0);
    let (mut u, mut v) = (vec![0f32; h * w], vec![0f32; h * w]);
    let status = unsafe { fr_tvl1_flow(onset.as_ptr(), apex.as_ptr(), h, w, u.as_mut_ptr(), v.as_mut_ptr()) };
    assert_eq!(status, FrStatus::Ok, "{}", last_error());
    let direct = frnet::flow::tvl1_flow(
        &GrayFrame::new(h, w, onset.clone()).unwrap(),
        &GrayFrame::new(h, w, apex.clone()).unwrap(),
        &Default::default(),
    )
    .unwrap();
    assert_eq!((u.as_slice(), v.as_slice()), (direct.u(), direct.v()));

    let (mut iu, mut iv) = (vec![0f32; 784], vec![0f32; 784]);
    let status = unsafe { fr_flow_to_inputs(u.as_ptr(), v.as_ptr(), h, w, iu.as_mut_ptr(), iv.as_mut_ptr()) };
    assert_eq!(status, FrStatus::Ok);
    let (eu, ev) = frnet::flow::flow_to_inputs(&direct).unwrap();
    assert_eq!((iu.as_slice(), iv.as_slice()), (eu.data(), ev.data()));

    let mut clip = onset.clone();
    for dx in [0.3f32, 1.2, 0.6] {
        clip.extend(texture(h, w, dx));
    }
    let mut idx = 0usize;
    assert_eq!(unsafe { fr_spot_apex(clip.as_ptr(), 4, h, w, &mut idx) }, FrStatus::Ok);
    assert_eq!(idx, 2);
    assert_eq!(
        unsafe { fr_spot_apex(clip.as_ptr(), 1, h, w, &mut idx) },
        FrStatus::Data
    );
    assert_eq!(
        unsafe { fr_spot_apex(clip.as_ptr(), 4, 0, w, &mut idx) },
        FrStatus::InvalidArgument
    );
    let bright = vec![2.0f32; h * w * 2];
    assert_eq!(
        unsafe { fr_spot_apex(bright.as_ptr(), 2, h, w, &mut idx) },
        FrStatus::Data
    );
}

#[test]
fn model_handle_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let config = ModelConfig {
        shared_dim: 16,
        detector_hidden: 4,
        classifier_hidden: 4,
        branch_filters_l1: 2,
        branch_filters_l2: 2,
        ..ModelConfig::new(Variant::Fr, 3)
    };
    let model = Model::<f32>::new(config.clone(), 5).unwrap();
    let path = dir.path().join("ckpt");
    write_checkpoint(&path, &model.config, &model.params).unwrap();

    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle: *mut FrModel = ptr::null_mut();
    assert_eq!(unsafe { fr_model_load(c_path.as_ptr(), &mut handle) }, FrStatus::Ok);
    assert!(!handle.is_null());
    let mut k = 0usize;
    assert_eq!(unsafe { fr_model_num_classes(handle, &mut k) }, FrStatus::Ok);
    assert_eq!(k, 3);

    let n = 4;
    let u: Vec<f32> = (0..n * 784).map(|i| ((i as f32) * 0.017).sin()).collect();
    let v: Vec<f32> = (0..n * 784).map(|i| ((i as f32) * 0.023).cos()).collect();
    let mut labels = vec![9u32; n];
    let mut logits = vec![0f32; n * 3];
    let status = unsafe {
        fr_model_predict(
            handle,
            u.as_ptr(),
            v.as_ptr(),
            n,
            labels.as_mut_ptr(),
            logits.as_mut_ptr(),
        )
    };
    assert_eq!(status, FrStatus::Ok, "{}", last_error());
    let shape = [n, 1, 28, 28];
    let (tu, tv) = (
        frnet::autodiff::Tensor::new(shape, u.clone()).unwrap(),
        frnet::autodiff::Tensor::new(shape, v.clone()).unwrap(),
    );
    let want = model.predict(&tu, &tv).unwrap();
    assert_eq!(labels.iter().map(|&l| l as usize).collect::<Vec<_>>(), want);
    assert_eq!(logits, model.evaluate(&tu, &tv).unwrap().logits.data());
    let status = unsafe { fr_model_predict(handle, u.as_ptr(), v.as_ptr(), n, labels.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(status, FrStatus::Ok);
    assert_eq!(
        unsafe { fr_model_predict(handle, ptr::null(), v.as_ptr(), n, labels.as_mut_ptr(), ptr::null_mut()) },
        FrStatus::NullPointer
    );
    unsafe { fr_model_free(handle) };
    unsafe { fr_model_free(ptr::null_mut()) };

    let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
    let mut h2: *mut FrModel = ptr::null_mut();
    assert_eq!(unsafe { fr_model_load(missing.as_ptr(), &mut h2) }, FrStatus::Io);
    assert!(h2.is_null());
    std::fs::write(dir.path().join("junk"), b"not a checkpoint").unwrap();
    let junk = CString::new(dir.path().join("junk").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fr_model_load(junk.as_ptr(), &mut h2) }, FrStatus::Format);
    assert!(!last_error().is_empty());
    assert_eq!(
        unsafe { fr_model_num_classes(ptr::null(), &mut k) },
        FrStatus::NullPointer
    );
}

#[test]
fn last_error_truncates_and_clears() {
    let mut n = 0u64;
    unsafe { fr_count_parameters(FrVariant::Fr, 3, ptr::null_mut()) };
    let mut small = [0x7f as std::ffi::c_char; 4];
    let need = unsafe { fr_last_error_message(small.as_mut_ptr(), small.len()) };
    assert_eq!(need, "out is null".len() + 1);
    assert_eq!(unsafe { CStr::from_ptr(small.as_ptr()) }.to_str().unwrap(), "out");
    assert_eq!(unsafe { fr_last_error_message(ptr::null_mut(), 0) }, need);
    assert_eq!(unsafe { fr_count_parameters(FrVariant::Fr, 3, &mut n) }, FrStatus::Ok);
    assert_eq!(last_error(), "");
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/frnet.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in [
        "fr_model_load",
        "fr_model_predict",
        "fr_tvl1_flow",
        "fr_spot_apex",
        "fr_compute_metrics",
        "FR_INPUT_SIZE 28",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\nint main(void) {{ FrModel *m = 0; FrStatus s = fr_model_load(\"x\", &m); fr_model_free(m); return s == FR_STATUS_OK; }}\n"
        ),
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    match Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"])
        .arg(&src)
        .output()
    {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("skipping C compile check, {cc} unavailable: {e}"),
    }
}

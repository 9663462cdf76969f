use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use kgamc::checkpoint::save_checkpoint;
use kgamc::mkg;
use kgamc::sigsyn::{frame_rng, synth_dataset, synth_frame, ModulationClass, SynthConfig};
use kgamc::trainer::{infer, train, InferMode, TrainConfig};
use kgamc_ffi::*;

fn last_error() -> String {
    let p = kgamc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn trained_checkpoint(dir: &Path) -> (PathBuf, kgamc::dataio::Dataset) {
    let cfg = SynthConfig {
        frame_len: 32,
        seed: 5,
        snr_grid: vec![10],
        classes: vec![ModulationClass::Bpsk, ModulationClass::Qpsk, ModulationClass::Gfsk],
        ..SynthConfig::default()
    };
    let ds = synth_dataset(&cfg, 12).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 16,
        d: 8,
        stem_channels: 4,
        branch_channels: 4,
        seed: 3,
        ..TrainConfig::default()
    };
    let (state, _) = train::<f32>(&ds, None, &mkg::default_graph().unwrap(), &tc, &mut |_| {}).unwrap();
    let path = dir.join("m.kgmc");
    save_checkpoint(&state, &path).unwrap();
    (path, ds)
}

#[test]
fn classify_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ds) = trained_checkpoint(dir.path());
    let state = kgamc::checkpoint::load_checkpoint::<f32>(&path).unwrap();

    let mut model = ptr::null_mut();
    let p = cstr(path.to_str().unwrap());
    assert_eq!(unsafe { kgamc_model_load(p.as_ptr(), &mut model) }, KgamcStatus::Ok);
    assert!(!model.is_null());
    let (m, l, d) = unsafe {
        (
            kgamc_model_num_classes(model),
            kgamc_model_frame_len(model),
            kgamc_model_feature_dim(model),
        )
    };
    assert_eq!((m, l, d), (3, 32, 8));

    let mut buf = [0 as c_char; 16];
    let mut needed = 0usize;
    let st = unsafe { kgamc_model_class_name(model, 2, buf.as_mut_ptr(), buf.len(), &mut needed) };
    assert_eq!(st, KgamcStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), "GFSK");
    assert_eq!(needed, 5);
    let st = unsafe { kgamc_model_class_name(model, 0, buf.as_mut_ptr(), 2, &mut needed) };
    assert_eq!(st, KgamcStatus::BufferTooSmall);
    assert_eq!(needed, 5);
    let st = unsafe { kgamc_model_class_name(model, 3, buf.as_mut_ptr(), buf.len(), ptr::null_mut()) };
    assert_eq!(st, KgamcStatus::InvalidArgument);

    let n = ds.len();
    let iq: Vec<f32> = ds.frames.iter().flat_map(|f| f.iq.iter().copied()).collect();
    for (mode, inner) in [
        (KgamcMode::Classifier, InferMode::Classifier),
        (KgamcMode::Anchor, InferMode::Anchor),
    ] {
        let want = infer(&ds.frames, &state, inner).unwrap();
        let mut labels = vec![u32::MAX; n];
        let mut scores = vec![f32::NAN; n * m];
        let st = unsafe { kgamc_classify(model, iq.as_ptr(), n, mode, labels.as_mut_ptr(), scores.as_mut_ptr()) };
        assert_eq!(st, KgamcStatus::Ok);
        assert_eq!(labels.iter().map(|&v| v as usize).collect::<Vec<_>>(), want.labels);
        assert_eq!(scores, want.scores.data());
        let st = unsafe { kgamc_classify(model, iq.as_ptr(), n, mode, labels.as_mut_ptr(), ptr::null_mut()) };
        assert_eq!(st, KgamcStatus::Ok);
    }

    let want = infer(&ds.frames, &state, InferMode::Classifier).unwrap();
    let mut feats = vec![0f32; n * d];
    assert_eq!(
        unsafe { kgamc_features(model, iq.as_ptr(), n, feats.as_mut_ptr()) },
        KgamcStatus::Ok
    );
    assert_eq!(feats, want.features.data());

    let mut labels = [0u32; 1];
    let st = unsafe {
        kgamc_classify(
            model,
            iq.as_ptr(),
            0,
            KgamcMode::Classifier,
            labels.as_mut_ptr(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, KgamcStatus::InvalidArgument);
    assert!(last_error().contains("n_frames"));

    unsafe { kgamc_model_free(model) };
}

#[test]
fn null_pointers_are_rejected() {
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { kgamc_model_load(ptr::null(), &mut model) },
        KgamcStatus::NullPointer
    );
    assert!(model.is_null());
    assert_eq!(last_error(), "path is null");
    let p = cstr("x");
    assert_eq!(
        unsafe { kgamc_model_load(p.as_ptr(), ptr::null_mut()) },
        KgamcStatus::NullPointer
    );

    let mut labels = [0u32; 1];
    let iq = [0f32; 4];
    let st = unsafe {
        kgamc_classify(
            ptr::null(),
            iq.as_ptr(),
            1,
            KgamcMode::Classifier,
            labels.as_mut_ptr(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, KgamcStatus::NullPointer);
    assert_eq!(last_error(), "model is null");
    assert_eq!(
        unsafe { kgamc_features(ptr::null(), iq.as_ptr(), 1, ptr::null_mut()) },
        KgamcStatus::NullPointer
    );
    let st = unsafe { kgamc_synth_frame(ptr::null(), 0, 0, 0, 16, ptr::null_mut()) };
    assert_eq!(st, KgamcStatus::NullPointer);
    unsafe {
        assert_eq!(kgamc_model_num_classes(ptr::null()), 0);
        assert_eq!(kgamc_model_frame_len(ptr::null()), 0);
        assert_eq!(kgamc_model_feature_dim(ptr::null()), 0);
        kgamc_model_free(ptr::null_mut());
    }
}

#[test]
fn load_errors_carry_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = ptr::null_mut();
    let missing = cstr(dir.path().join("none.kgmc").to_str().unwrap());
    assert_eq!(
        unsafe { kgamc_model_load(missing.as_ptr(), &mut model) },
        KgamcStatus::Io
    );
    assert!(last_error().contains("none.kgmc"));

    let junk = dir.path().join("junk.kgmc");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = cstr(junk.to_str().unwrap());
    assert_eq!(
        unsafe { kgamc_model_load(junk.as_ptr(), &mut model) },
        KgamcStatus::Validation
    );
    assert!(model.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn synth_frame_matches_the_library() {
    let mut out = vec![0f32; 2 * 48];
    let name = cstr("QAM16");
    let st = unsafe { kgamc_synth_frame(name.as_ptr(), -4, 9, 17, 48, out.as_mut_ptr()) };
    assert_eq!(st, KgamcStatus::Ok);
    let cfg = SynthConfig {
        frame_len: 48,
        seed: 9,
        snr_grid: vec![-4],
        classes: vec![ModulationClass::Qam16],
        ..SynthConfig::default()
    };
    let want = synth_frame(ModulationClass::Qam16, 0, -4, &cfg, &mut frame_rng(9, 17)).unwrap();
    assert_eq!(out, want.iq);

    let bad = cstr("OOK");
    assert_eq!(
        unsafe { kgamc_synth_frame(bad.as_ptr(), 0, 0, 0, 48, out.as_mut_ptr()) },
        KgamcStatus::Validation
    );
    let st = unsafe { kgamc_synth_frame(name.as_ptr(), 0, 0, 0, 0, out.as_mut_ptr()) };
    assert_eq!(st, KgamcStatus::Validation);
}

#[test]
fn kg_validate_counts_violations() {
    let mut n = usize::MAX;
    assert_eq!(unsafe { kgamc_kg_validate(ptr::null(), &mut n) }, KgamcStatus::Ok);
    assert_eq!(n, 0);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, format!("{}bandwidth_wide\tisBaseOf\tBPSK\n", mkg::DEFAULT_MKG)).unwrap();
    let p = cstr(bad.to_str().unwrap());
    assert_eq!(
        unsafe { kgamc_kg_validate(p.as_ptr(), &mut n) },
        KgamcStatus::Validation
    );
    assert_eq!(n, 1);
    assert!(last_error().starts_with("1 violations"));

    let missing = cstr(dir.path().join("none.tsv").to_str().unwrap());
    assert_eq!(
        unsafe { kgamc_kg_validate(missing.as_ptr(), ptr::null_mut()) },
        KgamcStatus::Io
    );
}

#[test]
fn version_is_the_package_version() {
    let v = unsafe { CStr::from_ptr(kgamc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "kgamc.h"

int main(void) {
    float frame[64];
    size_t n = 99;
    KgamcModel *model = NULL;
    if (kgamc_kg_validate(NULL, &n) != KGAMC_STATUS_OK || n != 0) return 1;
    if (kgamc_synth_frame("BPSK", 10, 1, 0, 32, frame) != KGAMC_STATUS_OK) return 2;
    if (kgamc_model_load(NULL, &model) != KGAMC_STATUS_NULL_POINTER) return 3;
    if (strcmp(kgamc_last_error(), "path is null") != 0) return 4;
    printf("%s\n", kgamc_version());
    return 0;
}
"#;

/// Compiles and runs a small C program against the generated header and the
/// static library. Skipped when no C compiler is on PATH.
#[test]
fn header_compiles_and_links_from_c() {
    let header_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(header_dir.join("kgamc.h").exists());
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler, skipping");
        return;
    }
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap();
    let lib = lib_dir.join("libkgamc_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built, skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = dir.path().join("main");
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(&header_dir)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert_eq!(run.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), env!("CARGO_PKG_VERSION"));
}

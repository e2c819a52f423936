use std::ffi::{CStr, CString};
use std::ptr;

use cnnjm::artifact::{save_model, ModelArtifact, Provenance};
use cnnjm::corpus::{build_vocabulary, parse_alignment_line, tokenize};
use cnnjm::encoder::{Arch, Fusion};
use cnnjm::nbest::score_hypothesis;
use cnnjm::training::{grad_check_config, TrainConfig};
use cnnjm::Model;
use cnnjm_ffi::*;

fn artifact(arch: Arch) -> ModelArtifact {
    let src = build_vocabulary([tokenize("le chat est sur la table")], 100).unwrap();
    let tgt = build_vocabulary([tokenize("the cat is on the table")], 100).unwrap();
    let model = Model::init_with_scale(
        grad_check_config(arch, Fusion::Gating),
        src.len(),
        tgt.len(),
        11,
        0.5,
    )
    .unwrap();
    ModelArtifact::new(model, TrainConfig::default(), src, tgt, true, Provenance::default()).unwrap()
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = cnnjm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

struct Loaded {
    handle: *mut CnnjmModel,
    artifact: ModelArtifact,
    _dir: tempfile::TempDir,
}

impl Drop for Loaded {
    fn drop(&mut self) {
        unsafe { cnnjm_model_free(self.handle) };
    }
}

fn load(arch: Arch) -> Loaded {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cjlm");
    let artifact = artifact(arch);
    save_model(&artifact, &path).unwrap();
    let mut handle = ptr::null_mut();
    let st = unsafe { cnnjm_model_load(c(path.to_str().unwrap()).as_ptr(), &mut handle) };
    assert_eq!(st, CnnjmStatus::Ok);
    assert!(!handle.is_null());
    Loaded {
        handle,
        artifact,
        _dir: dir,
    }
}

#[test]
fn info_reports_model_shape() {
    let m = load(Arch::Attention);
    let mut info = std::mem::MaybeUninit::<CnnjmModelInfo>::uninit();
    let st = unsafe { cnnjm_model_info(m.handle, info.as_mut_ptr()) };
    assert_eq!(st, CnnjmStatus::Ok);
    let info = unsafe { info.assume_init() };
    assert_eq!(info.arch, CnnjmArch::Attention);
    assert_eq!(info.source_vocab_size, m.artifact.src_vocab.len());
    assert_eq!(info.target_vocab_size, m.artifact.tgt_vocab.len());
    assert_eq!(info.maxlen, 10);
    assert_eq!(info.history, 3);
    assert_eq!(info.emit_eos, 1);
    assert_eq!(info.parameter_count, m.artifact.model.parameter_count());
}

#[test]
fn score_matches_library() {
    for arch in [Arch::Generic, Arch::Tag, Arch::Attention] {
        let m = load(arch);
        let src = "le chat est sur la table";
        let hyp = "the cat sat on the mat";
        let ali = "0-0 1-1 3-3 4-4 5-5";
        let mut score = 0.0;
        let st = unsafe {
            cnnjm_model_score(
                m.handle,
                c(src).as_ptr(),
                c(hyp).as_ptr(),
                c(ali).as_ptr(),
                ptr::null(),
                &mut score,
            )
        };
        assert_eq!(st, CnnjmStatus::Ok, "{arch}");
        let links = parse_alignment_line(ali).unwrap().transposed();
        let want =
            score_hypothesis(&m.artifact, &tokenize(src), None, &tokenize(hyp), Some(&links)).unwrap();
        assert_eq!(score, want);
        assert!(score < 0.0);
    }
}

#[test]
fn tag_dep_uses_heads() {
    let m = load(Arch::TagDep);
    let (src, hyp, ali) = ("le chat est", "the cat is", "0-0 1-1 2-2");
    let mut score = 0.0;
    let st = unsafe {
        cnnjm_model_score(
            m.handle,
            c(src).as_ptr(),
            c(hyp).as_ptr(),
            c(ali).as_ptr(),
            ptr::null(),
            &mut score,
        )
    };
    assert_eq!(st, CnnjmStatus::MissingGuide);

    let st = unsafe {
        cnnjm_model_score(
            m.handle,
            c(src).as_ptr(),
            c(hyp).as_ptr(),
            c(ali).as_ptr(),
            c("1 2 -1").as_ptr(),
            &mut score,
        )
    };
    assert_eq!(st, CnnjmStatus::Ok);
    let links = parse_alignment_line(ali).unwrap().transposed();
    let want = score_hypothesis(
        &m.artifact,
        &tokenize(src),
        Some(&[1, 2, -1]),
        &tokenize(hyp),
        Some(&links),
    )
    .unwrap();
    assert_eq!(score, want);
}

#[test]
fn tag_model_without_alignment_is_rejected() {
    let m = load(Arch::Tag);
    let mut score = 0.0;
    let st = unsafe {
        cnnjm_model_score(
            m.handle,
            c("le chat").as_ptr(),
            c("the cat").as_ptr(),
            ptr::null(),
            ptr::null(),
            &mut score,
        )
    };
    assert_eq!(st, CnnjmStatus::MissingGuide);
    assert!(last_error().contains("alignment"));
}

#[test]
fn nbest_line_gains_feature() {
    let m = load(Arch::Tag);
    let line = "17 ||| the cat ||| 0-0 1-1 ||| LM0= -3.5 ||| -1.25";
    let mut out = ptr::null_mut();
    let st = unsafe {
        cnnjm_score_nbest_line(
            m.handle,
            c("le chat").as_ptr(),
            ptr::null(),
            c(line).as_ptr(),
            c("CNN").as_ptr(),
            &mut out,
        )
    };
    assert_eq!(st, CnnjmStatus::Ok);
    let got = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_owned();
    unsafe { cnnjm_string_free(out) };
    assert!(got.starts_with("17 ||| the cat ||| 0-0 1-1 ||| LM0= -3.5 CNN= -"));
    assert!(got.ends_with(" ||| -1.25"));
}

#[test]
fn load_errors_have_codes() {
    let mut h = ptr::null_mut();
    let st = unsafe { cnnjm_model_load(c("/nonexistent/model.cjlm").as_ptr(), &mut h) };
    assert_eq!(st, CnnjmStatus::Io);
    assert!(h.is_null());
    assert!(!last_error().is_empty());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cjlm");
    let mut bytes = artifact(Arch::Generic).to_bytes().unwrap();
    let n = bytes.len();
    bytes[n - 30] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    let st = unsafe { cnnjm_model_load(c(path.to_str().unwrap()).as_ptr(), &mut h) };
    assert_eq!(st, CnnjmStatus::Format);
    assert!(last_error().contains("checksum"));

    bytes[4..8].copy_from_slice(&999u32.to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    let st = unsafe { cnnjm_model_load(c(path.to_str().unwrap()).as_ptr(), &mut h) };
    assert_eq!(st, CnnjmStatus::UnsupportedVersion);
}

#[test]
fn null_arguments_are_reported() {
    let st = unsafe { cnnjm_model_load(ptr::null(), ptr::null_mut()) };
    assert_eq!(st, CnnjmStatus::NullPointer);
    let mut score = 0.0;
    let st = unsafe {
        cnnjm_model_score(
            ptr::null(),
            ptr::null(),
            ptr::null(),
            ptr::null(),
            ptr::null(),
            &mut score,
        )
    };
    assert_eq!(st, CnnjmStatus::NullPointer);
    assert_eq!(last_error(), "model is null");
    unsafe {
        cnnjm_model_free(ptr::null_mut());
        cnnjm_string_free(ptr::null_mut());
    }
}

#[test]
fn invalid_utf8_is_reported() {
    let m = load(Arch::Generic);
    let bad = [0xffu8, 0xfe, 0];
    let mut score = 0.0;
    let st = unsafe {
        cnnjm_model_score(
            m.handle,
            bad.as_ptr() as *const _,
            c("x").as_ptr(),
            ptr::null(),
            ptr::null(),
            &mut score,
        )
    };
    assert_eq!(st, CnnjmStatus::InvalidUtf8);
}

#[test]
fn success_clears_last_error() {
    let m = load(Arch::Generic);
    unsafe { cnnjm_model_load(ptr::null(), ptr::null_mut()) };
    assert!(!cnnjm_last_error().is_null());
    let mut score = 0.0;
    let st = unsafe {
        cnnjm_model_score(
            m.handle,
            c("le").as_ptr(),
            c("the").as_ptr(),
            ptr::null(),
            ptr::null(),
            &mut score,
        )
    };
    assert_eq!(st, CnnjmStatus::Ok);
    assert!(cnnjm_last_error().is_null());
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(cnnjm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn generated_header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/cnnjm.h"))
        .unwrap();
    for name in [
        "cnnjm_model_load",
        "cnnjm_model_free",
        "cnnjm_model_info",
        "cnnjm_model_score",
        "cnnjm_score_nbest_line",
        "cnnjm_string_free",
        "cnnjm_last_error",
        "cnnjm_version",
        "typedef struct CnnjmModel CnnjmModel",
        "CNNJM_STATUS_OK",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found, skipping");
        return;
    };
    let dir = env!("CARGO_MANIFEST_DIR");
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(format!("{dir}/include"))
        .arg(format!("{dir}/tests/c/smoke.c"))
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|cc| {
            std::process::Command::new(cc)
                .arg("--version")
                .output()
                .is_ok_and(|o| o.status.success())
        })
        .ok_or(())
}

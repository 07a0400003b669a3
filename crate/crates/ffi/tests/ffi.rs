use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use iplforge::synthcorpus::FeatureMatrix;
use iplforge::tokenizer::train_bpe;
use iplforge::transducer::{init_model, transducer_loss, write_checkpoint, ArchConfig, LogitLattice};
use iplforge_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ipl_last_error()) }.to_string_lossy().into_owned()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take_string(p: *mut c_char) -> String {
    let s = CStr::from_ptr(p).to_string_lossy().into_owned();
    ipl_string_free(p);
    s
}

struct Handles {
    _dir: tempfile::TempDir,
    model: *mut IplModel,
    vocab: *mut IplVocab,
    core_model: iplforge::transducer::Model,
    core_vocab: iplforge::tokenizer::Vocab,
}

impl Drop for Handles {
    fn drop(&mut self) {
        unsafe {
            ipl_model_free(self.model);
            ipl_vocab_free(self.vocab);
        }
    }
}

fn handles() -> Handles {
    let dir = tempfile::tempdir().unwrap();
    let core_vocab = train_bpe("аб ва баба вабаб", 8).unwrap();
    let vpath = dir.path().join("v.vocab");
    core_vocab.write(&vpath).unwrap();
    let core_model = init_model(ArchConfig::with_vocab(core_vocab.label_count()), 5).unwrap();
    let cpath = dir.path().join("m.ckpt");
    write_checkpoint(&core_model, &cpath).unwrap();
    let mut model = ptr::null_mut();
    let mut vocab = ptr::null_mut();
    unsafe {
        assert_eq!(ipl_model_load(cstr(cpath.to_str().unwrap()).as_ptr(), &mut model), IplStatus::Ok);
        assert_eq!(ipl_vocab_load(cstr(vpath.to_str().unwrap()).as_ptr(), &mut vocab), IplStatus::Ok);
    }
    Handles { _dir: dir, model, vocab, core_model, core_vocab }
}

#[test]
fn load_reports_missing_files() {
    let mut model = ptr::null_mut();
    let status = unsafe { ipl_model_load(cstr("/nonexistent/m.ckpt").as_ptr(), &mut model) };
    assert_eq!(status, IplStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("/nonexistent/m.ckpt"));
    let status = unsafe { ipl_model_load(ptr::null(), &mut model) };
    assert_eq!(status, IplStatus::NullArgument);
    let mut vocab = ptr::null_mut();
    assert_eq!(unsafe { ipl_vocab_load(cstr("/nonexistent").as_ptr(), &mut vocab) }, IplStatus::Io);
}

#[test]
fn corrupt_checkpoint_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.ckpt");
    std::fs::write(&p, b"not a checkpoint").unwrap();
    let mut model = ptr::null_mut();
    let status = unsafe { ipl_model_load(cstr(p.to_str().unwrap()).as_ptr(), &mut model) };
    assert_eq!(status, IplStatus::Checkpoint, "{}", last_error());
}

#[test]
fn handles_expose_shapes() {
    let h = handles();
    unsafe {
        assert_eq!(ipl_model_vocab_size(h.model), h.core_vocab.label_count());
        assert_eq!(ipl_vocab_label_count(h.vocab), h.core_vocab.label_count());
        assert_eq!(ipl_model_feature_dim(h.model), 16);
        assert_eq!(ipl_model_vocab_size(ptr::null()), 0);
    }
}

#[test]
fn encode_decode_round_trip() {
    let h = handles();
    let text = cstr("баба ва");
    let mut len = 0usize;
    unsafe {
        assert_eq!(ipl_vocab_encode(h.vocab, text.as_ptr(), ptr::null_mut(), 0, &mut len), IplStatus::BufferTooSmall);
        assert_eq!(len, h.core_vocab.encode("баба ва").len());
        let mut ids = vec![0u32; len];
        assert_eq!(ipl_vocab_encode(h.vocab, text.as_ptr(), ids.as_mut_ptr(), len, &mut len), IplStatus::Ok);
        assert_eq!(ids, h.core_vocab.encode("баба ва"));
        let mut out = ptr::null_mut();
        assert_eq!(ipl_vocab_decode(h.vocab, ids.as_ptr(), ids.len(), &mut out), IplStatus::Ok);
        assert_eq!(take_string(out), "баба ва");
        let bad = [9999u32];
        assert_eq!(ipl_vocab_decode(h.vocab, bad.as_ptr(), 1, &mut out), IplStatus::Decode);
        assert!(!last_error().is_empty());
    }
}

#[test]
fn transcribe_matches_core() {
    let h = handles();
    let frames = 9;
    let data: Vec<f32> = (0..frames * 16).map(|i| ((i * 7 % 13) as f32 - 6.0) / 3.0).collect();
    let feats = FeatureMatrix::new(frames, 16, data.clone()).unwrap();
    let (want, want_c) = iplforge::decoder::transcribe(&h.core_model, &h.core_vocab, &feats).unwrap();
    let mut text = ptr::null_mut();
    let mut certainty = 1.0;
    unsafe {
        let s = ipl_transcribe(h.model, h.vocab, data.as_ptr(), frames, 16, &mut text, &mut certainty);
        assert_eq!(s, IplStatus::Ok, "{}", last_error());
        assert_eq!(take_string(text), want);
        assert_eq!(certainty, want_c);
        let s = ipl_transcribe(h.model, h.vocab, data.as_ptr(), frames * 2, 8, &mut text, ptr::null_mut());
        assert_eq!(s, IplStatus::InvalidArgument);
        assert!(last_error().contains("dim 8"));
    }
}

#[test]
fn wer_and_werr() {
    let refs = [cstr("a b c d"), cstr("x y")];
    let hyps = [cstr("a c d e"), cstr("x y")];
    let rp: Vec<*const c_char> = refs.iter().map(|s| s.as_ptr()).collect();
    let hp: Vec<*const c_char> = hyps.iter().map(|s| s.as_ptr()).collect();
    let mut wer = 0.0;
    unsafe {
        assert_eq!(ipl_corpus_wer(rp.as_ptr(), hp.as_ptr(), 2, &mut wer), IplStatus::Ok);
        // One deletion and one insertion over six reference words.
        assert!((wer - 2.0 / 6.0).abs() < 1e-12);
        let mut r = 0.0;
        assert_eq!(ipl_werr(0.2, 0.1306, &mut r), IplStatus::Ok);
        assert!((r - 34.7).abs() < 0.05);
        assert_eq!(ipl_werr(0.0, 0.1, &mut r), IplStatus::Metric);
        assert_eq!(ipl_werr(0.2, 0.1, ptr::null_mut()), IplStatus::NullArgument);
    }
}

#[test]
fn loss_matches_core() {
    let (frames, u, v) = (3, 2, 3);
    let logits: Vec<f64> = (0..frames * (u + 1) * (v + 1)).map(|i| ((i * 5 % 11) as f64) / 4.0 - 1.0).collect();
    let labels = [1u32, 3];
    let lattice = LogitLattice::new(frames, u, v, logits.clone()).unwrap();
    let (nll, grad) = transducer_loss(&lattice, &labels).unwrap();
    let mut got = 0.0;
    let mut got_grad = vec![0.0; logits.len()];
    unsafe {
        let s = ipl_transducer_loss(logits.as_ptr(), frames, u, v, labels.as_ptr(), &mut got, got_grad.as_mut_ptr());
        assert_eq!(s, IplStatus::Ok);
        assert_eq!(got, nll);
        assert_eq!(got_grad, grad);
        let mut without_grad = 0.0;
        let s = ipl_transducer_loss(logits.as_ptr(), frames, u, v, labels.as_ptr(), &mut without_grad, ptr::null_mut());
        assert_eq!(s, IplStatus::Ok);
        assert_eq!(without_grad, nll);
        let s = ipl_transducer_loss(logits.as_ptr(), 0, u, v, labels.as_ptr(), &mut got, ptr::null_mut());
        assert_eq!(s, IplStatus::Loss);
        assert!(last_error().contains("zero frames"));
    }
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/iplforge.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "ipl_model_load",
        "ipl_model_free",
        "ipl_vocab_load",
        "ipl_vocab_encode",
        "ipl_transcribe",
        "ipl_corpus_wer",
        "ipl_werr",
        "ipl_transducer_loss",
        "ipl_last_error",
        "ipl_string_free",
        "IPL_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", "-std=c99", "-Wall", "-Werror"])
        .arg(&header)
        .output()
    else {
        eprintln!("cc not found; skipping compile check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

//! C ABI over the iplforge core: opaque model and vocabulary handles,
//! decoding, tokenization, WER/WERR and the Transducer loss.
//!
//! Every function returns an [`IplStatus`]. On failure the message is
//! available from [`ipl_last_error`] on the same thread. Strings returned
//! through out-pointers are owned by the caller and freed with
//! [`ipl_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use iplforge::decoder::transcribe;
use iplforge::metrics::{corpus_wer, werr};
use iplforge::synthcorpus::FeatureMatrix;
use iplforge::tokenizer::Vocab;
use iplforge::transducer::{read_checkpoint, transducer_loss, LogitLattice, Model};
use iplforge::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IplStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    BufferTooSmall = 4,
    Io = 5,
    Checkpoint = 6,
    Vocab = 7,
    Decode = 8,
    Metric = 9,
    Loss = 10,
    Panic = 11,
}

/// Opaque trained model.
pub struct IplModel(Model);

/// Opaque tokenizer vocabulary.
pub struct IplVocab(Vocab);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(IplStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } | Error::Dataset { .. } => IplStatus::Io,
            Error::Checkpoint(_) | Error::Model(_) => IplStatus::Checkpoint,
            Error::Vocab(_) | Error::Training(_) => IplStatus::Vocab,
            Error::Decode(_) => IplStatus::Decode,
            Error::Metric(_) => IplStatus::Metric,
            Error::Loss(_) => IplStatus::Loss,
            _ => IplStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: IplStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IplStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            IplStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            IplStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(IplStatus::NullArgument, format!("{name} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(IplStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().map_or_else(|| fail(IplStatus::NullArgument, format!("{name} is null")), Ok)
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    match (p.is_null(), len) {
        (_, 0) => Ok(&[]),
        (true, _) => fail(IplStatus::NullArgument, format!("{name} is null")),
        (false, n) => Ok(std::slice::from_raw_parts(p, n)),
    }
}

unsafe fn write_out<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return fail(IplStatus::NullArgument, format!("{name} is null"));
    }
    out.write(value);
    Ok(())
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ipl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ipl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipl_model_load(path: *const c_char, out: *mut *mut IplModel) -> IplStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let model = read_checkpoint(&path)?;
        write_out(out, Box::into_raw(Box::new(IplModel(model))), "out")
    })
}

/// # Safety
/// `model` must come from `ipl_model_load` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ipl_model_free(model: *mut IplModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of labels (excluding blank) the model predicts.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ipl_model_vocab_size(model: *const IplModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.arch().vocab_size)
}

/// Feature dimension the model expects.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ipl_model_feature_dim(model: *const IplModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.arch().feature_dim)
}

/// Loads a vocabulary file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipl_vocab_load(path: *const c_char, out: *mut *mut IplVocab) -> IplStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let vocab = Vocab::read(&path)?;
        write_out(out, Box::into_raw(Box::new(IplVocab(vocab))), "out")
    })
}

/// # Safety
/// `vocab` must come from `ipl_vocab_load` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ipl_vocab_free(vocab: *mut IplVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Labels excluding blank, i.e. the model vocab size this vocabulary needs.
///
/// # Safety
/// `vocab` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ipl_vocab_label_count(vocab: *const IplVocab) -> usize {
    vocab.as_ref().map_or(0, |v| v.0.label_count())
}

/// Encodes `text` into token ids. `*out_len` always receives the required
/// length; if it exceeds `capacity`, nothing is written to `out_ids` and
/// `BufferTooSmall` is returned.
///
/// # Safety
/// `out_ids` must have room for `capacity` ids (may be null if 0).
#[no_mangle]
pub unsafe extern "C" fn ipl_vocab_encode(
    vocab: *const IplVocab,
    text: *const c_char,
    out_ids: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> IplStatus {
    guard(|| {
        let vocab = ref_arg(vocab, "vocab")?;
        let ids = vocab.0.encode(str_arg(text, "text")?);
        write_out(out_len, ids.len(), "out_len")?;
        if ids.len() > capacity {
            return fail(
                IplStatus::BufferTooSmall,
                format!("need {} ids, capacity is {capacity}", ids.len()),
            );
        }
        if !ids.is_empty() {
            if out_ids.is_null() {
                return fail(IplStatus::NullArgument, "out_ids is null");
            }
            ptr::copy_nonoverlapping(ids.as_ptr(), out_ids, ids.len());
        }
        Ok(())
    })
}

/// Decodes token ids to text.
///
/// # Safety
/// `ids` must point to `len` ids; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipl_vocab_decode(
    vocab: *const IplVocab,
    ids: *const u32,
    len: usize,
    out: *mut *mut c_char,
) -> IplStatus {
    guard(|| {
        let vocab = ref_arg(vocab, "vocab")?;
        let text = vocab.0.decode(slice_arg(ids, len, "ids")?)?;
        write_out(out, to_c_string(text), "out")
    })
}

/// Greedy-decodes a row-major `frames × dim` feature matrix.
///
/// # Safety
/// `features` must point to `frames * dim` floats; out-pointers must be
/// writable (`out_certainty` may be null).
#[no_mangle]
pub unsafe extern "C" fn ipl_transcribe(
    model: *const IplModel,
    vocab: *const IplVocab,
    features: *const f32,
    frames: usize,
    dim: usize,
    out_text: *mut *mut c_char,
    out_certainty: *mut f64,
) -> IplStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let vocab = ref_arg(vocab, "vocab")?;
        let n = frames
            .checked_mul(dim)
            .map_or_else(|| fail(IplStatus::InvalidArgument, "frames * dim overflows"), Ok)?;
        let data = slice_arg(features, n, "features")?.to_vec();
        let feats = FeatureMatrix::new(frames, dim, data)?;
        if dim != model.0.arch().feature_dim {
            return fail(
                IplStatus::InvalidArgument,
                format!("features have dim {dim}, model expects {}", model.0.arch().feature_dim),
            );
        }
        let (text, certainty) = transcribe(&model.0, &vocab.0, &feats)?;
        if !out_certainty.is_null() {
            out_certainty.write(certainty);
        }
        write_out(out_text, to_c_string(text), "out_text")
    })
}

/// Corpus WER over `n` reference/hypothesis pairs.
///
/// # Safety
/// `refs` and `hyps` must each point to `n` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ipl_corpus_wer(
    refs: *const *const c_char,
    hyps: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> IplStatus {
    guard(|| {
        let refs = slice_arg(refs, n, "refs")?;
        let hyps = slice_arg(hyps, n, "hyps")?;
        let pairs = refs
            .iter()
            .zip(hyps)
            .map(|(&r, &h)| Ok((str_arg(r, "reference")?, str_arg(h, "hypothesis")?)))
            .collect::<Result<Vec<_>, Failure>>()?;
        write_out(out, corpus_wer(&pairs)?, "out")
    })
}

/// Relative WER reduction in percent.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ipl_werr(wer_reference: f64, wer_model: f64, out: *mut f64) -> IplStatus {
    guard(|| write_out(out, werr(wer_reference, wer_model)?, "out"))
}

/// Transducer negative log-likelihood of `labels` under a logit lattice of
/// shape `frames × (label_len + 1) × (vocab_size + 1)`, row-major, class 0
/// being blank. If `out_grad` is non-null it receives the gradient with
/// respect to the logits, same shape.
///
/// # Safety
/// Pointers must be valid for the sizes implied above.
#[no_mangle]
pub unsafe extern "C" fn ipl_transducer_loss(
    logits: *const f64,
    frames: usize,
    label_len: usize,
    vocab_size: usize,
    labels: *const u32,
    out_nll: *mut f64,
    out_grad: *mut f64,
) -> IplStatus {
    guard(|| {
        let n = frames
            .checked_mul(label_len + 1)
            .and_then(|x| x.checked_mul(vocab_size + 1))
            .map_or_else(|| fail(IplStatus::InvalidArgument, "lattice size overflows"), Ok)?;
        let lattice = LogitLattice::new(frames, label_len, vocab_size, slice_arg(logits, n, "logits")?.to_vec())?;
        let (nll, grad) = transducer_loss(&lattice, slice_arg(labels, label_len, "labels")?)?;
        write_out(out_nll, nll, "out_nll")?;
        if !out_grad.is_null() {
            ptr::copy_nonoverlapping(grad.as_ptr(), out_grad, grad.len());
        }
        Ok(())
    })
}

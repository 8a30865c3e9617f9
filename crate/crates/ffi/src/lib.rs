//! C ABI over `rsnmt`.
//!
//! Every fallible function returns an [`RsnmtStatus`]; on failure the message
//! is available from [`rsnmt_last_error`] on the same thread. Strings handed
//! out by the library are released with [`rsnmt_string_free`], models with
//! [`rsnmt_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use rsnmt::analysis;
use rsnmt::data::Vocabulary;
use rsnmt::decoding::{self, DecodeConfig};
use rsnmt::model::{self, ModelConfig, ModelWeights, StackingMode};
use rsnmt::training::Checkpoint;
use rsnmt::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RsnmtStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    InvalidConfig = 4,
    InvalidArgument = 5,
    Runtime = 6,
    Panic = 7,
}

/// Opaque handle to a loaded model and its vocabularies.
pub struct RsnmtModel {
    weights: ModelWeights<f32>,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(RsnmtStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => RsnmtStatus::Io,
            Error::Config(_) => RsnmtStatus::InvalidConfig,
            Error::InvalidArgument(_) | Error::SentenceTooLong { .. } | Error::EmptyCorpus => {
                RsnmtStatus::InvalidArgument
            }
            _ => RsnmtStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RsnmtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RsnmtStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RsnmtStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(RsnmtStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(RsnmtStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn str_array(p: *const *const c_char, n: usize, what: &str) -> Result<Vec<String>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(null(what));
    }
    std::slice::from_raw_parts(p, n)
        .iter()
        .map(|&s| str_arg(s, what).map(str::to_owned))
        .collect()
}

fn load(path: &Path) -> Result<RsnmtModel, Failure> {
    let file = if path.is_dir() {
        path.join("model.rsnmt")
    } else {
        path.to_path_buf()
    };
    let weights = Checkpoint::load(&file)?.to_weights::<f32>()?;
    let dir = file
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let vocab_dir = [
        dir.clone(),
        dir.parent().map(Path::to_path_buf).unwrap_or(dir),
    ]
    .into_iter()
    .find(|d| d.join("vocab.src").is_file())
    .ok_or_else(|| {
        Failure(
            RsnmtStatus::Io,
            format!("no vocab.src next to {}", file.display()),
        )
    })?;
    let src_vocab = Vocabulary::load(&vocab_dir.join("vocab.src"))?;
    let tgt_vocab = Vocabulary::load(&vocab_dir.join("vocab.tgt"))?;
    if src_vocab.len() != weights.config.src_vocab_size
        || tgt_vocab.len() != weights.config.tgt_vocab_size
    {
        return Err(Failure(
            RsnmtStatus::InvalidConfig,
            "vocabulary sizes do not match the model".into(),
        ));
    }
    Ok(RsnmtModel {
        weights,
        src_vocab,
        tgt_vocab,
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rsnmt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn rsnmt_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a run directory (containing `model.rsnmt`) or a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rsnmt_model_load(
    path: *const c_char,
    out: *mut *mut RsnmtModel,
) -> RsnmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        *out = Box::into_raw(Box::new(load(Path::new(path))?));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`rsnmt_model_load`] and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn rsnmt_model_free(model: *mut RsnmtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable parameters of a loaded model.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rsnmt_model_parameter_count(
    model: *const RsnmtModel,
    out: *mut usize,
) -> RsnmtStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = model.weights.parameter_count();
        Ok(())
    })
}

/// Translates one tokenized sentence. `beam_size` 1 with `alpha` 0 is greedy.
/// `dec_recurrences` 0 keeps the trained depth. The result must be released
/// with [`rsnmt_string_free`].
///
/// # Safety
/// `model` must be a live handle, `source` NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rsnmt_translate(
    model: *const RsnmtModel,
    source: *const c_char,
    beam_size: usize,
    alpha: f64,
    dec_recurrences: usize,
    out: *mut *mut c_char,
) -> RsnmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let source = str_arg(source, "source")?;
        let cfg = DecodeConfig {
            beam_size,
            alpha,
            dec_recurrences: (dec_recurrences > 0).then_some(dec_recurrences),
            ..DecodeConfig::default()
        };
        let result =
            decoding::translate(&model.weights, &model.src_vocab, &[source.to_owned()], &cfg)?;
        let text = decoding::render(&model.tgt_vocab, &result.translations).remove(0);
        *out = CString::new(text)
            .map_err(|e| Failure(RsnmtStatus::Runtime, e.to_string()))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn rsnmt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Corpus BLEU (0 to 100, order 4, case-sensitive) of `n` hypothesis lines
/// against `n` reference lines.
///
/// # Safety
/// `hyps` and `refs` must each point to `n` NUL-terminated strings; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rsnmt_bleu(
    hyps: *const *const c_char,
    refs: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> RsnmtStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let hyps = str_array(hyps, n, "hyps")?;
        let refs = str_array(refs, n, "refs")?;
        *out = analysis::bleu(&hyps, &refs, 4, false)?.bleu;
        Ok(())
    })
}

/// Shannon entropy in nats of one attention row.
///
/// # Safety
/// `row` must point to `len` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rsnmt_attention_entropy(
    row: *const f64,
    len: usize,
    out: *mut f64,
) -> RsnmtStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if row.is_null() && len > 0 {
            return Err(null("row"));
        }
        let row = if len == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(row, len)
        };
        *out = analysis::attention_entropy(row)?;
        Ok(())
    })
}

/// Shape of a model for [`rsnmt_count_parameters`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct RsnmtModelShape {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    /// Layers per side when `recurrent` is false, recurrences otherwise.
    pub depth: usize,
    pub recurrent: bool,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub share_src_tgt_embedding: bool,
    pub tie_output_projection: bool,
}

/// Trainable parameter count of a configuration, without building it.
///
/// # Safety
/// `shape` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rsnmt_count_parameters(
    shape: *const RsnmtModelShape,
    out: *mut usize,
) -> RsnmtStatus {
    guard(|| {
        let s = shape.as_ref().ok_or_else(|| null("shape"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let stacking = if s.recurrent {
            StackingMode::recurrent(s.depth)
        } else {
            StackingMode::vanilla(s.depth)
        };
        let cfg = ModelConfig {
            d_model: s.d_model,
            d_ff: s.d_ff,
            n_heads: s.n_heads,
            stacking,
            src_vocab_size: s.src_vocab_size,
            tgt_vocab_size: s.tgt_vocab_size,
            share_src_tgt_embedding: s.share_src_tgt_embedding,
            tie_output_projection: s.tie_output_projection,
            dropout: 0.0,
            max_positions: 256,
        };
        cfg.validate()?;
        *out = model::count_parameters(&cfg);
        Ok(())
    })
}

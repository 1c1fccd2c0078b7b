//! C ABI over the tokenizer and model: opaque handles, status codes and a
//! thread-local last-error message. The header is generated into
//! `include/ufa.h` at build time.
//!
//! Output buffers follow one convention: the required length is always
//! written to `*len_out`, and `UFA_STATUS_BUFFER_TOO_SMALL` is returned when
//! `cap` is below it.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ufa::decode_eval::{decode, DecodeConfig, Strategy};
use ufa::model::ModelParameters;
use ufa::tokenizer::TokenizerModel;
use ufa::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UfaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Decode = 6,
    Length = 7,
    BufferTooSmall = 8,
    Internal = 9,
}

/// Opaque tokenizer handle.
pub struct UfaTokenizer(TokenizerModel);

/// Opaque model handle.
pub struct UfaModel(ModelParameters<f32>);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: UfaStatus, message: impl Into<String>) -> UfaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
    status
}

fn from_error(e: Error) -> UfaStatus {
    let status = match &e {
        Error::Io { .. } => UfaStatus::Io,
        Error::Format(_) | Error::Parse { .. } | Error::Checkpoint { .. } => UfaStatus::Format,
        Error::Config { .. } => UfaStatus::Config,
        Error::Decode { .. } => UfaStatus::Decode,
        Error::Length { .. } => UfaStatus::Length,
        _ => UfaStatus::Internal,
    };
    fail(status, e.to_string())
}

fn guarded(f: impl FnOnce() -> UfaStatus) -> UfaStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(UfaStatus::Internal, "panic inside the library"))
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, UfaStatus> {
    if path.is_null() {
        return Err(fail(UfaStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map_err(|_| fail(UfaStatus::InvalidUtf8, "argument is not valid UTF-8"))
}

unsafe fn write_out<T: Copy>(data: &[T], out: *mut T, cap: usize, len_out: *mut usize) -> UfaStatus {
    if len_out.is_null() {
        return fail(UfaStatus::NullPointer, "len_out is null");
    }
    *len_out = data.len();
    if data.len() > cap {
        return fail(UfaStatus::BufferTooSmall, format!("need {} elements, have {cap}", data.len()));
    }
    if !data.is_empty() {
        if out.is_null() {
            return fail(UfaStatus::NullPointer, "output buffer is null");
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    }
    UfaStatus::Ok
}

/// Copies the calling thread's last error message, NUL-terminated, into
/// `buf`. `*len_out` receives the message length without the terminator.
///
/// # Safety
/// `buf` must be valid for `cap` bytes; `len_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ufa_last_error(buf: *mut c_char, cap: usize, len_out: *mut usize) -> UfaStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    if len_out.is_null() {
        return UfaStatus::NullPointer;
    }
    *len_out = msg.len();
    if msg.len() + 1 > cap {
        return UfaStatus::BufferTooSmall;
    }
    if buf.is_null() {
        return UfaStatus::NullPointer;
    }
    ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, msg.len());
    *buf.add(msg.len()) = 0;
    UfaStatus::Ok
}

/// Loads a tokenizer file written by `train-tokenizer`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ufa_tokenizer_load(path: *const c_char, out: *mut *mut UfaTokenizer) -> UfaStatus {
    guarded(|| {
        if out.is_null() {
            return fail(UfaStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match TokenizerModel::load(path) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(UfaTokenizer(t)));
                UfaStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `tok` must come from `ufa_tokenizer_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ufa_tokenizer_free(tok: *mut UfaTokenizer) {
    if !tok.is_null() {
        drop(Box::from_raw(tok));
    }
}

/// Vocabulary size, or 0 for a null handle.
///
/// # Safety
/// `tok` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ufa_tokenizer_vocab_size(tok: *const UfaTokenizer) -> usize {
    tok.as_ref().map_or(0, |t| t.0.vocab_size())
}

/// Encodes NUL-terminated UTF-8 `text` into token ids.
///
/// # Safety
/// `tok` must be live; `text` NUL-terminated; `ids_out` valid for `cap`
/// ids; `len_out` writable.
#[no_mangle]
pub unsafe extern "C" fn ufa_tokenizer_encode(
    tok: *const UfaTokenizer,
    text: *const c_char,
    ids_out: *mut u32,
    cap: usize,
    len_out: *mut usize,
) -> UfaStatus {
    guarded(|| {
        let Some(tok) = tok.as_ref() else {
            return fail(UfaStatus::NullPointer, "tokenizer is null");
        };
        let text = match path_arg(text) {
            Ok(t) => t,
            Err(s) => return s,
        };
        write_out(&tok.0.encode(text), ids_out, cap, len_out)
    })
}

/// Decodes `n` ids into NUL-terminated UTF-8 text. `*len_out` excludes the
/// terminator, which also needs room in `buf`.
///
/// # Safety
/// `tok` must be live; `ids` valid for `n` ids; `buf` valid for `cap`
/// bytes; `len_out` writable.
#[no_mangle]
pub unsafe extern "C" fn ufa_tokenizer_decode(
    tok: *const UfaTokenizer,
    ids: *const u32,
    n: usize,
    buf: *mut c_char,
    cap: usize,
    len_out: *mut usize,
) -> UfaStatus {
    guarded(|| {
        let Some(tok) = tok.as_ref() else {
            return fail(UfaStatus::NullPointer, "tokenizer is null");
        };
        if ids.is_null() && n > 0 {
            return fail(UfaStatus::NullPointer, "ids is null");
        }
        let ids = if n == 0 { &[][..] } else { std::slice::from_raw_parts(ids, n) };
        let text = match tok.0.decode(ids) {
            Ok(t) => t,
            Err(e) => return from_error(e),
        };
        let mut bytes: Vec<c_char> = text.bytes().map(|b| b as c_char).collect();
        bytes.push(0);
        let status = write_out(&bytes, buf, cap, len_out);
        if !len_out.is_null() {
            *len_out = text.len();
        }
        status
    })
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ufa_model_load(path: *const c_char, out: *mut *mut UfaModel) -> UfaStatus {
    guarded(|| {
        if out.is_null() {
            return fail(UfaStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match ModelParameters::load(path) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(UfaModel(m)));
                UfaStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `model` must come from `ufa_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ufa_model_free(model: *mut UfaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ufa_model_param_count(model: *const UfaModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.param_count())
}

/// Decodes a response for `n` input ids. `beam_width` 1 is greedy
/// search. The output excludes the end-of-sequence id.
///
/// # Safety
/// `model` must be live; `input_ids` valid for `n` ids; `out_ids` valid
/// for `cap` ids; `len_out` writable.
#[no_mangle]
pub unsafe extern "C" fn ufa_model_generate(
    model: *const UfaModel,
    input_ids: *const u32,
    n: usize,
    max_length: usize,
    beam_width: usize,
    out_ids: *mut u32,
    cap: usize,
    len_out: *mut usize,
) -> UfaStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return fail(UfaStatus::NullPointer, "model is null");
        };
        if input_ids.is_null() {
            return fail(UfaStatus::NullPointer, "input_ids is null");
        }
        let input = std::slice::from_raw_parts(input_ids, n);
        let vocab = model.0.config().vocab_size;
        if let Some((position, &id)) = input.iter().enumerate().find(|(_, &id)| id as usize >= vocab) {
            return from_error(Error::Decode { position, id });
        }
        let config = DecodeConfig {
            strategy: if beam_width <= 1 { Strategy::Greedy } else { Strategy::Beam },
            beam_width: beam_width.max(1),
            max_target_length: max_length,
            ..DecodeConfig::default()
        };
        match decode(&model.0, input, &config) {
            Ok(ids) => write_out(&ids, out_ids, cap, len_out),
            Err(e) => from_error(e),
        }
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ufa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

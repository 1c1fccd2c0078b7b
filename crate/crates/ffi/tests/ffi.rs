use std::ffi::{c_char, CStr, CString};
use std::ptr;

use ufa::decode_eval::{decode, DecodeConfig};
use ufa::model::{ModelConfig, ModelParameters};
use ufa::tokenizer::{train, TrainOptions};
use ufa_ffi::*;

fn tokenizer_file(dir: &std::path::Path) -> CString {
    let texts = ["where is my order please", "i want to cancel my booking", "your refund is on the way"];
    let tok = train(texts, &TrainOptions::new(220)).unwrap();
    let path = dir.join("tok.txt");
    tok.save(&path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let mut len = 0usize;
    unsafe {
        assert_eq!(ufa_last_error(buf.as_mut_ptr(), buf.len(), &mut len), UfaStatus::Ok);
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn tokenizer_round_trip_through_the_c_abi() {
    let dir = tempfile::tempdir().unwrap();
    let path = tokenizer_file(dir.path());
    unsafe {
        let mut tok = ptr::null_mut();
        assert_eq!(ufa_tokenizer_load(path.as_ptr(), &mut tok), UfaStatus::Ok);
        assert!(ufa_tokenizer_vocab_size(tok) > 100);

        let text = CString::new("where is my refund").unwrap();
        let mut len = 0usize;
        assert_eq!(
            ufa_tokenizer_encode(tok, text.as_ptr(), ptr::null_mut(), 0, &mut len),
            UfaStatus::BufferTooSmall
        );
        let mut ids = vec![0u32; len];
        assert_eq!(ufa_tokenizer_encode(tok, text.as_ptr(), ids.as_mut_ptr(), ids.len(), &mut len), UfaStatus::Ok);

        let mut buf = vec![0 as c_char; 64];
        let mut text_len = 0usize;
        assert_eq!(
            ufa_tokenizer_decode(tok, ids.as_ptr(), ids.len(), buf.as_mut_ptr(), buf.len(), &mut text_len),
            UfaStatus::Ok
        );
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), "where is my refund");
        assert_eq!(text_len, "where is my refund".len());

        let bad = [u32::MAX];
        assert_eq!(
            ufa_tokenizer_decode(tok, bad.as_ptr(), 1, buf.as_mut_ptr(), buf.len(), &mut text_len),
            UfaStatus::Decode
        );
        assert!(last_error().contains("outside the vocabulary"));
        ufa_tokenizer_free(tok);
    }
}

#[test]
fn null_and_missing_inputs_map_to_status_codes() {
    unsafe {
        let mut tok = ptr::null_mut();
        assert_eq!(ufa_tokenizer_load(ptr::null(), &mut tok), UfaStatus::NullPointer);
        let missing = CString::new("/nonexistent/tok.txt").unwrap();
        assert_eq!(ufa_tokenizer_load(missing.as_ptr(), &mut tok), UfaStatus::Io);
        assert!(tok.is_null());
        let mut model = ptr::null_mut();
        assert_eq!(ufa_model_load(missing.as_ptr(), &mut model), UfaStatus::Io);
        assert_eq!(ufa_tokenizer_vocab_size(ptr::null()), 0);
        assert_eq!(ufa_model_param_count(ptr::null()), 0);
        ufa_tokenizer_free(ptr::null_mut());
        ufa_model_free(ptr::null_mut());
        let mut len = 0usize;
        assert_eq!(
            ufa_tokenizer_encode(ptr::null(), missing.as_ptr(), ptr::null_mut(), 0, &mut len),
            UfaStatus::NullPointer
        );
    }
}

#[test]
fn model_generation_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let config = ModelConfig {
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: 40,
        relpos_buckets: 8,
        relpos_max_distance: 16,
        dropout_rate: 0.0,
        max_source_len: 32,
        max_target_len: 10,
        ..ModelConfig::default()
    };
    let params = ModelParameters::<f32>::init(&config, 3).unwrap();
    let path = dir.path().join("m.ckpt");
    params.save(&path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let input = [5u32, 9, 12, 1];
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(ufa_model_load(cpath.as_ptr(), &mut model), UfaStatus::Ok);
        assert_eq!(ufa_model_param_count(model), params.param_count());
        for beam in [1usize, 3] {
            let mut out = vec![0u32; 16];
            let mut len = 0usize;
            assert_eq!(
                ufa_model_generate(model, input.as_ptr(), input.len(), 6, beam, out.as_mut_ptr(), out.len(), &mut len),
                UfaStatus::Ok
            );
            let expected = decode(
                &params,
                &input,
                &DecodeConfig {
                    strategy: if beam == 1 { ufa::decode_eval::Strategy::Greedy } else { ufa::decode_eval::Strategy::Beam },
                    beam_width: beam,
                    max_target_length: 6,
                    ..DecodeConfig::default()
                },
            )
            .unwrap();
            assert_eq!(&out[..len], expected.as_slice());
        }
        let bad = [100u32];
        let mut len = 0usize;
        assert_eq!(
            ufa_model_generate(model, bad.as_ptr(), 1, 4, 1, ptr::null_mut(), 0, &mut len),
            UfaStatus::Decode
        );
        ufa_model_free(model);

        let junk = dir.path().join("junk.ckpt");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        let cjunk = CString::new(junk.to_str().unwrap()).unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(ufa_model_load(cjunk.as_ptr(), &mut model), UfaStatus::Format);
    }
}

#[test]
fn generated_header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/ufa.h")).unwrap();
    for name in [
        "ufa_tokenizer_load",
        "ufa_tokenizer_encode",
        "ufa_tokenizer_decode",
        "ufa_model_load",
        "ufa_model_generate",
        "ufa_last_error",
        "UFA_STATUS_BUFFER_TOO_SMALL",
        "typedef struct UfaModel UfaModel",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    let v = unsafe { CStr::from_ptr(ufa_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

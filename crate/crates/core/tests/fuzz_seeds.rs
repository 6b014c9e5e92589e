//! The checked-in fuzz seeds must stay valid inputs, and every truncation of
//! them must be rejected cleanly rather than panic.

use std::path::PathBuf;

use kdslu_core::acoustic_model::AcousticModel;
use kdslu_core::checkpoint::Checkpoint;
use kdslu_core::config::{ExperimentConfig, Preset};
use kdslu_core::data_harness::manifest::{frames_from_bytes, parse_manifest, render_manifest};
use kdslu_core::speech_encoder::SpeechEncoder;
use kdslu_core::text_pipeline::{CharVocab, TextTeacher};
use kdslu_core::tokenizer_vq::Codebook;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn prefixes(b: &[u8]) -> impl Iterator<Item = &[u8]> {
    (0..b.len()).map(move |n| &b[..n])
}

#[test]
fn checkpoint_seeds_load_as_their_model() {
    for (name, b) in seeds("checkpoint") {
        let ck = Checkpoint::from_bytes(&b).unwrap();
        let loaded = match name.as_str() {
            "am" => AcousticModel::from_checkpoint(&ck).is_ok(),
            "encoder" => SpeechEncoder::from_checkpoint(&ck).is_ok(),
            "teacher" => TextTeacher::from_checkpoint(&ck).is_ok(),
            other => panic!("unexpected seed {other}"),
        };
        assert!(loaded, "{name}");
        for p in prefixes(&b) {
            assert!(Checkpoint::from_bytes(p).is_err());
        }
    }
}

#[test]
fn codebook_seeds_round_trip() {
    for (_, b) in seeds("codebook") {
        let cb = Codebook::from_bytes(&b).unwrap();
        assert_eq!(cb.to_bytes(), b);
        for p in prefixes(&b) {
            assert!(Codebook::from_bytes(p).is_err());
        }
    }
}

#[test]
fn config_seeds_parse() {
    for (name, b) in seeds("config") {
        let text = std::str::from_utf8(&b).unwrap();
        ExperimentConfig::from_toml(text, Preset::Toy, &[]).unwrap_or_else(|e| panic!("{name}: {e}"));
        for n in 0..text.len() {
            if text.is_char_boundary(n) {
                let _ = ExperimentConfig::from_toml(&text[..n], Preset::Toy, &[]);
            }
        }
    }
}

#[test]
fn frame_seeds_decode() {
    for (_, b) in seeds("frames") {
        let (&dim, rest) = b.split_first().unwrap();
        let f = frames_from_bytes(rest, dim as usize).unwrap();
        assert_eq!(f.len() * f.dim() * 4, rest.len());
        for p in prefixes(rest).filter(|p| p.len() % (4 * dim as usize) != 0) {
            assert!(frames_from_bytes(p, dim as usize).is_err());
        }
    }
}

#[test]
fn manifest_seeds_render_back_to_themselves() {
    for (_, b) in seeds("manifest") {
        let text = std::str::from_utf8(&b).unwrap();
        let m = parse_manifest(text).unwrap();
        assert!(!m.rows.is_empty());
        assert_eq!(render_manifest(&m).unwrap(), text);
        for n in 0..text.len() {
            if text.is_char_boundary(n) {
                let _ = parse_manifest(&text[..n]);
            }
        }
    }
}

#[test]
fn vocab_seeds_round_trip() {
    for (_, b) in seeds("vocab") {
        let text = std::str::from_utf8(&b).unwrap();
        let v = CharVocab::parse(text).unwrap();
        assert_eq!(v.to_file_string(), text);
    }
}

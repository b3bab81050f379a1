use std::path::PathBuf;

use ccrk::corpus::{decode_binary, parse_csv, parse_jsonl, SyntheticConfig, TokenCorpus};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "{}", dir.display());
    out
}

#[test]
fn binary_seeds() {
    for (name, bytes) in seeds("decode_binary") {
        assert_eq!(decode_binary(&bytes).is_ok(), name == "small", "{name}");
    }
}

#[test]
fn text_seeds() {
    for (name, bytes) in seeds("parse_csv") {
        assert_eq!(parse_csv(bytes.as_slice()).is_ok(), name == "small", "{name}");
    }
    for (name, bytes) in seeds("parse_jsonl") {
        assert_eq!(parse_jsonl(bytes.as_slice()).is_ok(), name == "small", "{name}");
    }
}

#[test]
fn json_seeds() {
    for (name, bytes) in seeds("token_corpus") {
        assert_eq!(TokenCorpus::from_json_slice(&bytes).is_ok(), name == "small", "{name}");
    }
    for (name, bytes) in seeds("synthetic_config") {
        let cfg: SyntheticConfig = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(cfg.validate().is_ok(), name == "small", "{name}");
    }
}

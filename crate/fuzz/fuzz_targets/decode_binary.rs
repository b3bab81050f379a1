#![no_main]

use ccrk::corpus::{decode_binary, encode_binary};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(corpus) = decode_binary(data) {
        let again = encode_binary(&corpus).expect("decoded corpus re-encodes");
        decode_binary(&again).expect("re-encoded corpus decodes");
    }
});

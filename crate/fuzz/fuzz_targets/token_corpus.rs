#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = ccrk::corpus::TokenCorpus::from_json_slice(data);
});

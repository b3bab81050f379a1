#![no_main]

use ccrk::corpus::SyntheticConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<SyntheticConfig>(data) {
        let _ = cfg.validate();
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use phibe::experiments::{parse_set, ExperimentConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((key, _)) = parse_set(text) {
        assert!(!key.is_empty());
    }
    let mut cfg = ExperimentConfig::new("fig4");
    if cfg.set(text).is_ok() {
        let _ = cfg.resolve();
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use phibe::experiments::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_json(text) {
        cfg.resolve().expect("from_json only accepts resolvable configs");
    }
});

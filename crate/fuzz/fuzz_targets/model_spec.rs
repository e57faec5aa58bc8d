#![no_main]

use libfuzzer_sys::fuzz_target;
use phibe::io::{parse_basis_spec, parse_model_spec};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (kind, params) = text.split_once('\n').unwrap_or((text, ""));
    if let Ok(model) = parse_model_spec(kind, params) {
        model.validate().expect("parsed models are valid");
    }
    let _ = parse_basis_spec(text);
});

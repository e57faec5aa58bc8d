#![no_main]

use libfuzzer_sys::fuzz_target;
use phibe::io::{pairs_to_csv, parse_pairs_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(parsed) = parse_pairs_csv(text) {
        let n = parsed.len();
        let pairs = parsed.into_pairs(0.1, Some(&|s: &[f64]| s[0])).expect("parsed pairs are consistent");
        assert_eq!(pairs.len(), n);
        let again = parse_pairs_csv(&pairs_to_csv(&pairs)).expect("written pairs parse");
        assert_eq!(again.len(), n);
    }
});

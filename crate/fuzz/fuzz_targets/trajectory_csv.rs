#![no_main]

use libfuzzer_sys::fuzz_target;
use phibe::io::{parse_trajectories_csv, trajectories_to_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(parsed) = parse_trajectories_csv(text, 0.5) {
        let csv = trajectories_to_csv(&parsed.trajectories, parsed.rewards.as_deref()).expect("parsed data writes");
        let again = parse_trajectories_csv(&csv, 0.5).expect("written data parses");
        assert_eq!(again.trajectories.len(), parsed.trajectories.len());
    }
});

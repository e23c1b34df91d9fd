#![no_main]

use libfuzzer_sys::fuzz_target;

// Snapshot CSV ingestion: arbitrary text must either parse into a consistent
// snapshot set or fail with a Format error, never panic or over-allocate.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = koopsyn::dynamics::parse_snapshot_csv(text);
    }
});

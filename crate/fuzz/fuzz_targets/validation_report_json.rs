#![no_main]

use libfuzzer_sys::fuzz_target;

use koopsyn::synthesis::ValidationReport;

// Validation reports are re-read by the report command. Accepted documents
// must round trip through the writer without panicking.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(report) = ValidationReport::from_json(text) {
            let back = report.to_json();
            ValidationReport::from_json(&back).expect("accepted report must round trip");
        }
    }
});

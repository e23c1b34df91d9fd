#![no_main]

use libfuzzer_sys::fuzz_target;

use koopsyn::sdp::SdpProblem;

// The standalone SDP interface accepts problems as JSON. Decoding enforces
// block size and constraint count caps; accepted problems round trip.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(problem) = SdpProblem::from_json(text) {
            let back = problem.to_json();
            SdpProblem::from_json(&back).expect("accepted problem must round trip");
        }
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;

use koopsyn::edmd::GeneratorSet;

// Generator bundles cross the collect/synthesize boundary as JSON. The
// decoder enforces dimension caps and consistency; accepted bundles must
// round trip through the writer.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(set) = GeneratorSet::from_json(text) {
            let back = set.to_json();
            GeneratorSet::from_json(&back).expect("accepted bundle must round trip");
        }
    }
});

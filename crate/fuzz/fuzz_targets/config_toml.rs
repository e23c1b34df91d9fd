#![no_main]

use libfuzzer_sys::fuzz_target;

// Run configs come from user-edited TOML. Parsing, cross-field validation,
// and re-serialization must all be total on arbitrary input.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = koopsyn::config::RunConfig::from_toml(text) {
            let _ = cfg.validate();
            let _ = cfg.to_toml();
        }
    }
});

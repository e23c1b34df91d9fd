#![no_main]

use libfuzzer_sys::fuzz_target;

use koopsyn::synthesis::Controller;

// Controllers are loaded back from disk before simulation. Any JSON the
// validating decoder accepts must survive a serialize/parse round trip;
// everything else must be rejected without panicking.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ctrl) = Controller::from_json(text) {
            let back = ctrl.to_json();
            Controller::from_json(&back).expect("accepted controller must round trip");
        }
    }
});

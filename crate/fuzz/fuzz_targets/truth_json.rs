#![no_main]

use csscgg::sim::GroundTruth;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(t) = GroundTruth::from_json(s) {
        let again = GroundTruth::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(again, t);
        let _ = t.graph();
    }
});

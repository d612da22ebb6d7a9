#![no_main]

use csscgg_cli::FittedModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = FittedModel::from_json(s) {
        let again = FittedModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(again.d(), m.d());
        assert_eq!(again.p(), m.p());
        let _ = csscgg_cli::graph(&m, 0.03, csscgg::graph::Ranking::Upfront);
    }
});

#![no_main]

use csscgg::data::{read_csv, XColumns};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // first byte picks the covariate selection, the rest is the file
    let Some((&sel, body)) = data.split_first() else {
        return;
    };
    let cols = match sel % 3 {
        0 => XColumns::Count(0),
        1 => XColumns::Count(usize::from(sel >> 2)),
        _ => XColumns::Names(vec!["x1".into(), "x2".into()]),
    };
    if let Ok(ds) = read_csv(body, &cols) {
        assert_eq!(ds.x.nrows(), ds.y.nrows());
        assert_eq!(ds.column_names.len(), ds.d() + ds.p());
        assert!(ds.x.iter().chain(ds.y.iter()).all(|v| v.is_finite()));
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(ds) = metast::data::parse_conll(text, None) {
        for s in &ds.sentences {
            assert_eq!(s.tokens.len(), s.tags.len());
            assert!(s.tags.iter().all(|&t| t < ds.scheme.n_tags()));
        }
    }
});

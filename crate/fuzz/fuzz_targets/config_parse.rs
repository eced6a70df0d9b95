#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = metast::harness::parse_config_text(text) {
        // a successful parse implies a validated config
        cfg.validate().unwrap();
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use metast::model::TaggerParams;

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = TaggerParams::from_bytes(data) {
        // anything that loads must survive a bit-exact save/load cycle
        let again = TaggerParams::from_bytes(&params.to_bytes()).unwrap();
        assert_eq!(params.checksum(), again.checksum());
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(cfg) = h2rec_core::trainer::TrainConfig::from_json(s) {
            // Accepted configs re-serialize to something that parses equal.
            let json = cfg.to_json();
            let again = h2rec_core::trainer::TrainConfig::from_json(&json).unwrap();
            assert_eq!(cfg, again);
            assert_eq!(cfg.hash(), again.hash());
        }
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = h2rec_core::data::parse_interactions(data, 1) {
        // A parsed dataset re-serializes (with dense ids) and parses back to
        // the same per-user sequences.
        let mut buf = Vec::new();
        h2rec_core::data::write_interactions_tsv(&ds, &mut buf).unwrap();
        let again = h2rec_core::data::parse_interactions(&buf[..], 1).unwrap();
        assert_eq!(ds.sequences.len(), again.sequences.len());
        for (a, b) in ds.sequences.iter().zip(&again.sequences) {
            assert_eq!(a.items, b.items);
        }
    }
});

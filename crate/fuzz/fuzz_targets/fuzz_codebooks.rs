#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(q) = h2rec_core::quantizer::parse_quantizer(data) {
        let mut buf = Vec::new();
        h2rec_core::quantizer::write_quantizer(&q, &mut buf).unwrap();
        let again = h2rec_core::quantizer::parse_quantizer(&buf[..]).unwrap();
        assert_eq!(q.mechanism(), again.mechanism());
        let (a, b) = (q.codebooks(), again.codebooks());
        assert_eq!(a.levels, b.levels);
        assert_eq!(a.k, b.k);
        for (ta, tb) in a.tables.iter().zip(&b.tables) {
            assert_eq!(ta.data(), tb.data());
        }
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(a) = h2rec_core::semantics::parse_sids(data) {
        // Every accepted assignment round-trips identically.
        let mut buf = Vec::new();
        h2rec_core::semantics::write_sids(&a, &mut buf).unwrap();
        let b = h2rec_core::semantics::parse_sids(&buf[..]).unwrap();
        assert_eq!(a.levels, b.levels);
        assert_eq!(a.k_codes, b.k_codes);
        for i in 0..a.n_items() {
            assert_eq!(a.codes_of(i), b.codes_of(i));
        }
        assert_eq!(a.collision_rate, b.collision_rate);
    }
});

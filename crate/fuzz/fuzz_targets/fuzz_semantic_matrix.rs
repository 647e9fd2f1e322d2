#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = h2rec_core::semantics::parse_semantic_matrix(data, None) {
        assert!(m.data().iter().all(|v| v.is_finite()));
        assert_eq!(m.data().len(), m.n_items() * m.dim());
    }
});

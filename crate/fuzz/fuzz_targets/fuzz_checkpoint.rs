#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = h2rec_core::model::read_params(data) {
        let mut buf = Vec::new();
        h2rec_core::model::write_params(&params, &mut buf).unwrap();
        let again = h2rec_core::model::read_params(&buf[..]).unwrap();
        for ((na, ta), (nb, tb)) in params.named().iter().zip(again.named().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }
});

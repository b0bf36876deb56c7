#![no_main]

use libfuzzer_sys::fuzz_target;
use raimkit::checkpoint::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(tensors) = decode(data) {
        let bytes = encode(&tensors);
        assert_eq!(decode(&bytes).expect("decode re-encoded").len(), tensors.len());
    }
});

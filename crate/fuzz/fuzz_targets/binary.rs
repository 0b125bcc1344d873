#![no_main]

use libfuzzer_sys::fuzz_target;
use unrest::trajlog::{decode_binary, encode_binary};

fuzz_target!(|data: &[u8]| {
    if let Ok(trajs) = decode_binary(data) {
        assert_eq!(decode_binary(&encode_binary(&trajs)).unwrap(), trajs);
    }
});

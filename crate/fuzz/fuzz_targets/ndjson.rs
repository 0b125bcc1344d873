#![no_main]

use libfuzzer_sys::fuzz_target;
use unrest::trajlog::{decode_ndjson, encode_ndjson};

fuzz_target!(|text: &str| {
    if let Ok(trajs) = decode_ndjson(text) {
        let back = decode_ndjson(&encode_ndjson(&trajs)).expect("re-encoded dataset decodes");
        assert_eq!(back, trajs);
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use unrest::trajlog::decode_segmented;

fuzz_target!(|text: &str| {
    let _ = decode_segmented(text);
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use unrest::pipeline::{parse_seeds, render_seeds};

fuzz_target!(|text: &str| {
    if let Ok(seeds) = parse_seeds("seeds", text) {
        assert_eq!(parse_seeds("seeds", &render_seeds(&seeds)).unwrap(), seeds);
    }
});

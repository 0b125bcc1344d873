#![no_main]

use libfuzzer_sys::fuzz_target;
use unrest::env::parse_scenario;

fuzz_target!(|text: &str| {
    let _ = parse_scenario(text);
});

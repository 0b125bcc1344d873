#![no_main]

use libfuzzer_sys::fuzz_target;
use unrest::config::KvConfig;

fuzz_target!(|text: &str| {
    if let Ok(kv) = KvConfig::parse(text) {
        // Rendering must produce something that parses back to the same entries.
        let again = KvConfig::parse(&kv.render()).expect("rendered config parses");
        assert_eq!(again.render(), kv.render());
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use unrest::env::STATE_DIM;
use unrest::planner::KdUncertaintyIndex;

fuzz_target!(|text: &str| {
    if let Ok(index) = KdUncertaintyIndex::from_json(text) {
        let _ = index.query(&[0.0; STATE_DIM]);
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use unrest::planner::TargetReturnPredictor;

fuzz_target!(|text: &str| {
    let _ = TargetReturnPredictor::from_json(text);
});

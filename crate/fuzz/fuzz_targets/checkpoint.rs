#![no_main]

use libfuzzer_sys::fuzz_target;
use unrest::grad::Checkpoint;
use unrest::policy::PolicyNet;
use unrest::return_model::ReturnNet;

fuzz_target!(|text: &str| {
    let Ok(ckpt) = Checkpoint::from_json(text) else { return };
    let _ = ckpt.to_store();
    let _ = PolicyNet::from_checkpoint(&ckpt);
    let _ = ReturnNet::from_checkpoint(&ckpt);
});

#![no_main]

use libfuzzer_sys::fuzz_target;

use cf_effects::model::{EnsembleModel, ModelCheckpoint};
use cf_effects::nn::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = Checkpoint::from_json(text);
        if let Ok(ckpt) = ModelCheckpoint::from_json(text) {
            let _ = EnsembleModel::from_checkpoint(&ckpt);
        }
    }
});

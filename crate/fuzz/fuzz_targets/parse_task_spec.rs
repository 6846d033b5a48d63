#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = cf_effects::data::SyntheticTaskSpec::from_json(text) {
            // A spec that validates must be usable for the cheap queries.
            let _ = spec.max_prior_accuracy(cf_effects::data::Split::Test);
        }
    }
});

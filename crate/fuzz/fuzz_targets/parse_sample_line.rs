#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(line) = std::str::from_utf8(data) {
        if let Ok(sample) = cf_effects::data::parse_sample_line(line) {
            let again = serde_json::to_string(&sample).unwrap();
            assert_eq!(cf_effects::data::parse_sample_line(&again).unwrap(), sample);
        }
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = cfaug::config::ExperimentConfig::from_json(data);
});

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // must never panic or allocate absurdly; errors are fine
    let _ = cfaug::net::parse_checkpoint(data);
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use palmfield::sampler::FieldSample;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = FieldSample::from_bytes(data) {
        // anything that decodes must round-trip
        let again = FieldSample::from_bytes(&s.to_bytes()).expect("re-encoded sample decodes");
        assert_eq!(again.to_bytes(), s.to_bytes());
    }
});

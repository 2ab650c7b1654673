#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Anything that decodes must re-encode to the same bytes.
    if let Ok(v) = kvsurrogate::taskgen::SyntheticCorpus::from_bytes(data) {
        assert_eq!(v.to_bytes(), data);
    }
});

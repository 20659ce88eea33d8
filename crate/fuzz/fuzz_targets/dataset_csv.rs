#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = agro_core::io::parse_dataset_csv(data) {
        assert!(m.is_finite());
    }
});

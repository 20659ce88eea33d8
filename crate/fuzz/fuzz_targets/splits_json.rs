#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(f) = agro_core::io::parse_splits(s) {
            let _ = f.splits.validate(f.splits.total());
        }
    }
});

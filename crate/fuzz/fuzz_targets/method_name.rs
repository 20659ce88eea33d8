#![no_main]
use agro_core::harness::Method;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(m) = s.parse::<Method>() {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
    }
});

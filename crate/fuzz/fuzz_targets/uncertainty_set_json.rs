#![no_main]
use agro_core::uncertainty::{set_radius, UncertaintySet};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(UncertaintySet::Classical(set)) = agro_core::io::parse_uncertainty_set(s) {
            let _ = set_radius(&set, &set.mean);
        }
    }
});

#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(inst) = agro_core::io::parse_instance(s) {
            // Accepted instances must be usable.
            let x = vec![0.0; inst.n_facilities()];
            let xi = vec![1.0; inst.n_destinations()];
            if inst.n_facilities() * inst.n_destinations() <= 64 {
                let _ = agro_core::lp::recourse_value(&inst, &x, &xi);
            }
        }
    }
});

#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(model) = agro_core::io::parse_model(s) {
            // A parsed model has consistent shapes, so decoding must not panic.
            let z = vec![0.0; model.latent_dim()];
            let _ = model.decode(&z);
        }
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use qestlab::models::Model;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(Model::State(model)) = qestlab::config::parse_model_str(text) {
        let _ = model.state(&model.region().center());
    }
});

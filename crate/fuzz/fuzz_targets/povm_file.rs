#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(povm) = qestlab::config::parse_povm_str(text) {
        assert!(povm.completeness_defect() <= 1e-8);
    }
});

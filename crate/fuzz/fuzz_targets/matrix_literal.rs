#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = qestlab::config::parse_matrix_str(text) {
            assert_eq!(m.nrows(), m.ncols());
        }
    }
});

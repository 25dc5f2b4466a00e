#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = qestlab::config::parse_schedule_str(text) {
        if let Ok(tree) = cfg.schedule.tree() {
            assert!(tree.path_count() >= 1);
        }
    }
});

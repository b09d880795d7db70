#![no_main]

use libfuzzer_sys::fuzz_target;
use maxl::hierarchy::{HumanHierarchyMap, HUMAN_LEVELS};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(map) = HumanHierarchyMap::parse(text) {
        for level in HUMAN_LEVELS {
            for fine in 0..100 {
                if let Some(c) = map.class_at(level, fine) {
                    assert!(c < level);
                }
            }
        }
    }
});

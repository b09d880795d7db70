#![no_main]

use libfuzzer_sys::fuzz_target;
use maxl::data::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        let snapshot = cfg.to_text();
        let again = RunConfig::parse(&snapshot).expect("snapshot parses");
        assert_eq!(again.to_text(), snapshot);
        let _ = cfg.validate();
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use raimkit::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        if cfg.validate().is_ok() {
            let again = RunConfig::parse(&cfg.resolved()).expect("resolved config parses");
            assert_eq!(again.resolved(), cfg.resolved());
        }
    }
});

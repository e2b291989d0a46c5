#![no_main]

use libfuzzer_sys::fuzz_target;
use realgin::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::parse(text) {
            // whatever parses must survive its own serialisation
            let again = RunConfig::parse(&cfg.to_text()).expect("round trip");
            assert_eq!(again, cfg);
        }
    }
});

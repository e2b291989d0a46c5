#![no_main]

use libfuzzer_sys::fuzz_target;
use realgin::vocab::Vocabulary;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(v) = Vocabulary::parse(text) {
            assert_eq!(Vocabulary::parse(&v.to_text()).expect("round trip"), v);
        }
    }
});

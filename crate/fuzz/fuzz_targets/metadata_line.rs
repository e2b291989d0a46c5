#![no_main]

use libfuzzer_sys::fuzz_target;
use rgin_synth::SceneRecord;

fuzz_target!(|data: &[u8]| {
    if let Ok(line) = std::str::from_utf8(data) {
        let _ = SceneRecord::parse(line);
    }
});

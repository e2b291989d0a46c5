#![no_main]

use libfuzzer_sys::fuzz_target;
use realgin::vocab::{tokenize, Vocabulary};

fuzz_target!(|data: &[u8]| {
    if data.is_empty() {
        return;
    }
    let max = data[0] as usize % 24;
    if let Ok(text) = std::str::from_utf8(&data[1..]) {
        let vocab = Vocabulary::synthetic();
        if let Ok(seq) = tokenize(text, &vocab, max) {
            assert!(seq.ids.len() <= max);
        }
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use realgin::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        // the embedded config text may be non-canonical, so compare after one
        // save/load cycle
        let bytes = ck.to_bytes();
        let again = Checkpoint::from_bytes(&bytes).expect("reload");
        assert_eq!(again, ck);
        assert_eq!(again.to_bytes(), bytes);
    }
});

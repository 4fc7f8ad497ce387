#![no_main]

use libfuzzer_sys::fuzz_target;
use otdenoise::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::decode(data) {
        let once = c.encode().expect("decoded checkpoint re-encodes");
        let again = Checkpoint::decode(&once).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode().unwrap(), once);
    }
});

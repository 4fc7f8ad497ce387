#![no_main]

use libfuzzer_sys::fuzz_target;
use otdenoise::config::ConfigFile;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ConfigFile::from_json(text) {
        let back = ConfigFile::from_json(&cfg.to_json()).expect("emitted config parses");
        assert_eq!(back, cfg);
    }
});

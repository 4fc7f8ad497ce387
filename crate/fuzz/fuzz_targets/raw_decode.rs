#![no_main]

use libfuzzer_sys::fuzz_target;
use otdenoise::rawio::{decode_raw, encode_raw, Sidecar};

// Input: u16 sidecar length, sidecar JSON, raw payload.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let n = u16::from_le_bytes([data[0], data[1]]) as usize;
    let Some(side) = data.get(2..2 + n) else { return };
    let payload = &data[2 + n..];
    let Ok(side) = serde_json::from_slice::<Sidecar>(side) else { return };
    if let Ok(a) = decode_raw(payload, &side.shape) {
        assert_eq!(a.shape(), side.shape.as_slice());
        assert_eq!(encode_raw(&a), payload);
    }
});

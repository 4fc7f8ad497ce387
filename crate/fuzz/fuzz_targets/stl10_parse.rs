#![no_main]

use libfuzzer_sys::fuzz_target;
use otdenoise::data::{parse_stl10, STL10_RECORD, STL10_SIDE};

fuzz_target!(|data: &[u8]| {
    let Some((&c, rest)) = data.split_first() else { return };
    let crop = match c % 4 {
        0 => None,
        1 => Some(32),
        2 => Some(64),
        _ => Some(c as usize),
    };
    if let Ok(images) = parse_stl10(rest, crop) {
        assert_eq!(images.len(), rest.len() / STL10_RECORD);
        for im in &images {
            let side = crop.unwrap_or(STL10_SIDE);
            assert_eq!(im.shape(), &[3, side, side]);
            assert!(im.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
});

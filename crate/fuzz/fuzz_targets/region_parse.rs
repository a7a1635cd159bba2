#![no_main]

use libfuzzer_sys::fuzz_target;
use rnn2ds::tensor::Region;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(r) = text.parse::<Region>() {
            assert!(r.x1 >= 1 && r.y1 >= 1 && r.x1 <= r.x2 && r.y1 <= r.y2);
            let _ = r.validate(7, 7);
        }
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use rnn2ds::corpus::parse_features;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(records) = parse_features(text, None) {
            for r in records {
                assert_eq!(r.features.len(), r.features.shape().iter().product::<usize>());
            }
        }
    }
});

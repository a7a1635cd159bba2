#![no_main]

use libfuzzer_sys::fuzz_target;
use rnn2ds::checkpoint::{decode, decode_raw, encode_raw};

fuzz_target!(|data: &[u8]| {
    if let Ok(raw) = decode_raw(data) {
        let again = decode_raw(&encode_raw(&raw)).expect("re-encoded checkpoint decodes");
        assert_eq!(again.metadata, raw.metadata);
        assert_eq!(again.tensors.len(), raw.tensors.len());
    }
    let _ = decode(data);
});

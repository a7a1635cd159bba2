#![no_main]

use libfuzzer_sys::fuzz_target;
use rnn2ds::checkpoint::CheckpointMeta;
use rnn2ds::interpret::AssociationTable;
use rnn2ds::training::Vocabulary;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(v) = serde_json::from_str::<Vocabulary>(text) {
        for id in 0..v.len() {
            let tok = v.token(id).unwrap();
            assert_eq!(v.id(tok), Some(id));
        }
    }
    let _ = serde_json::from_str::<CheckpointMeta>(text);
    let _ = AssociationTable::from_json(text);
});

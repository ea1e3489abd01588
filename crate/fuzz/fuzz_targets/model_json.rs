#![no_main]

use libfuzzer_sys::fuzz_target;
use morphloss::morphable::MorphableModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(model) = MorphableModel::from_json(text) {
            let back = MorphableModel::from_json(&model.to_json()).expect("re-encoded model parses");
            assert_eq!(back.content_hash(), model.content_hash());
        }
    }
});

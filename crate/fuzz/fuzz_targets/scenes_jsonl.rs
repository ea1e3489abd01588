#![no_main]

use libfuzzer_sys::fuzz_target;
use morphloss::synthdata::Dataset;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ds) = Dataset::from_jsonl(text) {
            let again = Dataset::from_jsonl(&ds.to_jsonl()).expect("re-encoded dataset parses");
            assert_eq!(again.scenes.len(), ds.scenes.len());
        }
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use morphloss::training::checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok((header, params)) = checkpoint::decode(data) {
        assert_eq!(header.n_params, params.len());
    }
});

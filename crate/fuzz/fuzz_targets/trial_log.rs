#![no_main]

use libfuzzer_sys::fuzz_target;
use morphloss::hparam_search::parse_trial_log;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok((header, records)) = parse_trial_log(text) {
            assert_eq!(header.version, morphloss::hparam_search::TRIAL_LOG_VERSION);
            let _ = records.len();
        }
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use morphloss::harness::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = ExperimentConfig::from_toml(text) {
            for loss in &cfg.losses {
                cfg.train_config(*loss).expect("validated config resolves");
            }
        }
    }
});

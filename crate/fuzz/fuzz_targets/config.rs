#![no_main]

use libfuzzer_sys::fuzz_target;
use seqmc::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_toml_str(text) {
        let _ = cfg.validate();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back.hash(), cfg.hash());
    }
});

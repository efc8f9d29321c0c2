#![no_main]

use giga::sim::SimConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = SimConfig::from_toml(text) {
        let back = SimConfig::from_toml(&cfg.to_toml().expect("serializes"))
            .expect("round trip validates");
        assert_eq!(cfg, back);
    }
});

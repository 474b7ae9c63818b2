//! TOML run configs: no panics, and accepted configs round-trip.
#![no_main]

use hibcg::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = RunConfig::parse(text) else { return };
    let again = RunConfig::parse(&cfg.to_toml()).expect("serialized config parses");
    assert_eq!(cfg.to_toml(), again.to_toml());
});

//! Channel files: no panics in parsing, and water-filling any accepted
//! channel list with a small budget either errors cleanly or spends it.
#![no_main]

use hibcg::allocator::{parse_channels, water_fill, DEFAULT_TOL};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if data.len() > 4096 {
        return;
    }
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(channels) = parse_channels(text) else { return };
    if let Ok(r) = water_fill(&channels, 1.0, DEFAULT_TOL) {
        assert!(r.rates.iter().all(|(_, x)| x.is_finite() && *x >= 0.0));
    }
});

//! Partition files: no panics, and accepted partitions survive a
//! print/parse round trip.
#![no_main]

use hibcg::groups::{build_edge_blocks, GroupPartition};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(p) = GroupPartition::parse(text) else { return };
    let again = GroupPartition::parse(&p.to_string()).expect("printed partition parses");
    assert_eq!(p, again);
    if p.n() <= 64 {
        let blocks = build_edge_blocks(&p);
        assert_eq!(blocks.sizes().iter().sum::<usize>(), p.n() * p.n());
    }
});

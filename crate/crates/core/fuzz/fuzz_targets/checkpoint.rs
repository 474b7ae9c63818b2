//! Binary checkpoints: corrupt bytes are rejected without panicking or
//! huge allocations; accepted ones re-encode stably.
#![no_main]

use hibcg::checkpoint::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(params) = decode(data) else { return };
    let bytes = encode(&params);
    let again = decode(&bytes).expect("re-encoded checkpoint decodes");
    assert_eq!(encode(&again), bytes);
});

//! Replays the checked-in fuzz corpus through the same checks the fuzz
//! targets make, so seed regressions show up under plain `cargo test`.

use std::path::{Path, PathBuf};

use hibcg::allocator::{parse_channels, water_fill, DEFAULT_TOL};
use hibcg::checkpoint::{decode, encode};
use hibcg::config::RunConfig;
use hibcg::groups::GroupPartition;

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "empty corpus at {}", dir.display());
    out
}

#[test]
fn partition_seeds() {
    let mut accepted = 0;
    for (_, bytes) in corpus("partition") {
        if let Ok(p) = GroupPartition::parse(std::str::from_utf8(&bytes).unwrap()) {
            assert_eq!(GroupPartition::parse(&p.to_string()).unwrap(), p);
            accepted += 1;
        }
    }
    assert!(accepted >= 2);
}

#[test]
fn channel_seeds() {
    for (path, bytes) in corpus("channels") {
        let ch = parse_channels(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let r = water_fill(&ch, 1.0, DEFAULT_TOL).unwrap();
        assert!(r.rates.iter().all(|(_, x)| x.is_finite() && *x >= 0.0));
    }
}

#[test]
fn config_seeds() {
    for (_, bytes) in corpus("config") {
        let cfg = RunConfig::parse(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}

#[test]
fn checkpoint_seeds() {
    let mut accepted = 0;
    for (_, bytes) in corpus("checkpoint") {
        if let Ok(p) = decode(&bytes) {
            let again = encode(&p);
            assert_eq!(encode(&decode(&again).unwrap()), again);
            accepted += 1;
        }
    }
    assert_eq!(accepted, 2);
}

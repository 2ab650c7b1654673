//! Replays the checked-in fuzz seeds, plus byte-level mutations of them,
//! through every decoder on the stable toolchain.

use std::fs;
use std::path::Path;

use kvsurrogate::harness::RunConfig;
use kvsurrogate::model::ModelWeights;
use kvsurrogate::oracle::TargetCache;
use kvsurrogate::surrogate::SurrogateStack;
use kvsurrogate::taskgen::SyntheticCorpus;
use proptest::prelude::*;

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<Vec<u8>> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| fs::read(e.unwrap().path()).unwrap())
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn round_trips(target: &str, data: &[u8]) -> bool {
    match target {
        "model_checkpoint" => ModelWeights::from_bytes(data).map(|v| v.to_bytes() == data).unwrap_or(true),
        "target_cache" => TargetCache::from_bytes(data).map(|v| v.to_bytes() == data).unwrap_or(true),
        "surrogate_checkpoint" => SurrogateStack::from_bytes(data).map(|v| v.to_bytes() == data).unwrap_or(true),
        "corpus_file" => SyntheticCorpus::from_bytes(data).map(|v| v.to_bytes() == data).unwrap_or(true),
        "run_config" => match std::str::from_utf8(data).ok().and_then(|t| RunConfig::from_toml(t).ok()) {
            Some(cfg) => RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap() == cfg,
            None => true,
        },
        _ => unreachable!(),
    }
}

const TARGETS: [&str; 5] = ["model_checkpoint", "target_cache", "surrogate_checkpoint", "corpus_file", "run_config"];

#[test]
fn every_seed_decodes_and_round_trips() {
    for t in TARGETS {
        for s in seeds(t) {
            let ok = match t {
                "model_checkpoint" => ModelWeights::from_bytes(&s).is_ok(),
                "target_cache" => TargetCache::from_bytes(&s).is_ok(),
                "surrogate_checkpoint" => SurrogateStack::from_bytes(&s).is_ok(),
                "corpus_file" => SyntheticCorpus::from_bytes(&s).is_ok(),
                _ => RunConfig::from_toml(std::str::from_utf8(&s).unwrap()).is_ok(),
            };
            assert!(ok, "{t} seed does not decode");
            assert!(round_trips(t, &s), "{t} seed does not round trip");
        }
    }
}

#[test]
fn truncations_never_panic() {
    for t in TARGETS {
        for s in seeds(t) {
            for cut in 0..s.len().min(512) {
                round_trips(t, &s[..cut]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mutated_seeds_never_panic(t in 0usize..5, k in 0usize..4, flips in prop::collection::vec((any::<usize>(), any::<u8>()), 1..8)) {
        let all = seeds(TARGETS[t]);
        let mut s = all[k % all.len()].clone();
        for (at, byte) in flips {
            let i = at % s.len();
            s[i] = byte;
        }
        prop_assert!(round_trips(TARGETS[t], &s));
    }
}

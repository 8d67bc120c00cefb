mod common;

use common::*;
use corefenc::encoder::gradient_check;
use corefenc::pretrain::{DenominatorMode, NegativeScope};

#[test]
fn encoder_matches_central_differences() {
    for seed in 0..2 {
        let report = gradient_check(&tiny_encoder(seed), 1e-4).unwrap();
        assert!(report.passed, "seed {seed}: {:?}", report.groups);
    }
}

#[test]
fn infonce_matches_central_differences() {
    for seed in 0..5 {
        for mode in [DenominatorMode::IncludePositive, DenominatorMode::LiteralSelf] {
            for scope in [NegativeScope::DifferentStories, NegativeScope::SameStory] {
                let e = infonce_rel_error(seed, mode, scope);
                assert!(e < 1e-6, "seed {seed} {mode:?} {scope:?}: {e:e}");
            }
        }
    }
}

#[test]
fn mlm_matches_central_differences() {
    for seed in 0..5 {
        let e = mlm_rel_error(seed);
        assert!(e < 1e-6, "seed {seed}: {e:e}");
    }
}

#[test]
fn bce_head_matches_central_differences() {
    for seed in 0..5 {
        let e = bce_rel_error(seed);
        assert!(e < 1e-8, "seed {seed}: {e:e}");
    }
}

#[test]
fn tagger_head_matches_central_differences() {
    for seed in 0..5 {
        let e = tagger_rel_error(seed);
        assert!(e < 1e-8, "seed {seed}: {e:e}");
    }
}

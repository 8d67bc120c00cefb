//! Acceptance suite. Every criterion prints one `ACCEPTANCE <n> PASS|FAIL`
//! line; run with `cargo test --test acceptance -- --nocapture` to see them.

mod common;

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::Instant;

use common::*;
use corefenc::corpus::{Mention, Sentence};
use corefenc::encoder::{gradient_check, Checkpoint, Encoder};
use corefenc::eval::{macro_f1, micro_f1, span_f1, SpanMode};
use corefenc::pipeline::{build_vocab, prepare_corpus, run_on_splits, split_corpus, CorefSource, ExperimentConfig, Splits, Variant};
use corefenc::pretrain::{info_nce, pretrain, ContrastiveSet, DenominatorMode, MaskPolicy, NegativeScope, PretrainConfig};
use corefenc::spandet::{training_tokens, LabeledSpan, OUTSIDE};
use corefenc::synth::SynthConfig;
use corefenc::typing::{SpanStrategy, TypingModel};
use ndarray::{Array1, Array2};
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

fn report(n: usize, ok: bool, detail: &str) {
    println!("ACCEPTANCE {n} {}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

#[test]
fn criterion_1_gradient_exactness() {
    let start = Instant::now();
    let mut worst = Vec::new();
    for seed in 0..2 {
        let r = gradient_check(&tiny_encoder(seed), 1e-4).unwrap();
        worst.push(("encoder", r.max_rel_error));
    }
    for seed in 0..3 {
        for mode in [DenominatorMode::IncludePositive, DenominatorMode::LiteralSelf] {
            worst.push(("infonce", infonce_rel_error(seed, mode, NegativeScope::DifferentStories)));
        }
        worst.push(("mlm", mlm_rel_error(seed)));
        worst.push(("bce", bce_rel_error(seed)));
        worst.push(("tagger", tagger_rel_error(seed)));
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let names: BTreeSet<&str> = worst.iter().map(|w| w.0).collect();
    report(
        1,
        max < 1e-4 && secs < 60.0,
        &format!("max relative error {max:.2e} over {names:?} (h=1e-5), {secs:.1}s"),
    );
}

#[test]
fn criterion_2_infonce_closed_forms() {
    let mut uniform_err = 0.0f64;
    for n in 1..=8 {
        let emb = Array2::from_elem((n + 2, 4), 0.3);
        let mut story = vec![0, 0];
        story.extend(std::iter::repeat_n(1, n));
        let chain: Vec<usize> = (0..n + 2).map(|i| if i < 2 { 0 } else { i }).collect();
        let set = ContrastiveSet {
            story,
            chain,
            scope: NegativeScope::DifferentStories,
        };
        let loss = info_nce(&emb, &set, 0.05, DenominatorMode::IncludePositive).unwrap().loss;
        uniform_err = uniform_err.max((loss - ((n + 1) as f64).ln()).abs());
    }
    // Positives at cosine 1, negatives at cosine -1.
    let emb = ndarray::array![[1.0, 0.0], [3.0, 0.0], [-1.0, 0.0], [-2.0, 0.0]];
    let set = ContrastiveSet {
        story: vec![0, 0, 1, 1],
        chain: vec![0, 0, 1, 1],
        scope: NegativeScope::DifferentStories,
    };
    let saturated = info_nce(&emb, &set, 0.05, DenominatorMode::IncludePositive).unwrap().loss;
    report(
        2,
        uniform_err < 1e-9 && saturated < 1e-10,
        &format!("uniform |loss - ln(N+1)| <= {uniform_err:.1e}; saturated loss {saturated:.1e} at tau=0.05"),
    );
}

#[test]
fn criterion_3_consensus_oracle() {
    let (mut mismatches, mut non_monotone) = (0, 0);
    for seed in 0..1000 {
        let mut r = rng(seed);
        let stories = random_stories(&mut r);
        let a = random_annotation(&mut r, "sysA", &stories);
        let b = random_annotation(&mut r, "sysB", &stories);
        let all: Vec<Mention> = stories.values().flatten().cloned().collect();
        let got = pairs(&corefenc::consensus::consensus(&a, &b));
        if got != brute_force_consensus(&a, &b, &all) {
            mismatches += 1;
        }
        if !got.is_subset(&pairs(&a)) || !got.is_subset(&pairs(&b)) {
            non_monotone += 1;
        }
    }
    report(
        3,
        mismatches == 0 && non_monotone == 0,
        &format!("1000 cases: {mismatches} oracle mismatches, {non_monotone} monotonicity violations"),
    );
}

#[test]
fn criterion_4_typing_head_fidelity() {
    let mut r = rng(4);
    let d = 8;
    let labels: Vec<String> = (0..5).map(|i| format!("/l{i}")).collect();
    let mut model = TypingModel::zeros(labels.clone(), d, SpanStrategy::HeadWord);
    for l in 0..labels.len() {
        model.weights[l] = (0..d).map(|_| r.gen_range(-2.0..2.0)).collect();
        model.bias[l] = r.gen_range(-1.0..1.0);
    }
    let mention = Mention {
        story_id: "s".into(),
        sent_index: 0,
        start: 0,
        end: 1,
        head: 0,
    };
    let (mut max_err, mut threshold_errors) = (0.0f64, 0);
    for i in 0..10_000 {
        model.threshold = [0.5, 0.3, 0.8][i % 3];
        let x = Array1::from_shape_fn(d, |_| r.gen_range(-1.5..1.5));
        let pred = model.predict(&mention, x.view()).unwrap();
        let mut expected = BTreeSet::new();
        for (l, label) in labels.iter().enumerate() {
            let mut z = model.bias[l];
            for k in 0..d {
                z += model.weights[l][k] * x[k];
            }
            let p = 1.0 / (1.0 + (-z).exp());
            max_err = max_err.max((pred.probabilities[label] - p).abs());
            if pred.probabilities[label] > model.threshold {
                expected.insert(label.clone());
            }
        }
        if pred.labels.iter().cloned().collect::<BTreeSet<_>>() != expected {
            threshold_errors += 1;
        }
    }
    // At exactly the threshold nothing is assigned.
    let zero = TypingModel::zeros(labels.clone(), d, SpanStrategy::HeadWord);
    let at = zero.predict(&mention, Array1::zeros(d).view()).unwrap();
    let boundary_ok = at.labels.is_empty() && at.probabilities.values().all(|&p| p == 0.5);
    report(
        4,
        max_err < 1e-12 && threshold_errors == 0 && boundary_ok,
        &format!("10k inputs: max |p - sigmoid(a.x+b)| = {max_err:.1e}, {threshold_errors} threshold mismatches, p=0.5 at threshold 0.5 unassigned: {boundary_ok}"),
    );
}

#[test]
fn criterion_5_metric_oracles() {
    let (mut max_err, mut lenient_below) = (0.0f64, 0);
    for seed in 0..1000 {
        let mut r = rng(seed);
        let n = r.gen_range(0..=6);
        let pred = random_label_sets(&mut r, n);
        let gold = random_label_sets(&mut r, n);
        max_err = max_err.max((micro_f1(&pred, &gold).unwrap() - oracle_micro(&pred, &gold)).abs());
        max_err = max_err.max((macro_f1(&pred, &gold).unwrap() - oracle_macro(&pred, &gold)).abs());
        let (np, ng) = (r.gen_range(0..6), r.gen_range(0..6));
        let ps = random_spans(&mut r, np);
        let gs = random_spans(&mut r, ng);
        let strict = span_f1(&ps, &gs, SpanMode::Strict);
        let lenient = span_f1(&ps, &gs, SpanMode::Lenient);
        max_err = max_err.max((strict - oracle_span_f1(&ps, &gs, false)).abs());
        max_err = max_err.max((lenient - oracle_span_f1(&ps, &gs, true)).abs());
        if lenient < strict {
            lenient_below += 1;
        }
    }
    report(
        5,
        max_err < 1e-12 && lenient_below == 0,
        &format!("1000 cases: max deviation from brute force {max_err:.1e}, lenient < strict in {lenient_below}"),
    );
}

// --- desk-scale experiments ----------------------------------------------------

fn splits() -> &'static Splits {
    static SPLITS: OnceLock<Splits> = OnceLock::new();
    SPLITS.get_or_init(|| {
        let corpus = prepare_corpus(&SynthConfig::default()).unwrap();
        split_corpus(&corpus, 0.7, 0.15).unwrap()
    })
}

fn micro(config: &ExperimentConfig) -> f64 {
    run_on_splits(splits(), config).unwrap().test.micro_f1
}

fn seeded(f: impl Fn(&mut ExperimentConfig)) -> Vec<f64> {
    SEEDS
        .iter()
        .map(|&seed| {
            let mut c = ExperimentConfig {
                seed,
                ..Default::default()
            };
            f(&mut c);
            micro(&c)
        })
        .collect()
}

/// Contrastive pre-training from consensus chains, per seed.
fn contrastive() -> &'static Vec<f64> {
    static RUNS: OnceLock<Vec<f64>> = OnceLock::new();
    RUNS.get_or_init(|| seeded(|_| {}))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}] mean {:.3}", parts.join(", "), mean(v))
}

#[test]
fn criterion_6_pretraining_beats_baselines() {
    let start = Instant::now();
    let ours = contrastive();
    let none = seeded(|c| c.variant = Variant::NoPretraining);
    let mlm = seeded(|c| c.variant = Variant::MlmOnly);
    let secs = start.elapsed().as_secs_f64();
    let (gain_none, gain_mlm) = (mean(ours) - mean(&none), mean(ours) - mean(&mlm));
    report(
        6,
        gain_none >= 0.05 && gain_mlm >= 0.02 && secs < 600.0,
        &format!(
            "test micro-F1 contrastive {} | no pre-training {} (+{gain_none:.3}) | MLM-only {} (+{gain_mlm:.3}); {secs:.0}s",
            fmt(ours),
            fmt(&none),
            fmt(&mlm)
        ),
    );
}

/// Paired comparison over seeds: passes when the mean difference is >= 0,
/// is reported as within noise when the deficit is under two standard errors.
fn soft_gate(name: &str, ours: &[f64], other: &[f64]) -> (bool, String) {
    let d: Vec<f64> = ours.iter().zip(other).map(|(a, b)| a - b).collect();
    let m = mean(&d);
    let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
    let se = (var / d.len() as f64).sqrt();
    let verdict = if m >= 0.0 {
        "holds"
    } else if m >= -2.0 * se {
        "within noise"
    } else {
        "violated"
    };
    (m >= -2.0 * se, format!("{name}: {} vs {} diff {m:+.3} (se {se:.3}) {verdict}", fmt(ours), fmt(other)))
}

#[test]
fn criterion_7_ablation_directions() {
    let ours = contrastive();
    let checks = [
        soft_gate("consensus >= sysA", ours, &seeded(|c| c.coref_source = CorefSource::SysA)),
        soft_gate("consensus >= sysB", ours, &seeded(|c| c.coref_source = CorefSource::SysB)),
        soft_gate(
            "different-story >= same-story negatives",
            ours,
            &seeded(|c| c.pretrain.negative_scope = NegativeScope::SameStory),
        ),
        soft_gate("head masking >= no masking", ours, &seeded(|c| c.pretrain.mask_policy = MaskPolicy::None)),
    ];
    let ok = checks.iter().all(|c| c.0);
    let detail: Vec<&str> = checks.iter().map(|c| c.1.as_str()).collect();
    report(7, ok, &detail.join("; "));
}

#[test]
fn criterion_8_determinism() {
    let config = ExperimentConfig {
        seed: 9,
        pretrain: PretrainConfig {
            epochs: 3,
            ..ExperimentConfig::default().pretrain
        },
        ..Default::default()
    };
    let splits = splits();
    let checkpoint = || -> Vec<u8> {
        let enc = Encoder::new(config.encoder.clone(), build_vocab(&splits.train)).unwrap();
        let out = pretrain(enc, &splits.train, Some(&splits.validation), "consensus(sysA,sysB)", &config.pretrain, |_, _| Ok(())).unwrap();
        let best: Checkpoint = out.best;
        best.to_bytes()
    };
    let same_ckpt = checkpoint() == checkpoint();
    let run = || serde_json::to_string(&run_on_splits(splits, &config).unwrap()).unwrap();
    let (a, b) = (run(), run());
    let same_run = a == b;
    let other = serde_json::to_string(&run_on_splits(splits, &ExperimentConfig { seed: 10, ..config.clone() }).unwrap()).unwrap();
    report(
        8,
        same_ckpt && same_run && other != a,
        &format!("checkpoint bytes identical: {same_ckpt}; predictions and report identical: {same_run}; a different seed differs: {}", other != a),
    );
}

#[test]
fn criterion_9_span_filter_soundness() {
    let mut r = rng(9);
    let mut violations = 0;
    let mut outside = 0;
    for _ in 0..10_000 {
        let len = r.gen_range(1..20);
        let words: Vec<String> = (0..len).map(|i| format!("w{i}")).collect();
        let sentence = Sentence::new("s", 0, &words);
        let mut spans = Vec::new();
        let mut i = r.gen_range(0..3);
        while i < len {
            let end = (i + r.gen_range(1..4)).min(len);
            spans.push(LabeledSpan {
                start: i,
                end,
                label: "T".into(),
            });
            i = end + r.gen_range(0..4);
        }
        let inside = |t: usize| spans.iter().any(|s| s.start <= t && t < s.end);
        for (t, tag) in training_tokens(&sentence, &spans).unwrap() {
            if tag == OUTSIDE {
                outside += 1;
                // Distance from token t to the nearest span, by brute force.
                let dist = spans
                    .iter()
                    .map(|s| if t < s.start { s.start - t } else { t + 1 - s.end })
                    .min()
                    .unwrap();
                if dist != 1 || inside(t) {
                    violations += 1;
                }
            }
        }
        for t in 0..len {
            let adjacent = !inside(t) && spans.iter().any(|s| s.start == t + 1 || s.end == t);
            let emitted = training_tokens(&sentence, &spans).unwrap().iter().any(|(j, tag)| *j == t && tag == OUTSIDE);
            if adjacent != emitted {
                violations += 1;
            }
        }
    }
    report(
        9,
        violations == 0,
        &format!("10k random sentences, {outside} OUTSIDE tokens emitted, {violations} not at distance 1 or adjacent ones missed"),
    );
}

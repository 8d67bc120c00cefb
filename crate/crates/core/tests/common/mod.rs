//! Helpers shared by the integration tests: finite differences, random
//! annotation generators and brute-force metric oracles.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use corefenc::corpus::{Chain, CorefAnnotation, Mention};
use corefenc::encoder::EncoderConfig;
use corefenc::eval::{LabelSet, TypedSpan};
use corefenc::pretrain::{info_nce, mlm_loss, ContrastiveSet};
use corefenc::pretrain::{DenominatorMode, NegativeScope};
use corefenc::spandet::softmax_ce;
use corefenc::typing::bce_loss;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

/// Max |analytic - numeric| over the max magnitude of either (floored at 1e-6).
pub fn fd_rel_error(x: &Array2<f64>, analytic: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> f64 {
    let mut x = x.clone();
    let (mut diff, mut scale) = (0.0f64, 1e-6f64);
    for idx in 0..x.len() {
        let orig = x.as_slice().unwrap()[idx];
        x.as_slice_mut().unwrap()[idx] = orig + H;
        let up = f(&x);
        x.as_slice_mut().unwrap()[idx] = orig - H;
        let down = f(&x);
        x.as_slice_mut().unwrap()[idx] = orig;
        let numeric = (up - down) / (2.0 * H);
        let a = analytic.as_slice().unwrap()[idx];
        diff = diff.max((a - numeric).abs());
        scale = scale.max(a.abs()).max(numeric.abs());
    }
    diff / scale
}

fn as_col(v: &Array1<f64>) -> Array2<f64> {
    v.clone().insert_axis(ndarray::Axis(0))
}

/// Six tokens in two stories, d = 4, with chains spanning both stories.
pub fn infonce_rel_error(seed: u64, mode: DenominatorMode, scope: NegativeScope) -> f64 {
    let mut r = rng(seed);
    let emb = random_matrix(&mut r, 6, 4, 1.0);
    let set = ContrastiveSet {
        story: vec![0, 0, 0, 1, 1, 1],
        chain: vec![0, 0, 1, 2, 2, 3],
        scope,
    };
    // A gentler temperature keeps the loss O(1) so differences stay accurate.
    let tau = 0.5;
    let out = info_nce(&emb, &set, tau, mode).unwrap();
    fd_rel_error(&emb, &out.grad, |e| info_nce(e, &set, tau, mode).unwrap().loss)
}

pub fn mlm_rel_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let logits = random_matrix(&mut r, 5, 9, 2.0);
    let targets: Vec<u32> = (0..5).map(|_| r.gen_range(0..9)).collect();
    let out = mlm_loss(&logits, &targets).unwrap();
    fd_rel_error(&logits, &out.grad, |l| mlm_loss(l, &targets).unwrap().loss)
}

/// Worst error over the weight, bias and feature gradients.
pub fn bce_rel_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_matrix(&mut r, 7, 5, 1.0);
    let w = random_matrix(&mut r, 4, 5, 1.0);
    let b = Array1::from_shape_fn(4, |_| r.gen_range(-1.0..1.0));
    let y = Array2::from_shape_fn((7, 4), |_| if r.gen_bool(0.4) { 1.0 } else { 0.0 });
    let (_, dw, db, dx) = bce_loss(&x, &w, &b, &y);
    let ew = fd_rel_error(&w, &dw, |w| bce_loss(&x, w, &b, &y).0);
    let eb = fd_rel_error(&as_col(&b), &as_col(&db), |b| bce_loss(&x, &w, &b.row(0).to_owned(), &y).0);
    let ex = fd_rel_error(&x, &dx, |x| bce_loss(x, &w, &b, &y).0);
    ew.max(eb).max(ex)
}

pub fn tagger_rel_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_matrix(&mut r, 8, 5, 1.0);
    let w = random_matrix(&mut r, 3, 5, 1.0);
    let b = Array1::from_shape_fn(3, |_| r.gen_range(-1.0..1.0));
    let y: Vec<usize> = (0..8).map(|_| r.gen_range(0..3)).collect();
    let (_, dw, db, dx) = softmax_ce(&x, &w, &b, &y);
    let ew = fd_rel_error(&w, &dw, |w| softmax_ce(&x, w, &b, &y).0);
    let eb = fd_rel_error(&as_col(&b), &as_col(&db), |b| softmax_ce(&x, &w, &b.row(0).to_owned(), &y).0);
    let ex = fd_rel_error(&x, &dx, |x| softmax_ce(x, &w, &b, &y).0);
    ew.max(eb).max(ex)
}

/// Small encoder for the full-parameter gradient check, well under 10k parameters.
pub fn tiny_encoder(seed: u64) -> EncoderConfig {
    EncoderConfig {
        dim: 8,
        layers: 2,
        heads: 2,
        ff_dim: 16,
        max_len: 8,
        vocab_size: 24,
        seed,
    }
}

// --- coreference -------------------------------------------------------------

/// Mentions of one story: disjoint single-token spans.
pub fn story_mentions(story: &str, n: usize) -> Vec<Mention> {
    (0..n)
        .map(|i| Mention {
            story_id: story.to_string(),
            sent_index: i / 4,
            start: i % 4 * 2,
            end: i % 4 * 2 + 1,
            head: i % 4 * 2,
        })
        .collect()
}

/// Random partition of a random subset of `mentions` into chains of size >= 2.
pub fn random_chains(rng: &mut ChaCha8Rng, mentions: &[Mention]) -> Vec<Chain> {
    let mut pool: Vec<Mention> = mentions.iter().filter(|_| rng.gen_bool(0.8)).cloned().collect();
    pool.shuffle(rng);
    let k = rng.gen_range(1..=3);
    let mut chains: Vec<Chain> = vec![Vec::new(); k];
    for m in pool {
        let c = rng.gen_range(0..k);
        chains[c].push(m);
    }
    chains.retain(|c| c.len() >= 2);
    chains
}

pub fn random_annotation(rng: &mut ChaCha8Rng, name: &str, stories: &BTreeMap<String, Vec<Mention>>) -> CorefAnnotation {
    let mut ann = CorefAnnotation::new(name);
    for (id, ms) in stories {
        let chains = random_chains(rng, ms);
        if !chains.is_empty() {
            ann.chains.insert(id.clone(), chains);
        }
    }
    ann
}

pub fn random_stories(rng: &mut ChaCha8Rng) -> BTreeMap<String, Vec<Mention>> {
    (0..rng.gen_range(1..=3))
        .map(|s| {
            let id = format!("s{s}");
            let n = rng.gen_range(0..=8);
            (id.clone(), story_mentions(&id, n))
        })
        .collect()
}

/// Unordered co-membership pairs of an annotation.
pub fn pairs(ann: &CorefAnnotation) -> BTreeSet<(Mention, Mention)> {
    let mut out = BTreeSet::new();
    for chains in ann.chains.values() {
        for c in chains {
            for a in c {
                for b in c {
                    if a < b {
                        out.insert((a.clone(), b.clone()));
                    }
                }
            }
        }
    }
    out
}

/// Every mention pair linked by both systems, by checking each candidate pair
/// for chain co-membership in each annotation.
pub fn brute_force_consensus(a: &CorefAnnotation, b: &CorefAnnotation, all: &[Mention]) -> BTreeSet<(Mention, Mention)> {
    let same = |ann: &CorefAnnotation, x: &Mention, y: &Mention| {
        ann.chains_for(&x.story_id)
            .iter()
            .any(|c| c.contains(x) && c.contains(y))
    };
    let mut out = BTreeSet::new();
    for x in all {
        for y in all {
            if x < y && x.story_id == y.story_id && same(a, x, y) && same(b, x, y) {
                out.insert((x.clone(), y.clone()));
            }
        }
    }
    out
}

// --- metrics -----------------------------------------------------------------

pub const LABELS: [&str; 4] = ["/a", "/a/x", "/b", "/b/z"];

pub fn random_label_sets(rng: &mut ChaCha8Rng, n: usize) -> Vec<LabelSet> {
    (0..n)
        .map(|_| LABELS.iter().filter(|_| rng.gen_bool(0.35)).map(|s| s.to_string()).collect())
        .collect()
}

pub fn oracle_micro(pred: &[LabelSet], gold: &[LabelSet]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gold) {
        for l in LABELS {
            match (p.contains(l), g.contains(l)) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
    }
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

pub fn oracle_macro(pred: &[LabelSet], gold: &[LabelSet]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let sum: f64 = pred
        .iter()
        .zip(gold)
        .map(|(p, g)| {
            let both = p.iter().filter(|l| g.contains(*l)).count() as f64;
            if both == 0.0 {
                0.0
            } else {
                2.0 * both / (p.len() + g.len()) as f64
            }
        })
        .sum();
    sum / pred.len() as f64
}

pub fn random_spans(rng: &mut ChaCha8Rng, n: usize) -> Vec<TypedSpan> {
    (0..n)
        .map(|_| {
            let start = rng.gen_range(0..6);
            TypedSpan {
                story_id: format!("s{}", rng.gen_range(0..2)),
                sent_index: rng.gen_range(0..2),
                start,
                end: start + rng.gen_range(1..=3),
                label: ["PER", "ORG"][rng.gen_range(0..2)].to_string(),
            }
        })
        .collect()
}

/// Greedy one-to-one matching: predictions in sorted order each take the first
/// unused gold in sorted order that matches.
pub fn oracle_span_f1(pred: &[TypedSpan], gold: &[TypedSpan], lenient: bool) -> f64 {
    let mut p = pred.to_vec();
    let mut g = gold.to_vec();
    p.sort();
    g.sort();
    let mut used = vec![false; g.len()];
    let mut hits = 0.0;
    for a in &p {
        for (i, b) in g.iter().enumerate() {
            let same_place = a.story_id == b.story_id && a.sent_index == b.sent_index && a.label == b.label;
            let ok = if lenient {
                (a.start..a.end).any(|t| (b.start..b.end).contains(&t))
            } else {
                a.start == b.start && a.end == b.end
            };
            if !used[i] && same_place && ok {
                used[i] = true;
                hits += 1.0;
                break;
            }
        }
    }
    if hits == 0.0 {
        0.0
    } else {
        2.0 * hits / (p.len() + g.len()) as f64
    }
}

// --- statistics --------------------------------------------------------------

fn ln_binom_pmf(n: u64, k: u64, p: f64) -> f64 {
    let lg = |x: u64| (1..=x).map(|i| (i as f64).ln()).sum::<f64>();
    lg(n) - lg(k) - lg(n - k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()
}

/// Central `level` acceptance interval `[lo, hi]` of Binomial(n, p), from the
/// exact cumulative distribution.
pub fn binomial_interval(n: u64, p: f64, level: f64) -> (u64, u64) {
    let tail = (1.0 - level) / 2.0;
    let pmf: Vec<f64> = (0..=n).map(|k| ln_binom_pmf(n, k, p).exp()).collect();
    let mut acc = 0.0;
    let mut lo = 0;
    for (k, q) in pmf.iter().enumerate() {
        if acc + q > tail {
            lo = k as u64;
            break;
        }
        acc += q;
    }
    acc = 0.0;
    let mut hi = n;
    for (k, q) in pmf.iter().enumerate().rev() {
        if acc + q > tail {
            hi = k as u64;
            break;
        }
        acc += q;
    }
    (lo, hi)
}

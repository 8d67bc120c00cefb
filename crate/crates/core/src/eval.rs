//! Typing and span-detection metrics.
//!
//! Macro F1 is the mean over instances of the per-instance set F1; micro F1
//! pools every (instance, label) decision. Any ratio with a zero denominator
//! is 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::label_depth;
use crate::error::{Error, Result};

pub type LabelSet = BTreeSet<String>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Prf {
    pub fn from_counts(hits: usize, predicted: usize, gold: usize) -> Self {
        let precision = ratio(hits, predicted);
        let recall = ratio(hits, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

fn check(pred: &[LabelSet], gold: &[LabelSet]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch(pred.len(), gold.len()));
    }
    Ok(())
}

pub fn micro_prf(pred: &[LabelSet], gold: &[LabelSet]) -> Result<Prf> {
    check(pred, gold)?;
    let (mut hits, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        hits += p.intersection(g).count();
        np += p.len();
        ng += g.len();
    }
    Ok(Prf::from_counts(hits, np, ng))
}

pub fn micro_f1(pred: &[LabelSet], gold: &[LabelSet]) -> Result<f64> {
    Ok(micro_prf(pred, gold)?.f1)
}

/// Set F1 of one instance.
pub fn instance_f1(pred: &LabelSet, gold: &LabelSet) -> f64 {
    Prf::from_counts(pred.intersection(gold).count(), pred.len(), gold.len()).f1
}

pub fn macro_f1(pred: &[LabelSet], gold: &[LabelSet]) -> Result<f64> {
    check(pred, gold)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(gold).map(|(p, g)| instance_f1(p, g)).sum();
    Ok(sum / pred.len() as f64)
}

/// Fraction of each gold label's occurrences that were predicted. Labels that
/// never occur in gold are absent.
pub fn per_label_recall(pred: &[LabelSet], gold: &[LabelSet]) -> Result<BTreeMap<String, f64>> {
    Ok(per_label(pred, gold)?
        .into_iter()
        .filter(|(_, (_, _, g))| *g > 0)
        .map(|(l, (hits, _, g))| (l, ratio(hits, g)))
        .collect())
}

/// Per label: (hits, predicted, gold) counts.
fn per_label(pred: &[LabelSet], gold: &[LabelSet]) -> Result<BTreeMap<String, (usize, usize, usize)>> {
    check(pred, gold)?;
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        for l in p {
            let c = counts.entry(l.clone()).or_default();
            c.1 += 1;
            if g.contains(l) {
                c.0 += 1;
            }
        }
        for l in g {
            counts.entry(l.clone()).or_default().2 += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanMode {
    /// Same start, end and type.
    Strict,
    /// Same type and at least one shared token.
    Lenient,
}

/// A typed span in one sentence, identified by `(story, sent)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TypedSpan {
    pub story_id: String,
    pub sent_index: usize,
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl TypedSpan {
    fn sentence(&self) -> (&str, usize) {
        (&self.story_id, self.sent_index)
    }

    fn overlaps(&self, other: &TypedSpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

fn by_sentence(spans: &[TypedSpan]) -> BTreeMap<(&str, usize), Vec<&TypedSpan>> {
    let mut map: BTreeMap<(&str, usize), Vec<&TypedSpan>> = BTreeMap::new();
    for s in spans {
        map.entry(s.sentence()).or_default().push(s);
    }
    for v in map.values_mut() {
        v.sort();
    }
    map
}

/// Number of one-to-one matches. Within each sentence, predictions are taken
/// left to right and each claims the leftmost unclaimed gold span it matches.
pub fn span_matches(pred: &[TypedSpan], gold: &[TypedSpan], mode: SpanMode) -> usize {
    let golds = by_sentence(gold);
    let mut hits = 0;
    for (key, preds) in by_sentence(pred) {
        let Some(gs) = golds.get(&key) else { continue };
        let mut used = vec![false; gs.len()];
        for p in preds {
            let found = gs.iter().enumerate().position(|(i, g)| {
                !used[i]
                    && g.label == p.label
                    && match mode {
                        SpanMode::Strict => g.start == p.start && g.end == p.end,
                        SpanMode::Lenient => g.overlaps(p),
                    }
            });
            if let Some(i) = found {
                used[i] = true;
                hits += 1;
            }
        }
    }
    hits
}

pub fn span_prf(pred: &[TypedSpan], gold: &[TypedSpan], mode: SpanMode) -> Prf {
    Prf::from_counts(span_matches(pred, gold, mode), pred.len(), gold.len())
}

pub fn span_f1(pred: &[TypedSpan], gold: &[TypedSpan], mode: SpanMode) -> f64 {
    span_prf(pred, gold, mode).f1
}

/// Deepest gold label, with 3 standing for 3 or more; 0 for no labels.
pub fn instance_depth(gold: &LabelSet) -> usize {
    gold.iter().map(|l| label_depth(l)).max().unwrap_or(0).min(3)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionScore {
    pub instances: usize,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

/// Scores for instances grouped by [`instance_depth`]. Instances without
/// gold labels are left out.
pub fn depth_partition(pred: &[LabelSet], gold: &[LabelSet]) -> Result<BTreeMap<usize, PartitionScore>> {
    check(pred, gold)?;
    let mut groups: BTreeMap<usize, (Vec<LabelSet>, Vec<LabelSet>)> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        let depth = instance_depth(g);
        if depth == 0 {
            continue;
        }
        let e = groups.entry(depth).or_default();
        e.0.push(p.clone());
        e.1.push(g.clone());
    }
    groups
        .into_iter()
        .map(|(d, (p, g))| {
            Ok((
                d,
                PartitionScore {
                    instances: p.len(),
                    micro_f1: micro_f1(&p, &g)?,
                    macro_f1: macro_f1(&p, &g)?,
                },
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRow {
    /// 1-based instance number.
    pub instance: usize,
    pub label: String,
    pub probability: f64,
}

/// One row per (instance, gold label) with the model's probability for that
/// label; labels the model does not know get probability 0.
pub fn confidence_report(probabilities: &[BTreeMap<String, f64>], gold: &[LabelSet]) -> Result<Vec<ConfidenceRow>> {
    if probabilities.len() != gold.len() {
        return Err(Error::LengthMismatch(probabilities.len(), gold.len()));
    }
    let mut rows = Vec::new();
    for (i, (probs, g)) in probabilities.iter().zip(gold).enumerate() {
        for label in g {
            rows.push(ConfidenceRow {
                instance: i + 1,
                label: label.clone(),
                probability: probs.get(label).copied().unwrap_or(0.0),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: usize,
    pub micro_f1: f64,
    pub macro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub strict_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lenient_f1: Option<f64>,
    pub per_label: BTreeMap<String, Prf>,
    /// Keyed by depth 1, 2 and 3 (3 or more).
    pub partitions: BTreeMap<usize, PartitionScore>,
}

impl EvalReport {
    pub fn typing(pred: &[LabelSet], gold: &[LabelSet]) -> Result<Self> {
        let per_label = per_label(pred, gold)?
            .into_iter()
            .map(|(l, (h, p, g))| (l, Prf::from_counts(h, p, g)))
            .collect();
        Ok(EvalReport {
            instances: gold.len(),
            micro_f1: micro_f1(pred, gold)?,
            macro_f1: macro_f1(pred, gold)?,
            strict_f1: None,
            lenient_f1: None,
            per_label,
            partitions: depth_partition(pred, gold)?,
        })
    }

    /// Span report. Micro F1 is the strict score; macro F1 averages the
    /// strict F1 of each sentence that has gold or predicted spans.
    pub fn spans(pred: &[TypedSpan], gold: &[TypedSpan]) -> Self {
        let strict = span_f1(pred, gold, SpanMode::Strict);
        let lenient = span_f1(pred, gold, SpanMode::Lenient);
        let (pm, gm) = (by_sentence(pred), by_sentence(gold));
        let keys: BTreeSet<_> = pm.keys().chain(gm.keys()).copied().collect();
        let per_sentence: Vec<f64> = keys
            .iter()
            .map(|k| {
                let p: Vec<TypedSpan> = pm.get(k).into_iter().flatten().map(|s| (*s).clone()).collect();
                let g: Vec<TypedSpan> = gm.get(k).into_iter().flatten().map(|s| (*s).clone()).collect();
                span_f1(&p, &g, SpanMode::Strict)
            })
            .collect();
        let macro_f1 = if per_sentence.is_empty() {
            0.0
        } else {
            per_sentence.iter().sum::<f64>() / per_sentence.len() as f64
        };
        let mut per_label = BTreeMap::new();
        let labels: BTreeSet<&str> = pred.iter().chain(gold).map(|s| s.label.as_str()).collect();
        for l in labels {
            let p: Vec<TypedSpan> = pred.iter().filter(|s| s.label == l).cloned().collect();
            let g: Vec<TypedSpan> = gold.iter().filter(|s| s.label == l).cloned().collect();
            per_label.insert(l.to_string(), span_prf(&p, &g, SpanMode::Strict));
        }
        EvalReport {
            instances: gold.len(),
            micro_f1: strict,
            macro_f1,
            strict_f1: Some(strict),
            lenient_f1: Some(lenient),
            per_label,
            partitions: BTreeMap::new(),
        }
    }

    /// Plain-text table of the report.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12}{:>10}", "metric", "value");
        let _ = writeln!(out, "{:<12}{:>10}", "instances", self.instances);
        let _ = writeln!(out, "{:<12}{:>10.4}", "micro_f1", self.micro_f1);
        let _ = writeln!(out, "{:<12}{:>10.4}", "macro_f1", self.macro_f1);
        if let Some(s) = self.strict_f1 {
            let _ = writeln!(out, "{:<12}{:>10.4}", "strict_f1", s);
        }
        if let Some(l) = self.lenient_f1 {
            let _ = writeln!(out, "{:<12}{:>10.4}", "lenient_f1", l);
        }
        if !self.partitions.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<8}{:>10}{:>10}{:>10}", "depth", "n", "micro", "macro");
            for (d, p) in &self.partitions {
                let name = if *d >= 3 { "3+".to_string() } else { d.to_string() };
                let _ = writeln!(
                    out,
                    "{:<8}{:>10}{:>10.4}{:>10.4}",
                    name, p.instances, p.micro_f1, p.macro_f1
                );
            }
        }
        if !self.per_label.is_empty() {
            let width = self.per_label.keys().map(String::len).max().unwrap_or(5).max(5) + 2;
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<width$}{:>10}{:>10}{:>10}", "label", "P", "R", "F1");
            for (l, s) in &self.per_label {
                let _ = writeln!(
                    out,
                    "{:<width$}{:>10.4}{:>10.4}{:>10.4}",
                    l, s.precision, s.recall, s.f1
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(labels: &[&str]) -> LabelSet {
        labels.iter().map(|s| s.to_string()).collect()
    }

    fn span(start: usize, end: usize, label: &str) -> TypedSpan {
        TypedSpan {
            story_id: "s".into(),
            sent_index: 0,
            start,
            end,
            label: label.into(),
        }
    }

    #[test]
    fn two_instance_example() {
        let gold = vec![set(&["A", "B"]), set(&["C"])];
        let pred = vec![set(&["A"]), set(&["C", "D"])];
        let micro = micro_prf(&pred, &gold).unwrap();
        assert!((micro.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((micro.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((micro.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((macro_f1(&pred, &gold).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_empty_and_half() {
        let gold = vec![set(&["A"]), set(&["B", "C"])];
        assert_eq!(micro_f1(&gold, &gold).unwrap(), 1.0);
        assert_eq!(macro_f1(&gold, &gold).unwrap(), 1.0);
        let empty = vec![set(&[]), set(&[])];
        assert_eq!(micro_f1(&empty, &gold).unwrap(), 0.0);
        let half = vec![set(&["A"]), set(&[])];
        assert_eq!(macro_f1(&half, &gold).unwrap(), 0.5);
        assert!(micro_f1(&half[..1], &gold).is_err());
    }

    #[test]
    fn span_modes() {
        let gold = [span(2, 4, "PER")];
        assert_eq!(span_f1(&[span(2, 4, "PER")], &gold, SpanMode::Strict), 1.0);
        assert_eq!(span_f1(&[span(2, 4, "PER")], &gold, SpanMode::Lenient), 1.0);
        assert_eq!(span_f1(&[span(2, 3, "PER")], &gold, SpanMode::Strict), 0.0);
        assert_eq!(span_f1(&[span(2, 3, "PER")], &gold, SpanMode::Lenient), 1.0);
        assert_eq!(span_f1(&[span(2, 4, "ORG")], &gold, SpanMode::Strict), 0.0);
        assert_eq!(span_f1(&[span(2, 4, "ORG")], &gold, SpanMode::Lenient), 0.0);
    }

    #[test]
    fn lenient_is_one_to_one() {
        let gold = [span(0, 4, "PER")];
        let pred = [span(0, 1, "PER"), span(2, 3, "PER")];
        assert_eq!(span_matches(&pred, &gold, SpanMode::Lenient), 1);
    }

    #[test]
    fn depths() {
        assert_eq!(instance_depth(&set(&["/organization"])), 1);
        assert_eq!(instance_depth(&set(&["/organization", "/organization/company"])), 2);
        assert_eq!(
            instance_depth(&set(&[
                "/organization",
                "/organization/company",
                "/organization/company/broadcast"
            ])),
            3
        );
        let gold = vec![set(&["/a"]), set(&["/a", "/a/b"]), set(&["/a", "/a/b"])];
        let parts = depth_partition(&gold, &gold).unwrap();
        assert_eq!(parts[&1].instances, 1);
        assert_eq!(parts[&2].instances, 2);
    }

    #[test]
    fn recall_per_label() {
        let gold = vec![set(&["A"]), set(&["A"]), set(&["A"]), set(&["A", "B"])];
        let pred = vec![set(&["A"]), set(&["A"]), set(&["A"]), set(&[])];
        let r = per_label_recall(&pred, &gold).unwrap();
        assert_eq!(r["A"], 0.75);
        assert_eq!(r["B"], 0.0);
        assert!(per_label_recall(&gold, &gold).unwrap().values().all(|&v| v == 1.0));
    }

    #[test]
    fn confidence_rows() {
        let mut probs = BTreeMap::new();
        probs.insert("/organization".to_string(), 0.60);
        let rows = confidence_report(&[probs], &[set(&["/organization"])]).unwrap();
        assert_eq!(
            rows,
            vec![ConfidenceRow {
                instance: 1,
                label: "/organization".into(),
                probability: 0.60
            }]
        );
    }

    #[test]
    fn report_and_table() {
        let gold = vec![set(&["/a"]), set(&["/a", "/a/b"])];
        let report = EvalReport::typing(&gold, &gold).unwrap();
        assert_eq!(report.micro_f1, 1.0);
        assert!(report.table().contains("micro_f1"));
        let spans = EvalReport::spans(&[span(0, 1, "X")], &[span(0, 1, "X")]);
        assert_eq!(spans.strict_f1, Some(1.0));
        assert_eq!(spans.macro_f1, 1.0);
    }
}

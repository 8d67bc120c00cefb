//! Span detection by per-token tagging: one tag per entity type plus
//! [`OUTSIDE`], decoded by merging runs of equal tags.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{label_depth, Corpus, Sentence};
use crate::encoder::{Encoder, Gradients, IdBatch, TokenId, BOS, EOS};
use crate::error::{Error, Result};
use crate::eval::TypedSpan;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{substream, Purpose};

pub const OUTSIDE: &str = "OUTSIDE";

/// A gold or predicted span `[start, end)` within one sentence.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabeledSpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

fn check_spans(len: usize, spans: &[LabeledSpan]) -> Result<Vec<&LabeledSpan>> {
    let mut sorted: Vec<&LabeledSpan> = spans.iter().collect();
    sorted.sort();
    for s in &sorted {
        if s.start >= s.end || s.end > len {
            return Err(Error::Validation {
                line: 0,
                message: format!("span [{}, {}) invalid for {len} tokens", s.start, s.end),
            });
        }
    }
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(Error::OverlappingSpans(w[0].start, w[0].end, w[1].start, w[1].end));
        }
    }
    Ok(sorted)
}

/// Training tokens of one sentence: every token inside a span with the span's
/// label, and each outside token directly before or after a span with
/// [`OUTSIDE`]. Sorted by token index.
pub fn training_tokens(sentence: &Sentence, spans: &[LabeledSpan]) -> Result<Vec<(usize, String)>> {
    let len = sentence.len();
    let sorted = check_spans(len, spans)?;
    let mut tags: Vec<Option<&str>> = vec![None; len];
    for s in &sorted {
        for t in &mut tags[s.start..s.end] {
            *t = Some(&s.label);
        }
    }
    let mut out = BTreeMap::new();
    for s in &sorted {
        for i in s.start..s.end {
            out.insert(i, s.label.clone());
        }
        if s.start > 0 && tags[s.start - 1].is_none() {
            out.insert(s.start - 1, OUTSIDE.to_string());
        }
        if s.end < len && tags[s.end].is_none() {
            out.insert(s.end, OUTSIDE.to_string());
        }
    }
    Ok(out.into_iter().collect())
}

/// Maximal runs of one non-[`OUTSIDE`] tag.
pub fn decode<S: AsRef<str>>(tags: &[S]) -> Vec<LabeledSpan> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        let t = tags[i].as_ref();
        let mut j = i + 1;
        while j < tags.len() && tags[j].as_ref() == t {
            j += 1;
        }
        if t != OUTSIDE {
            spans.push(LabeledSpan {
                start: i,
                end: j,
                label: t.to_string(),
            });
        }
        i = j;
    }
    spans
}

/// The most specific label of a label set (deepest path, then lexicographic).
pub fn span_label(labels: &[String]) -> Option<&String> {
    labels.iter().min_by(|a, b| label_depth(b).cmp(&label_depth(a)).then(a.cmp(b)))
}

/// Gold spans of every sentence, keyed by `(story, sentence)`, from the
/// corpus's typed mentions.
pub fn gold_spans(corpus: &Corpus) -> BTreeMap<(String, usize), Vec<LabeledSpan>> {
    let mut map: BTreeMap<(String, usize), Vec<LabeledSpan>> = BTreeMap::new();
    for tm in &corpus.typed_mentions {
        if let Some(label) = span_label(&tm.labels) {
            let m = &tm.mention;
            map.entry((m.story_id.clone(), m.sent_index))
                .or_default()
                .push(LabeledSpan {
                    start: m.start,
                    end: m.end,
                    label: label.clone(),
                });
        }
    }
    map
}

/// Mean softmax cross-entropy of logits `z = X Wᵀ + b` with gradients for W,
/// b and X.
pub fn softmax_ce(
    features: &Array2<f64>,
    weights: &Array2<f64>,
    bias: &Array1<f64>,
    targets: &[usize],
) -> (f64, Array2<f64>, Array1<f64>, Array2<f64>) {
    let z = features.dot(&weights.t()) + bias;
    let n = targets.len().max(1) as f64;
    let mut dz = Array2::zeros(z.raw_dim());
    let mut loss = 0.0;
    for (r, &y) in targets.iter().enumerate() {
        let row = z.row(r);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        loss += (lse - row[y]) / n;
        for (k, &x) in row.iter().enumerate() {
            dz[[r, k]] = (x - lse).exp() / n;
        }
        dz[[r, y]] -= 1.0 / n;
    }
    let dw = dz.t().dot(features);
    let db = dz.sum_axis(Axis(0));
    let dx = dz.dot(weights);
    (loss, dw, db, dx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggerModel {
    /// Tag inventory; index 0 is [`OUTSIDE`].
    pub tags: Vec<String>,
    pub dim: usize,
    pub frozen: bool,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl TaggerModel {
    pub fn zeros(labels: impl IntoIterator<Item = String>, dim: usize) -> Self {
        let mut tags = vec![OUTSIDE.to_string()];
        let rest: BTreeSet<String> = labels.into_iter().filter(|l| l != OUTSIDE).collect();
        tags.extend(rest);
        let n = tags.len();
        TaggerModel {
            tags,
            dim,
            frozen: true,
            weights: vec![vec![0.0; dim]; n],
            bias: vec![0.0; n],
        }
    }

    fn flat(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.weights.iter().flatten().copied().collect();
        p.extend(&self.bias);
        p
    }

    fn set_flat(&mut self, p: &[f64]) {
        let d = self.dim;
        for (t, w) in self.weights.iter_mut().enumerate() {
            w.copy_from_slice(&p[t * d..(t + 1) * d]);
        }
        let n = self.tags.len();
        self.bias.copy_from_slice(&p[n * d..]);
    }

    fn matrices(p: &[f64], n: usize, d: usize) -> (Array2<f64>, Array1<f64>) {
        (
            Array2::from_shape_vec((n, d), p[..n * d].to_vec()).expect("shape"),
            Array1::from(p[n * d..].to_vec()),
        )
    }

    /// Highest-scoring tag for each row.
    pub fn tag_rows(&self, features: &Array2<f64>) -> Vec<&str> {
        let (w, b) = Self::matrices(&self.flat(), self.tags.len(), self.dim);
        let z = features.dot(&w.t()) + &b;
        z.rows()
            .into_iter()
            .map(|r| {
                let best = r
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                    .0;
                self.tags[best].as_str()
            })
            .collect()
    }

    fn index(&self) -> BTreeMap<&str, usize> {
        self.tags.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec_pretty(self).expect("model serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse { line: 0, source: e })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaggerConfig {
    pub epochs: usize,
    /// Sentences per step.
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        TaggerConfig {
            epochs: 30,
            batch_size: 16,
            optimizer: AdamWConfig {
                lr: 1e-2,
                weight_decay: 0.0,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaggerOutcome {
    pub model: TaggerModel,
    pub encoder: Encoder,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

struct TagSentence {
    ids: Vec<TokenId>,
    /// (token index, tag index) pairs that survive the training filter.
    targets: Vec<(usize, usize)>,
}

fn sentence_ids(encoder: &Encoder, s: &Sentence) -> Vec<TokenId> {
    let mut ids = vec![BOS];
    ids.extend(encoder.vocab.encode(s.words()));
    ids.push(EOS);
    ids
}

/// Trains a tagger on the typed-mention spans of `train`. With `frozen` the
/// encoder only supplies token features.
pub fn train_tagger(
    train: &Corpus,
    encoder: &Encoder,
    frozen: bool,
    config: &TaggerConfig,
) -> Result<TaggerOutcome> {
    let gold = gold_spans(train);
    let labels: BTreeSet<String> = gold.values().flatten().map(|s| s.label.clone()).collect();
    let mut model = TaggerModel::zeros(labels, encoder.dim());
    model.frozen = frozen;
    let index = model.index();
    let mut data = Vec::new();
    for story in &train.stories {
        for s in &story.sentences {
            let spans = gold.get(&(story.id.clone(), s.sent_index)).map(Vec::as_slice).unwrap_or(&[]);
            let targets: Vec<(usize, usize)> = training_tokens(s, spans)?
                .into_iter()
                .map(|(i, t)| (i, index[t.as_str()]))
                .collect();
            if !targets.is_empty() {
                data.push(TagSentence {
                    ids: sentence_ids(encoder, s),
                    targets,
                });
            }
        }
    }
    if data.is_empty() {
        return Err(Error::EmptyData("no tagger training tokens after filtering".into()));
    }
    log::debug!("tagger trains on {} sentences", data.len());

    let (nt, d) = (model.tags.len(), model.dim);
    let mut head = model.flat();
    let mut enc = encoder.clone();
    let mut decay = if frozen { Vec::new() } else { enc.layout().decay_mask() };
    decay.extend(vec![true; nt * d]);
    decay.extend(vec![false; nt]);
    let mut opt = AdamW::new(config.optimizer.clone(), decay);
    let mut rng = substream(config.seed, Purpose::Head);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    let enc_len = enc.num_params();

    // Frozen features are computed once.
    let frozen_features: Option<Vec<Array2<f64>>> = if frozen {
        let mut feats = Vec::with_capacity(data.len());
        for chunk in data.chunks(64) {
            let seqs: Vec<Vec<TokenId>> = chunk.iter().map(|t| t.ids.clone()).collect();
            let emb = enc.forward(&IdBatch::from_sequences(&seqs))?.embeddings;
            for (b, t) in chunk.iter().enumerate() {
                let mut x = Array2::zeros((t.targets.len(), d));
                for (r, &(i, _)) in t.targets.iter().enumerate() {
                    x.row_mut(r).assign(&emb.slice(s![b, i + 1, ..]));
                }
                feats.push(x);
            }
        }
        Some(feats)
    } else {
        None
    };

    let mut grads = enc.zero_grads();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let targets: Vec<usize> = chunk.iter().flat_map(|&k| data[k].targets.iter().map(|t| t.1)).collect();
            let rows = targets.len();
            let (w, b) = TaggerModel::matrices(&head, nt, d);
            if let Some(feats) = &frozen_features {
                let mut x = Array2::zeros((rows, d));
                let mut r = 0;
                for &k in chunk {
                    let f = &feats[k];
                    x.slice_mut(s![r..r + f.nrows(), ..]).assign(f);
                    r += f.nrows();
                }
                let (loss, dw, db, _) = softmax_ce(&x, &w, &b, &targets);
                total += loss * rows as f64;
                let mut g: Vec<f64> = dw.iter().copied().collect();
                g.extend(db.iter());
                opt.step(&mut head, &g);
            } else {
                let seqs: Vec<Vec<TokenId>> = chunk.iter().map(|&k| data[k].ids.clone()).collect();
                let out = enc.forward(&IdBatch::from_sequences(&seqs))?;
                let mut x = Array2::zeros((rows, d));
                let mut slots = Vec::with_capacity(rows);
                for (b, &k) in chunk.iter().enumerate() {
                    for &(i, _) in &data[k].targets {
                        x.row_mut(slots.len()).assign(&out.embeddings.slice(s![b, i + 1, ..]));
                        slots.push((b, i + 1));
                    }
                }
                let (loss, dw, db, dx) = softmax_ce(&x, &w, &b, &targets);
                total += loss * rows as f64;
                let mut d_emb = Array3::<f64>::zeros(out.embeddings.raw_dim());
                for (r, &(b, p)) in slots.iter().enumerate() {
                    let mut dst = d_emb.slice_mut(s![b, p, ..]);
                    dst += &dx.row(r);
                }
                grads.clear();
                enc.backward(&out, &d_emb, &mut grads)?;
                let mut all = std::mem::take(&mut enc.params);
                all.extend_from_slice(&head);
                let mut g = std::mem::replace(&mut grads, Gradients { data: Vec::new() }).data;
                g.extend(dw.iter());
                g.extend(db.iter());
                opt.step(&mut all, &g);
                g.truncate(enc_len);
                grads = Gradients { data: g };
                head.copy_from_slice(&all[enc_len..]);
                all.truncate(enc_len);
                enc.params = all;
            }
            count += rows;
        }
        losses.push(total / count.max(1) as f64);
    }
    model.set_flat(&head);
    Ok(TaggerOutcome {
        model,
        encoder: enc,
        losses,
    })
}

/// Tags every token of every sentence and decodes spans.
pub fn predict_spans(model: &TaggerModel, encoder: &Encoder, corpus: &Corpus) -> Result<Vec<TypedSpan>> {
    let sentences: Vec<&Sentence> = corpus.sentences().collect();
    let mut out = Vec::new();
    for chunk in sentences.chunks(64) {
        let seqs: Vec<Vec<TokenId>> = chunk.iter().map(|s| sentence_ids(encoder, s)).collect();
        let emb = encoder.forward(&IdBatch::from_sequences(&seqs))?.embeddings;
        for (b, s) in chunk.iter().enumerate() {
            let rows = emb.slice(s![b, 1..s.len() + 1, ..]).to_owned();
            let tags = model.tag_rows(&rows);
            for span in decode(&tags) {
                out.push(TypedSpan {
                    story_id: s.story_id.clone(),
                    sent_index: s.sent_index,
                    start: span.start,
                    end: span.end,
                    label: span.label,
                });
            }
        }
    }
    Ok(out)
}

/// Gold spans of `corpus` in evaluation form.
pub fn gold_typed_spans(corpus: &Corpus) -> Vec<TypedSpan> {
    gold_spans(corpus)
        .into_iter()
        .flat_map(|((story, sent), spans)| {
            spans.into_iter().map(move |s| TypedSpan {
                story_id: story.clone(),
                sent_index: sent,
                start: s.start,
                end: s.end,
                label: s.label,
            })
        })
        .collect()
}

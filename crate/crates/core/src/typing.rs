//! Entity typing: one sigmoid classifier per label over a mention embedding.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Mention, Sentence, TypedMention};
use crate::encoder::{Encoder, Gradients, IdBatch, TokenId, Vocab, BOS, EOS, MASK, MENTION_CLOSE, MENTION_OPEN};
use crate::error::{Error, Result};
use crate::eval::{macro_f1, micro_f1, LabelSet};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{substream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanStrategy {
    /// Final-layer vector of the head token.
    HeadWord,
    /// `<m>` before and `</m>` after the head; read `<m>`.
    SpecialTokensHead,
    /// `<m>` before and `</m>` after the whole span; read `<m>`.
    SpecialTokensFullSpan,
    /// The span replaced by a single `[MASK]`; read it.
    MaskToken,
    /// Sentence followed by `The type of {span} is [MASK] .`; read `[MASK]`.
    Prompt,
    /// Sentence followed by `< {span} , hasType , [MASK] >`; read `[MASK]`.
    MaskedTriple,
}

impl SpanStrategy {
    pub const ALL: [SpanStrategy; 6] = [
        SpanStrategy::HeadWord,
        SpanStrategy::SpecialTokensHead,
        SpanStrategy::SpecialTokensFullSpan,
        SpanStrategy::MaskToken,
        SpanStrategy::Prompt,
        SpanStrategy::MaskedTriple,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SpanStrategy::HeadWord => "head_word",
            SpanStrategy::SpecialTokensHead => "special_tokens_head",
            SpanStrategy::SpecialTokensFullSpan => "special_tokens_full_span",
            SpanStrategy::MaskToken => "mask_token",
            SpanStrategy::Prompt => "prompt",
            SpanStrategy::MaskedTriple => "masked_triple",
        }
    }
}

impl std::str::FromStr for SpanStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SpanStrategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown span strategy '{s}'")))
    }
}

/// Encoder input for one mention and the position whose vector represents it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MentionInput {
    pub ids: Vec<TokenId>,
    pub read: usize,
}

/// Builds the strategy's input sequence, `[BOS] ... [EOS]`.
pub fn mention_input(
    vocab: &Vocab,
    sentence: &Sentence,
    mention: &Mention,
    strategy: SpanStrategy,
    max_len: usize,
) -> Result<MentionInput> {
    mention.validate(sentence).map_err(|message| Error::Validation { line: 0, message })?;
    let words: Vec<&str> = sentence.words().collect();
    let enc = |ws: &[&str]| vocab.encode(ws.iter().copied());
    let mut ids = vec![BOS];
    let read;
    match strategy {
        SpanStrategy::HeadWord => {
            ids.extend(enc(&words));
            read = mention.head + 1;
        }
        SpanStrategy::SpecialTokensHead | SpanStrategy::SpecialTokensFullSpan => {
            let (a, b) = if strategy == SpanStrategy::SpecialTokensHead {
                (mention.head, mention.head + 1)
            } else {
                (mention.start, mention.end)
            };
            ids.extend(enc(&words[..a]));
            read = ids.len();
            ids.push(MENTION_OPEN);
            ids.extend(enc(&words[a..b]));
            ids.push(MENTION_CLOSE);
            ids.extend(enc(&words[b..]));
        }
        SpanStrategy::MaskToken => {
            ids.extend(enc(&words[..mention.start]));
            read = ids.len();
            ids.push(MASK);
            ids.extend(enc(&words[mention.end..]));
        }
        SpanStrategy::Prompt | SpanStrategy::MaskedTriple => {
            ids.extend(enc(&words));
            let span = &words[mention.start..mention.end];
            if strategy == SpanStrategy::Prompt {
                ids.extend(enc(&["The", "type", "of"]));
                ids.extend(enc(span));
                ids.push(vocab.id("is"));
                read = ids.len();
                ids.push(MASK);
                ids.push(vocab.id("."));
            } else {
                ids.push(vocab.id("<"));
                ids.extend(enc(span));
                ids.extend(enc(&[",", "hasType", ","]));
                read = ids.len();
                ids.push(MASK);
                ids.push(vocab.id(">"));
            }
        }
    }
    ids.push(EOS);
    if ids.len() > max_len {
        return Err(Error::PromptOverflow {
            strategy: strategy.name(),
            len: ids.len(),
            max: max_len,
        });
    }
    Ok(MentionInput { ids, read })
}

/// Mention vector under `strategy`.
pub fn mention_embedding(
    encoder: &Encoder,
    sentence: &Sentence,
    mention: &Mention,
    strategy: SpanStrategy,
) -> Result<Array1<f64>> {
    let input = mention_input(&encoder.vocab, sentence, mention, strategy, encoder.config.max_len)?;
    let out = encoder.forward(&IdBatch::from_sequences(&[input.ids]))?;
    Ok(out.embeddings.slice(s![0, input.read, ..]).to_owned())
}

const CHUNK: usize = 64;

/// Mention vectors for many mentions, one row each.
pub fn mention_embeddings(encoder: &Encoder, inputs: &[MentionInput]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((inputs.len(), encoder.dim()));
    for (c, chunk) in inputs.chunks(CHUNK).enumerate() {
        let seqs: Vec<Vec<TokenId>> = chunk.iter().map(|m| m.ids.clone()).collect();
        let emb = encoder.forward(&IdBatch::from_sequences(&seqs))?.embeddings;
        for (i, m) in chunk.iter().enumerate() {
            out.row_mut(c * CHUNK + i).assign(&emb.slice(s![i, m.read, ..]));
        }
    }
    Ok(out)
}

/// Inputs for every typed mention of `corpus`.
pub fn corpus_inputs(
    corpus: &Corpus,
    mentions: &[TypedMention],
    vocab: &Vocab,
    strategy: SpanStrategy,
    max_len: usize,
) -> Result<Vec<MentionInput>> {
    mentions
        .iter()
        .map(|tm| {
            let m = &tm.mention;
            let sentence = corpus
                .sentence(&m.story_id, m.sent_index)
                .ok_or_else(|| Error::Validation {
                    line: 0,
                    message: format!("mention {} has no sentence", m.describe()),
                })?;
            mention_input(vocab, sentence, m, strategy, max_len)
        })
        .collect()
}

fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(1e-15, 1.0 - 1e-15)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypingModel {
    pub labels: Vec<String>,
    pub dim: usize,
    pub strategy: SpanStrategy,
    pub threshold: f64,
    pub frozen: bool,
    /// One row per label.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypingPrediction {
    pub mention: Mention,
    pub probabilities: BTreeMap<String, f64>,
    /// Labels whose probability is strictly above the threshold.
    pub labels: Vec<String>,
}

impl TypingModel {
    /// All-zero weights and biases.
    pub fn zeros(labels: Vec<String>, dim: usize, strategy: SpanStrategy) -> Self {
        let n = labels.len();
        TypingModel {
            labels,
            dim,
            strategy,
            threshold: 0.5,
            frozen: true,
            weights: vec![vec![0.0; dim]; n],
            bias: vec![0.0; n],
        }
    }

    /// `σ(a_t · x + b_t)` for every label, in label order.
    pub fn probabilities(&self, x: ArrayView1<f64>) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::LengthMismatch(x.len(), self.dim));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(a, b)| sigmoid(a.iter().zip(x.iter()).map(|(a, x)| a * x).sum::<f64>() + b))
            .collect())
    }

    /// Labels strictly above the threshold.
    pub fn assign(&self, probabilities: &[f64]) -> LabelSet {
        self.labels
            .iter()
            .zip(probabilities)
            .filter(|(_, &p)| p > self.threshold)
            .map(|(l, _)| l.clone())
            .collect()
    }

    pub fn predict(&self, mention: &Mention, x: ArrayView1<f64>) -> Result<TypingPrediction> {
        let probs = self.probabilities(x)?;
        let labels = self.assign(&probs).into_iter().collect();
        Ok(TypingPrediction {
            mention: mention.clone(),
            probabilities: self.labels.iter().cloned().zip(probs).collect(),
            labels,
        })
    }

    pub fn predict_rows(&self, features: &Array2<f64>) -> Result<Vec<LabelSet>> {
        features
            .rows()
            .into_iter()
            .map(|r| Ok(self.assign(&self.probabilities(r)?)))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().flatten().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec_pretty(self).expect("model serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let model: TypingModel =
            serde_json::from_slice(&bytes).map_err(|e| Error::Parse { line: 0, source: e })?;
        if model.weights.len() != model.labels.len()
            || model.bias.len() != model.labels.len()
            || model.weights.iter().any(|w| w.len() != model.dim)
        {
            return Err(Error::Shape("typing model arrays do not match its labels".into()));
        }
        Ok(model)
    }
}

/// Mean binary cross-entropy of logits `z = X Aᵀ + b` against 0/1 targets,
/// with gradients for A, b and X.
pub fn bce_loss(
    features: &Array2<f64>,
    weights: &Array2<f64>,
    bias: &Array1<f64>,
    targets: &Array2<f64>,
) -> (f64, Array2<f64>, Array1<f64>, Array2<f64>) {
    let z = features.dot(&weights.t()) + bias;
    let count = z.len().max(1) as f64;
    let mut loss = 0.0;
    let mut dz = Array2::zeros(z.raw_dim());
    for ((&zi, &y), d) in z.iter().zip(targets.iter()).zip(dz.iter_mut()) {
        // log(1 + e^z) - y z, computed stably
        let softplus = if zi > 0.0 { zi + (-zi).exp().ln_1p() } else { zi.exp().ln_1p() };
        loss += (softplus - y * zi) / count;
        let p = if zi >= 0.0 { 1.0 / (1.0 + (-zi).exp()) } else { zi.exp() / (1.0 + zi.exp()) };
        *d = (p - y) / count;
    }
    let dw = dz.t().dot(features);
    let db = dz.sum_axis(Axis(0));
    let dx = dz.dot(weights);
    (loss, dw, db, dx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TypingConfig {
    pub strategy: SpanStrategy,
    pub threshold: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TypingConfig {
    fn default() -> Self {
        TypingConfig {
            strategy: SpanStrategy::HeadWord,
            threshold: 0.5,
            epochs: 40,
            batch_size: 32,
            optimizer: AdamWConfig {
                lr: 1e-2,
                weight_decay: 0.0,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypingEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_micro_f1: Option<f64>,
    pub val_macro_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TypingOutcome {
    pub model: TypingModel,
    /// The encoder matching `model`: unchanged when frozen.
    pub encoder: Encoder,
    pub best_epoch: usize,
    pub log: Vec<TypingEpoch>,
}

/// Sorted union of every label in `mentions`.
pub fn label_inventory(mentions: &[TypedMention]) -> Vec<String> {
    let set: BTreeSet<&String> = mentions.iter().flat_map(|m| &m.labels).collect();
    set.into_iter().cloned().collect()
}

/// 0/1 target matrix over `labels`; errors on a label outside it.
pub fn target_matrix(mentions: &[TypedMention], labels: &[String]) -> Result<Array2<f64>> {
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut y = Array2::zeros((mentions.len(), labels.len()));
    for (r, m) in mentions.iter().enumerate() {
        for l in &m.labels {
            let &c = index.get(l.as_str()).ok_or_else(|| Error::UnknownLabel(l.clone()))?;
            y[[r, c]] = 1.0;
        }
    }
    Ok(y)
}

fn gold_sets(mentions: &[TypedMention]) -> Vec<LabelSet> {
    mentions.iter().map(|m| m.labels.iter().cloned().collect()).collect()
}

/// Trains a linear head on fixed features. Returns the head of the epoch with
/// the best validation micro F1 (last epoch without validation data).
pub fn train_head(
    features: &Array2<f64>,
    targets: &Array2<f64>,
    labels: Vec<String>,
    validation: Option<(&Array2<f64>, &[LabelSet])>,
    config: &TypingConfig,
) -> Result<(TypingModel, Vec<TypingEpoch>, usize)> {
    if features.nrows() == 0 {
        return Err(Error::EmptyData("typing training set".into()));
    }
    if features.nrows() != targets.nrows() {
        return Err(Error::LengthMismatch(features.nrows(), targets.nrows()));
    }
    let (n, d, nl) = (features.nrows(), features.ncols(), labels.len());
    let mut model = TypingModel::zeros(labels, d, config.strategy);
    model.threshold = config.threshold;
    let mut params = vec![0.0; nl * d + nl];
    let mut decay = vec![true; nl * d];
    decay.extend(vec![false; nl]);
    let mut opt = AdamW::new(config.optimizer.clone(), decay);
    let mut rng = substream(config.seed, Purpose::Head);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Vec<f64>)> = None;

    let unpack = |params: &[f64], model: &mut TypingModel| {
        for l in 0..nl {
            model.weights[l].copy_from_slice(&params[l * d..(l + 1) * d]);
        }
        model.bias.copy_from_slice(&params[nl * d..]);
    };

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let x = features.select(Axis(0), chunk);
            let y = targets.select(Axis(0), chunk);
            let w = Array2::from_shape_vec((nl, d), params[..nl * d].to_vec()).expect("shape");
            let b = Array1::from(params[nl * d..].to_vec());
            let (loss, dw, db, _) = bce_loss(&x, &w, &b, &y);
            total += loss * chunk.len() as f64;
            let mut grads = dw.into_raw_vec_and_offset().0;
            grads.extend(db.iter());
            opt.step(&mut params, &grads);
        }
        unpack(&params, &mut model);
        let (vmi, vma) = match validation {
            Some((vx, vg)) => {
                let pred = model.predict_rows(vx)?;
                (Some(micro_f1(&pred, vg)?), Some(macro_f1(&pred, vg)?))
            }
            None => (None, None),
        };
        let score = vmi.unwrap_or(epoch as f64);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, params.clone()));
        }
        log.push(TypingEpoch {
            epoch,
            loss: total / n as f64,
            val_micro_f1: vmi,
            val_macro_f1: vma,
        });
    }
    let best_epoch = match best {
        Some((_, e, p)) => {
            unpack(&p, &mut model);
            e
        }
        None => 0,
    };
    Ok((model, log, best_epoch))
}

/// Trains a typing model on `train.typed_mentions`. With `frozen` the encoder
/// only supplies features; otherwise it is updated jointly with the head by
/// one optimizer.
pub fn train(
    train: &Corpus,
    validation: Option<&Corpus>,
    encoder: &Encoder,
    labels: Vec<String>,
    frozen: bool,
    config: &TypingConfig,
) -> Result<TypingOutcome> {
    let mentions = &train.typed_mentions;
    if mentions.is_empty() {
        return Err(Error::EmptyData("typing training set".into()));
    }
    let targets = target_matrix(mentions, &labels)?;
    let max_len = encoder.config.max_len;
    let inputs = corpus_inputs(train, mentions, &encoder.vocab, config.strategy, max_len)?;
    let val = match validation {
        Some(v) => Some((
            corpus_inputs(v, &v.typed_mentions, &encoder.vocab, config.strategy, max_len)?,
            gold_sets(&v.typed_mentions),
        )),
        None => None,
    };

    if frozen {
        let features = mention_embeddings(encoder, &inputs)?;
        let val_features = match &val {
            Some((vi, _)) => Some(mention_embeddings(encoder, vi)?),
            None => None,
        };
        let v = val_features.as_ref().zip(val.as_ref()).map(|(f, (_, g))| (f, g.as_slice()));
        let (model, log, best_epoch) = train_head(&features, &targets, labels, v, config)?;
        return Ok(TypingOutcome {
            model,
            encoder: encoder.clone(),
            best_epoch,
            log,
        });
    }
    fine_tune(encoder.clone(), &inputs, &targets, labels, val.as_ref(), config)
}

fn fine_tune(
    mut encoder: Encoder,
    inputs: &[MentionInput],
    targets: &Array2<f64>,
    labels: Vec<String>,
    val: Option<&(Vec<MentionInput>, Vec<LabelSet>)>,
    config: &TypingConfig,
) -> Result<TypingOutcome> {
    let (n, d, nl) = (inputs.len(), encoder.dim(), labels.len());
    let head_len = nl * d + nl;
    let mut head = vec![0.0; head_len];
    let mut decay = encoder.layout().decay_mask();
    decay.extend(vec![true; nl * d]);
    decay.extend(vec![false; nl]);
    let mut opt = AdamW::new(config.optimizer.clone(), decay);
    let mut rng = substream(config.seed, Purpose::Head);
    let mut order: Vec<usize> = (0..n).collect();
    let mut model = TypingModel::zeros(labels, d, config.strategy);
    model.threshold = config.threshold;
    model.frozen = false;
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, TypingModel, Encoder)> = None;
    let mut grads = encoder.zero_grads();
    let enc_len = encoder.num_params();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let seqs: Vec<Vec<TokenId>> = chunk.iter().map(|&i| inputs[i].ids.clone()).collect();
            let out = encoder.forward(&IdBatch::from_sequences(&seqs))?;
            let mut x = Array2::zeros((chunk.len(), d));
            for (r, &i) in chunk.iter().enumerate() {
                x.row_mut(r).assign(&out.embeddings.slice(s![r, inputs[i].read, ..]));
            }
            let y = targets.select(Axis(0), chunk);
            let w = Array2::from_shape_vec((nl, d), head[..nl * d].to_vec()).expect("shape");
            let b = Array1::from(head[nl * d..].to_vec());
            let (loss, dw, db, dx) = bce_loss(&x, &w, &b, &y);
            total += loss * chunk.len() as f64;

            let mut d_emb = Array3::<f64>::zeros(out.embeddings.raw_dim());
            for (r, &i) in chunk.iter().enumerate() {
                d_emb.slice_mut(s![r, inputs[i].read, ..]).assign(&dx.row(r));
            }
            grads.clear();
            encoder.backward(&out, &d_emb, &mut grads)?;
            let mut all = std::mem::take(&mut encoder.params);
            all.extend_from_slice(&head);
            let mut g = std::mem::replace(&mut grads, Gradients { data: Vec::new() }).data;
            g.extend(dw.iter());
            g.extend(db.iter());
            opt.step(&mut all, &g);
            g.truncate(enc_len);
            grads = Gradients { data: g };
            head.copy_from_slice(&all[enc_len..]);
            all.truncate(enc_len);
            encoder.params = all;
        }
        for l in 0..nl {
            model.weights[l].copy_from_slice(&head[l * d..(l + 1) * d]);
        }
        model.bias.copy_from_slice(&head[nl * d..]);
        let (vmi, vma) = match val {
            Some((vi, vg)) => {
                let pred = model.predict_rows(&mention_embeddings(&encoder, vi)?)?;
                (Some(micro_f1(&pred, vg)?), Some(macro_f1(&pred, vg)?))
            }
            None => (None, None),
        };
        let score = vmi.unwrap_or(epoch as f64);
        if best.as_ref().is_none_or(|(b, ..)| score > *b) {
            best = Some((score, epoch, model.clone(), encoder.clone()));
        }
        log.push(TypingEpoch {
            epoch,
            loss: total / n as f64,
            val_micro_f1: vmi,
            val_macro_f1: vma,
        });
    }
    let (best_epoch, model, encoder) = match best {
        Some((_, e, m, enc)) => (e, m, enc),
        None => (0, model, encoder),
    };
    Ok(TypingOutcome {
        model,
        encoder,
        best_epoch,
        log,
    })
}

/// Predictions for every typed mention of `corpus`.
pub fn predict_corpus(
    model: &TypingModel,
    encoder: &Encoder,
    corpus: &Corpus,
    mentions: &[TypedMention],
) -> Result<Vec<TypingPrediction>> {
    let inputs = corpus_inputs(corpus, mentions, &encoder.vocab, model.strategy, encoder.config.max_len)?;
    let features = mention_embeddings(encoder, &inputs)?;
    mentions
        .iter()
        .zip(features.rows())
        .map(|(m, x)| model.predict(&m.mention, x))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use ndarray::array;

    fn sentence(text: &str) -> Sentence {
        let words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        Sentence::new("s", 0, &words)
    }

    fn mention(start: usize, end: usize, head: usize) -> Mention {
        Mention {
            story_id: "s".into(),
            sent_index: 0,
            start,
            end,
            head,
        }
    }

    fn vocab() -> Vocab {
        Vocab::build("the patient in front of her smiled".split_whitespace(), 1)
    }

    fn encoder() -> Encoder {
        let config = EncoderConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 16,
            max_len: 24,
            ..Default::default()
        };
        Encoder::new(config, vocab()).unwrap()
    }

    #[test]
    fn head_word_reads_head_position() {
        let s = sentence("the patient in front of her smiled");
        let m = mention(0, 6, 1);
        let input = mention_input(&vocab(), &s, &m, SpanStrategy::HeadWord, 24).unwrap();
        assert_eq!(input.read, 2);
        assert_eq!(input.ids[input.read], vocab().id("patient"));
    }

    #[test]
    fn marker_and_mask_positions() {
        let v = vocab();
        let s = sentence("the patient in front of her smiled");
        let m = mention(0, 2, 1);
        let head = mention_input(&v, &s, &m, SpanStrategy::SpecialTokensHead, 24).unwrap();
        assert_eq!(head.ids[head.read], MENTION_OPEN);
        assert_eq!(head.ids[head.read + 1], v.id("patient"));
        assert_eq!(head.ids[head.read + 2], MENTION_CLOSE);
        let full = mention_input(&v, &s, &m, SpanStrategy::SpecialTokensFullSpan, 24).unwrap();
        assert_eq!(full.read, 1);
        assert_eq!(full.ids[4], MENTION_CLOSE);
        let mask = mention_input(&v, &s, &m, SpanStrategy::MaskToken, 24).unwrap();
        assert_eq!(mask.ids[mask.read], MASK);
        assert_eq!(mask.ids.len(), s.len() - 2 + 1 + 2);
        for st in [SpanStrategy::Prompt, SpanStrategy::MaskedTriple] {
            let p = mention_input(&v, &s, &m, st, 24).unwrap();
            assert_eq!(p.ids[p.read], MASK);
            assert_eq!(*p.ids.last().unwrap(), EOS);
        }
    }

    #[test]
    fn prompt_overflow_names_strategy() {
        let s = sentence("the patient in front of her smiled");
        let m = mention(0, 6, 1);
        let err = mention_input(&vocab(), &s, &m, SpanStrategy::Prompt, 12).unwrap_err();
        assert!(matches!(err, Error::PromptOverflow { strategy: "prompt", .. }));
    }

    #[test]
    fn embeddings_are_finite_for_every_strategy() {
        let enc = encoder();
        let s = sentence("the patient smiled");
        let m = mention(1, 2, 1);
        for st in SpanStrategy::ALL {
            let v = mention_embedding(&enc, &s, &m, st).unwrap();
            assert_eq!(v.len(), 8);
            assert!(v.iter().all(|x| x.is_finite()));
            assert_eq!(st.name().parse::<SpanStrategy>().unwrap(), st);
        }
    }

    #[test]
    fn batched_matches_single() {
        let enc = encoder();
        let s = sentence("the patient in front of her smiled");
        let m = mention(0, 2, 1);
        let single = mention_embedding(&enc, &s, &m, SpanStrategy::Prompt).unwrap();
        let inputs = vec![
            mention_input(&enc.vocab, &s, &mention(5, 6, 5), SpanStrategy::HeadWord, 24).unwrap(),
            mention_input(&enc.vocab, &s, &m, SpanStrategy::Prompt, 24).unwrap(),
        ];
        let batched = mention_embeddings(&enc, &inputs).unwrap();
        for (a, b) in single.iter().zip(batched.row(1)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_model_is_one_half_and_assigns_nothing() {
        let model = TypingModel::zeros(vec!["/a".into(), "/b".into()], 3, SpanStrategy::HeadWord);
        let p = model.probabilities(array![1.0, -2.0, 3.0].view()).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert!(model.assign(&p).is_empty());
    }

    #[test]
    fn saturated_bias_and_basis_vector() {
        let mut model = TypingModel::zeros(vec!["/a".into()], 3, SpanStrategy::HeadWord);
        model.bias[0] = 20.0;
        let p = model.probabilities(array![0.0, 0.0, 0.0].view()).unwrap();
        assert!(p[0] > 0.999);
        assert_eq!(model.assign(&p).len(), 1);
        model.bias[0] = 0.0;
        model.weights[0] = vec![1.0, 0.0, 0.0];
        let p = model.probabilities(array![2.0, 0.0, 0.0].view()).unwrap();
        assert!((p[0] - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-15);
        assert!((p[0] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn unknown_label_rejected() {
        let tm = TypedMention {
            mention: mention(0, 1, 0),
            labels: vec!["/x".into()],
            source: None,
        };
        assert!(matches!(
            target_matrix(&[tm], &["/a".to_string()]),
            Err(Error::UnknownLabel(_))
        ));
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = TypingModel::zeros(vec!["/a".into()], 2, SpanStrategy::Prompt);
        model.weights[0] = vec![0.1, -3.5];
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        assert_eq!(TypingModel::load(&path).unwrap(), model);
    }
}

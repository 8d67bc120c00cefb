//! Contrastive pre-training on coreference chains, plus the masked-LM
//! auxiliary loss.

mod batch;
mod infonce;
mod mlm;

pub use batch::{build_batch, ContrastiveSet, MlmTarget, PretrainBatch, TokenSlot};
pub use infonce::{cosine_matrix, info_nce, InfoNceOutput};
pub use mlm::{mlm_loss, MlmOutput};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Chain, Corpus, Story};
use crate::encoder::{Checkpoint, Encoder, Gradients, IdBatch, BOS, EOS};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{substream, Purpose};

macro_rules! serde_from_str {
    ($t:ty) => {
        impl std::str::FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                serde_json::from_value(serde_json::Value::String(s.to_string()))
                    .map_err(|_| Error::Config(format!("unknown {} '{s}'", stringify!($t))))
            }
        }
    };
}


#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    None,
    Head,
    FullSpan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeScope {
    DifferentStories,
    SameStory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenScope {
    AllSpanTokens,
    HeadOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    /// Negatives plus the positive itself.
    IncludePositive,
    /// Negatives plus the anchor (constant self-similarity).
    LiteralSelf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Contrastive loss plus masked-LM loss.
    Combined,
    /// Masked-LM loss only, on the same batches.
    MlmOnly,
}

serde_from_str!(MaskPolicy);
serde_from_str!(NegativeScope);
serde_from_str!(TokenScope);
serde_from_str!(DenominatorMode);
serde_from_str!(Objective);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub stories_per_batch: usize,
    pub temperature: f64,
    pub head_mask_prob: f64,
    pub mask_policy: MaskPolicy,
    pub negative_scope: NegativeScope,
    pub token_scope: TokenScope,
    pub mlm_mask_prob: f64,
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub denominator_mode: DenominatorMode,
    pub objective: Objective,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            stories_per_batch: 4,
            temperature: 0.05,
            head_mask_prob: 0.15,
            mask_policy: MaskPolicy::Head,
            negative_scope: NegativeScope::DifferentStories,
            token_scope: TokenScope::AllSpanTokens,
            mlm_mask_prob: 0.15,
            epochs: 25,
            optimizer: AdamWConfig::default(),
            seed: 0,
            denominator_mode: DenominatorMode::IncludePositive,
            objective: Objective::Combined,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0, 1], got {p}")))
            }
        };
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        prob("head_mask_prob", self.head_mask_prob)?;
        prob("mlm_mask_prob", self.mlm_mask_prob)?;
        if self.stories_per_batch == 0 {
            return Err(Error::Config("stories_per_batch must be positive".into()));
        }
        if self.negative_scope == NegativeScope::DifferentStories && self.stories_per_batch < 2 {
            return Err(Error::Config(
                "different_stories negatives need at least 2 stories per batch".into(),
            ));
        }
        if !(self.optimizer.lr >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// Loss of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub entity: f64,
    pub mlm: f64,
    pub total: f64,
    pub positive_pairs: usize,
    /// Negative-pool size for anchors of each story in the batch.
    pub negative_pool_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub entity_loss: f64,
    pub mlm_loss: f64,
    pub total: f64,
    pub val_loss: Option<f64>,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Checkpoint of the epoch with the lowest validation loss (training loss
    /// when there is no validation set).
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Computes the batch loss and, when `grads` is given, accumulates its
/// gradient.
pub fn batch_loss(
    encoder: &Encoder,
    batch: &PretrainBatch,
    config: &PretrainConfig,
    grads: Option<&mut Gradients>,
) -> Result<LossBreakdown> {
    let ids = batch.id_batch();
    let out = encoder.forward(&ids)?;
    let d = encoder.dim();
    let mut d_emb = Array3::<f64>::zeros(out.embeddings.raw_dim());
    let want_grad = grads.is_some();

    let (entity, positive_pairs) = match config.objective {
        Objective::MlmOnly => (0.0, 0),
        Objective::Combined => {
            let rows = gather(&out.embeddings, batch.tokens.iter().map(|s| (s.seq, s.pos)), d);
            let nce = info_nce(&rows, &batch.contrast, config.temperature, config.denominator_mode)?;
            if want_grad {
                scatter(&mut d_emb, batch.tokens.iter().map(|s| (s.seq, s.pos)), &nce.grad);
            }
            (nce.loss, nce.terms)
        }
    };

    let slots = || batch.mlm_targets.iter().map(|t| (t.seq, t.pos));
    let rows = gather(&out.embeddings, slots(), d);
    let logits = encoder.mlm_logits_rows(&rows);
    let targets: Vec<_> = batch.mlm_targets.iter().map(|t| t.id).collect();
    let mlm = mlm_loss(&logits, &targets)?;

    if let Some(grads) = grads {
        if !targets.is_empty() {
            let d_rows = encoder.mlm_backward_rows(&rows, &mlm.grad, grads)?;
            scatter(&mut d_emb, slots(), &d_rows);
        }
        encoder.backward(&out, &d_emb, grads)?;
    }
    Ok(LossBreakdown {
        entity,
        mlm: mlm.loss,
        total: entity + mlm.loss,
        positive_pairs,
        negative_pool_sizes: batch.negative_pool_sizes(),
    })
}

fn gather(emb: &Array3<f64>, slots: impl Iterator<Item = (usize, usize)>, d: usize) -> Array2<f64> {
    let slots: Vec<_> = slots.collect();
    let mut rows = Array2::zeros((slots.len(), d));
    for (r, (s, p)) in slots.into_iter().enumerate() {
        rows.row_mut(r).assign(&emb.slice(ndarray::s![s, p, ..]));
    }
    rows
}

fn scatter(d_emb: &mut Array3<f64>, slots: impl Iterator<Item = (usize, usize)>, rows: &Array2<f64>) {
    for (r, (s, p)) in slots.enumerate() {
        let mut dst = d_emb.slice_mut(ndarray::s![s, p, ..]);
        dst += &rows.row(r);
    }
}

/// Stories of `corpus` paired with their chains under `system`, dropping
/// stories without chains.
pub fn chained_stories<'a>(corpus: &'a Corpus, system: &str) -> Result<Vec<(&'a Story, &'a [Chain])>> {
    let ann = corpus
        .coref_by_name(system)
        .ok_or_else(|| Error::MissingCoref(system.to_string()))?;
    Ok(corpus
        .stories
        .iter()
        .filter_map(|s| {
            let chains = ann.chains_for(&s.id);
            (!chains.is_empty()).then_some((s, chains))
        })
        .collect())
}

/// Splits `order` into groups of `k`, topping up a short final group with
/// stories from the start of the order.
fn group(order: &[usize], k: usize) -> Vec<Vec<usize>> {
    let k = k.min(order.len());
    let mut groups: Vec<Vec<usize>> = order.chunks(k).map(<[usize]>::to_vec).collect();
    if let Some(last) = groups.last_mut() {
        let mut i = 0;
        while last.len() < k {
            if !last.contains(&order[i]) {
                last.push(order[i]);
            }
            i += 1;
        }
    }
    groups
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Mean validation loss over fixed batches with fixed masks.
pub fn validation_loss(
    encoder: &Encoder,
    stories: &[(&Story, &[Chain])],
    config: &PretrainConfig,
) -> Result<f64> {
    let mut rng = substream(config.seed, Purpose::Validation);
    let order: Vec<usize> = (0..stories.len()).collect();
    let mut totals = Vec::new();
    for g in group(&order, config.stories_per_batch) {
        let members: Vec<_> = g.iter().map(|&i| stories[i]).collect();
        let batch = build_batch(&members, &encoder.vocab, config, &mut rng)?;
        totals.push(batch_loss(encoder, &batch, config, None)?.total);
    }
    Ok(mean(&totals))
}

/// Trains `encoder` on the chains of coreference system `system` in `train`.
///
/// `on_epoch` sees every epoch's log line and checkpoint, in order.
pub fn pretrain(
    mut encoder: Encoder,
    train: &Corpus,
    validation: Option<&Corpus>,
    system: &str,
    config: &PretrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Checkpoint) -> Result<()>,
) -> Result<PretrainOutcome> {
    config.validate()?;
    let pool = chained_stories(train, system)?;
    if pool.is_empty() {
        return Err(Error::NoPositivePairs);
    }
    if config.negative_scope == NegativeScope::DifferentStories && pool.len() < 2 {
        return Err(Error::Config(format!(
            "only {} story with chains; cross-story negatives need 2",
            pool.len()
        )));
    }
    let val_pool = match validation {
        Some(v) => Some(chained_stories(v, system)?).filter(|p| !p.is_empty()),
        None => None,
    };

    let mut shuffle = substream(config.seed, Purpose::Shuffle);
    let mut masking = substream(config.seed, Purpose::Masking);
    let mut opt = AdamW::new(config.optimizer.clone(), encoder.layout().decay_mask());
    let mut grads = encoder.zero_grads();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut order: Vec<usize> = (0..pool.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let (mut entity, mut mlm, mut total) = (Vec::new(), Vec::new(), Vec::new());
        for g in group(&order, config.stories_per_batch) {
            let members: Vec<_> = g.iter().map(|&i| pool[i]).collect();
            let batch = build_batch(&members, &encoder.vocab, config, &mut masking)?;
            grads.clear();
            let loss = batch_loss(&encoder, &batch, config, Some(&mut grads))?;
            opt.step(&mut encoder.params, &grads.data);
            entity.push(loss.entity);
            mlm.push(loss.mlm);
            total.push(loss.total);
        }
        if !encoder.all_finite() {
            return Err(Error::Config(format!("parameters diverged in epoch {epoch}")));
        }
        let val_loss = match &val_pool {
            Some(p) => Some(validation_loss(&encoder, p, config)?),
            None => None,
        };
        let entry = EpochLog {
            epoch,
            entity_loss: mean(&entity),
            mlm_loss: mean(&mlm),
            total: mean(&total),
            val_loss,
            steps: opt.step_count(),
        };
        log::info!(
            "pretrain epoch {epoch}: total {:.4} val {:?}",
            entry.total,
            entry.val_loss
        );
        let ckpt = Checkpoint::new(encoder.clone(), opt.step_count(), &shuffle);
        on_epoch(&entry, &ckpt)?;
        let score = entry.val_loss.unwrap_or(entry.total);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, ckpt));
        }
        log.push(entry);
    }

    let last = Checkpoint::new(encoder, opt.step_count(), &shuffle);
    let (best_epoch, best) = match best {
        Some((_, e, c)) => (e, c),
        None => (0, last.clone()),
    };
    Ok(PretrainOutcome {
        best,
        best_epoch,
        last,
        log,
    })
}

/// Mean cosine between head embeddings of co-referring mentions and of
/// mentions of different entities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainSeparation {
    pub within: f64,
    pub across: f64,
    pub within_pairs: usize,
    pub across_pairs: usize,
}

/// Measures [`ChainSeparation`] for the chains of `system` in `corpus`, with
/// mentions read in unmasked sentences.
pub fn chain_separation(encoder: &Encoder, corpus: &Corpus, system: &str) -> Result<ChainSeparation> {
    let pool = chained_stories(corpus, system)?;
    let mut vectors: Vec<Vec<f64>> = Vec::new();
    let mut entity: Vec<usize> = Vec::new();
    let mut next = 0;
    for (story, chains) in pool {
        let seqs: Vec<Vec<_>> = story
            .sentences
            .iter()
            .map(|s| {
                let mut ids = vec![BOS];
                ids.extend(encoder.vocab.encode(s.words()));
                ids.push(EOS);
                ids
            })
            .collect();
        let out = encoder.forward(&IdBatch::from_sequences(&seqs))?;
        for chain in chains {
            for m in chain {
                let v = out.embeddings.slice(ndarray::s![m.sent_index, m.head + 1, ..]);
                vectors.push(v.to_vec());
                entity.push(next);
            }
            next += 1;
        }
    }
    let emb = Array2::from_shape_vec(
        (vectors.len(), encoder.dim()),
        vectors.into_iter().flatten().collect(),
    )
    .map_err(|e| Error::Shape(e.to_string()))?;
    let cos = cosine_matrix(&emb);
    let (mut within, mut across) = (Vec::new(), Vec::new());
    for i in 0..entity.len() {
        for j in i + 1..entity.len() {
            if entity[i] == entity[j] {
                within.push(cos[[i, j]]);
            } else {
                across.push(cos[[i, j]]);
            }
        }
    }
    Ok(ChainSeparation {
        within: mean(&within),
        across: mean(&across),
        within_pairs: within.len(),
        across_pairs: across.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, Vocab};
    use crate::synth::{generate, SynthConfig};

    fn tiny_setup(n: usize) -> (Corpus, Encoder) {
        let synth = generate(&SynthConfig {
            n_stories: n,
            ..Default::default()
        })
        .unwrap();
        let corpus = synth.corpus;
        let vocab = Vocab::build(corpus.sentences().flat_map(|s| s.words()), 1);
        let enc = Encoder::new(
            EncoderConfig {
                dim: 16,
                layers: 1,
                heads: 2,
                ff_dim: 32,
                max_len: 32,
                ..Default::default()
            },
            vocab,
        )
        .unwrap();
        (corpus, enc)
    }

    fn quick() -> PretrainConfig {
        PretrainConfig {
            epochs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn grouping_tops_up_last_batch() {
        let groups = group(&[4, 2, 0, 1, 3], 2);
        assert_eq!(groups, vec![vec![4, 2], vec![0, 1], vec![3, 4]]);
        assert_eq!(group(&[1], 4), vec![vec![1]]);
    }

    #[test]
    fn config_validation() {
        assert!(PretrainConfig::default().validate().is_ok());
        let bad = PretrainConfig {
            stories_per_batch: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let same = PretrainConfig {
            negative_scope: NegativeScope::SameStory,
            ..bad
        };
        assert!(same.validate().is_ok());
        let tau = PretrainConfig {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(tau.validate().is_err());
        assert!("full_span".parse::<MaskPolicy>().unwrap() == MaskPolicy::FullSpan);
        assert!("sideways".parse::<MaskPolicy>().is_err());
    }

    #[test]
    fn total_is_sum_of_parts() {
        let (corpus, enc) = tiny_setup(6);
        let pool = chained_stories(&corpus, "sysA").unwrap();
        let mut rng = substream(0, Purpose::Masking);
        let batch = build_batch(&pool[..4], &enc.vocab, &PretrainConfig::default(), &mut rng).unwrap();
        let loss = batch_loss(&enc, &batch, &PretrainConfig::default(), None).unwrap();
        assert_eq!(loss.total, loss.entity + loss.mlm);
        assert!(loss.positive_pairs > 0);
        assert_eq!(loss.negative_pool_sizes.len(), 4);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (corpus, enc) = tiny_setup(8);
        let before = enc.params.clone();
        let mut config = quick();
        config.optimizer.lr = 0.0;
        config.optimizer.weight_decay = 0.0;
        let out = pretrain(enc, &corpus, None, "sysA", &config, |_, _| Ok(())).unwrap();
        assert_eq!(out.last.encoder.params, before);
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let (corpus, enc) = tiny_setup(8);
        let a = pretrain(enc.clone(), &corpus, Some(&corpus), "sysA", &quick(), |_, _| Ok(())).unwrap();
        let b = pretrain(enc, &corpus, Some(&corpus), "sysA", &quick(), |_, _| Ok(())).unwrap();
        assert_eq!(a.last.to_bytes(), b.last.to_bytes());
        assert_eq!(a.log, b.log);
        assert!(a.log.iter().all(|e| e.val_loss.is_some()));
    }

    #[test]
    fn hook_sees_every_epoch() {
        let (corpus, enc) = tiny_setup(8);
        let mut seen = Vec::new();
        pretrain(enc, &corpus, None, "sysA", &quick(), |e, c| {
            seen.push((e.epoch, c.step));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen.len(), 2);
        assert_eq!(seen[0].0, 1);
        assert!(seen[1].1 > seen[0].1);
    }

    #[test]
    fn missing_system_or_chains_errors() {
        let (corpus, enc) = tiny_setup(4);
        assert!(pretrain(enc.clone(), &corpus, None, "nope", &quick(), |_, _| Ok(())).is_err());
        let mut bare = corpus.clone();
        let mut empty = bare.coref_by_name("sysA").unwrap().clone();
        empty.chains.clear();
        bare.set_coref(empty);
        assert!(matches!(
            pretrain(enc, &bare, None, "sysA", &quick(), |_, _| Ok(())),
            Err(Error::NoPositivePairs)
        ));
    }
}

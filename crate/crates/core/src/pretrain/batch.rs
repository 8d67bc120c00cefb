use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{MaskPolicy, NegativeScope, PretrainConfig, TokenScope};
use crate::corpus::{Chain, Story};
use crate::encoder::{IdBatch, TokenId, Vocab, BOS, EOS, MASK};
use crate::error::{Error, Result};

/// Which tokens each anchor is contrasted with.
///
/// Token `t` has story `story[t]` and chain `chain[t]` (chain ids are unique
/// across the batch). Its positives are the other tokens of its chain. Its
/// negatives are every token of other stories under
/// [`NegativeScope::DifferentStories`], or the tokens of its own story that
/// belong to other chains under [`NegativeScope::SameStory`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveSet {
    pub story: Vec<usize>,
    pub chain: Vec<usize>,
    pub scope: NegativeScope,
}

impl ContrastiveSet {
    pub fn len(&self) -> usize {
        self.story.len()
    }

    pub fn is_empty(&self) -> bool {
        self.story.is_empty()
    }

    pub fn positives(&self, t: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&j| j != t && self.chain[j] == self.chain[t])
    }

    pub fn negatives(&self, t: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&j| match self.scope {
            NegativeScope::DifferentStories => self.story[j] != self.story[t],
            NegativeScope::SameStory => {
                self.story[j] == self.story[t] && self.chain[j] != self.chain[t]
            }
        })
    }
}

/// Position of a contributing token inside the batch's id matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSlot {
    pub seq: usize,
    pub pos: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlmTarget {
    pub seq: usize,
    pub pos: usize,
    pub id: TokenId,
}

/// One contrastive mini-batch built from `k` stories.
#[derive(Debug, Clone)]
pub struct PretrainBatch {
    pub story_ids: Vec<String>,
    /// `[BOS] sentence [EOS]` for every sentence of every story, after masking.
    pub sequences: Vec<Vec<TokenId>>,
    /// Contributing tokens T, aligned with `contrast`.
    pub tokens: Vec<TokenSlot>,
    pub contrast: ContrastiveSet,
    pub mlm_targets: Vec<MlmTarget>,
    /// Mentions in some chain (`|X_i|` summed over stories).
    pub num_mentions: usize,
    /// Mention heads that were replaced with `[MASK]`.
    pub masked_heads: usize,
}

impl PretrainBatch {
    pub fn id_batch(&self) -> IdBatch {
        IdBatch::from_sequences(&self.sequences)
    }

    /// Token counts per story, `|T_i|`.
    pub fn story_token_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.story_ids.len()];
        for &s in &self.contrast.story {
            counts[s] += 1;
        }
        counts
    }

    /// Negative-pool size for an anchor of each story.
    pub fn negative_pool_sizes(&self) -> Vec<usize> {
        (0..self.story_ids.len())
            .map(|i| {
                self.contrast
                    .story
                    .iter()
                    .position(|&s| s == i)
                    .map(|t| self.contrast.negatives(t).count())
                    .unwrap_or(0)
            })
            .collect()
    }
}

/// Builds a batch from stories paired with their chains.
pub fn build_batch(
    stories: &[(&Story, &[Chain])],
    vocab: &Vocab,
    config: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PretrainBatch> {
    if stories.iter().all(|(_, chains)| chains.is_empty()) {
        return Err(Error::NoPositivePairs);
    }
    let mut batch = PretrainBatch {
        story_ids: Vec::with_capacity(stories.len()),
        sequences: Vec::new(),
        tokens: Vec::new(),
        contrast: ContrastiveSet {
            story: Vec::new(),
            chain: Vec::new(),
            scope: config.negative_scope,
        },
        mlm_targets: Vec::new(),
        num_mentions: 0,
        masked_heads: 0,
    };
    let mut next_chain = 0;
    for (si, (story, chains)) in stories.iter().enumerate() {
        batch.story_ids.push(story.id.clone());
        let base = batch.sequences.len();
        let mut in_mention: Vec<Vec<bool>> = Vec::with_capacity(story.sentences.len());
        for sentence in &story.sentences {
            let mut ids = Vec::with_capacity(sentence.len() + 2);
            ids.push(BOS);
            ids.extend(vocab.encode(sentence.words()));
            ids.push(EOS);
            in_mention.push(vec![false; ids.len()]);
            batch.sequences.push(ids);
        }
        for chain in chains.iter() {
            for m in chain {
                batch.num_mentions += 1;
                let seq = base + m.sent_index;
                let (start, end, head) = (m.start + 1, m.end + 1, m.head + 1);
                for p in start..end {
                    in_mention[m.sent_index][p] = true;
                }
                if config.mask_policy != MaskPolicy::None && rng.gen::<f64>() < config.head_mask_prob {
                    match config.mask_policy {
                        MaskPolicy::Head => batch.sequences[seq][head] = MASK,
                        MaskPolicy::FullSpan => {
                            batch.sequences[seq][start..end].iter_mut().for_each(|id| *id = MASK)
                        }
                        MaskPolicy::None => unreachable!(),
                    }
                    batch.masked_heads += 1;
                }
                let positions: Vec<usize> = match config.token_scope {
                    TokenScope::AllSpanTokens => (start..end).collect(),
                    TokenScope::HeadOnly => vec![head],
                };
                for pos in positions {
                    batch.tokens.push(TokenSlot { seq, pos });
                    batch.contrast.story.push(si);
                    batch.contrast.chain.push(next_chain);
                }
            }
            next_chain += 1;
        }
        for (s, flags) in in_mention.iter().enumerate() {
            let seq = base + s;
            let len = flags.len();
            for (pos, &inside) in flags.iter().enumerate().take(len - 1).skip(1) {
                if !inside && rng.gen::<f64>() < config.mlm_mask_prob {
                    let id = batch.sequences[seq][pos];
                    batch.mlm_targets.push(MlmTarget { seq, pos, id });
                    batch.sequences[seq][pos] = MASK;
                }
            }
        }
    }
    Ok(batch)
}

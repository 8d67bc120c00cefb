//! End-to-end runs: synthetic corpus, pre-training, typing probe, report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::consensus::consensus;
use crate::corpus::Corpus;
use crate::encoder::{Encoder, EncoderConfig, Vocab};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, LabelSet};
use crate::pretrain::{pretrain, EpochLog, MaskPolicy, NegativeScope, Objective, PretrainConfig};
use crate::rng::derive_seed;
use crate::synth::{generate, SynthConfig};
use crate::typing::{label_inventory, predict_corpus, train, SpanStrategy, TypingConfig, TypingEpoch, TypingPrediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorefSource {
    #[serde(rename = "sysA")]
    SysA,
    #[serde(rename = "sysB")]
    SysB,
    Consensus,
    Gold,
}

impl CorefSource {
    /// Annotation name inside a prepared corpus.
    pub fn system_name(self) -> String {
        match self {
            CorefSource::SysA => "sysA".into(),
            CorefSource::SysB => "sysB".into(),
            CorefSource::Consensus => crate::consensus::consensus_name("sysA", "sysB"),
            CorefSource::Gold => "gold".into(),
        }
    }
}

impl std::str::FromStr for CorefSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sysA" => Ok(CorefSource::SysA),
            "sysB" => Ok(CorefSource::SysB),
            "consensus" => Ok(CorefSource::Consensus),
            "gold" => Ok(CorefSource::Gold),
            _ => Err(Error::Config(format!("unknown coref source '{s}'"))),
        }
    }
}

/// How the encoder is prepared before the typing probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Randomly initialised encoder.
    NoPretraining,
    MlmOnly,
    Contrastive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub typing: TypingConfig,
    pub coref_source: CorefSource,
    pub variant: Variant,
    pub frozen: bool,
    /// Leading fraction of stories used for training; the next
    /// `validation_fraction` validate and the rest are the test split.
    pub train_fraction: f64,
    pub validation_fraction: f64,
    /// Model seed. Encoder init, pre-training and typing seeds derive from it;
    /// the corpus keeps `synth.seed`.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: SynthConfig::default(),
            encoder: EncoderConfig {
                dim: 32,
                layers: 2,
                heads: 4,
                ff_dim: 64,
                max_len: 48,
                ..Default::default()
            },
            pretrain: PretrainConfig {
                epochs: 20,
                optimizer: crate::optim::AdamWConfig {
                    lr: 5e-3,
                    ..Default::default()
                },
                ..Default::default()
            },
            typing: TypingConfig::default(),
            coref_source: CorefSource::Consensus,
            variant: Variant::Contrastive,
            frozen: true,
            train_fraction: 0.7,
            validation_fraction: 0.15,
            seed: 0,
        }
    }
}

/// Adds the consensus of `sysA` and `sysB` to `corpus` when both exist.
pub fn add_consensus(corpus: &mut Corpus) {
    if let (Some(a), Some(b)) = (corpus.coref_by_name("sysA"), corpus.coref_by_name("sysB")) {
        let merged = consensus(a, b);
        corpus.set_coref(merged);
    }
}

/// Synthetic corpus with `sysA`, `sysB`, their consensus and the gold chains.
pub fn prepare_corpus(config: &SynthConfig) -> Result<Corpus> {
    let synth = generate(config)?;
    let mut corpus = synth.corpus;
    corpus.set_coref(synth.gold_chains);
    add_consensus(&mut corpus);
    Ok(corpus)
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Corpus,
    pub validation: Corpus,
    pub test: Corpus,
}

/// Splits stories in order into train, validation and test.
pub fn split_corpus(corpus: &Corpus, train_fraction: f64, validation_fraction: f64) -> Result<Splits> {
    if !(0.0..=1.0).contains(&train_fraction)
        || !(0.0..=1.0).contains(&validation_fraction)
        || train_fraction + validation_fraction > 1.0
    {
        return Err(Error::Config(format!(
            "bad split fractions {train_fraction} / {validation_fraction}"
        )));
    }
    let ids = corpus.story_ids();
    let n = ids.len();
    let a = (n as f64 * train_fraction).round() as usize;
    let b = (a + (n as f64 * validation_fraction).round() as usize).min(n);
    Ok(Splits {
        train: corpus.subset(&ids[..a]),
        validation: corpus.subset(&ids[a..b]),
        test: corpus.subset(&ids[b..]),
    })
}

/// Vocabulary of the training stories.
pub fn build_vocab(train: &Corpus) -> Vocab {
    Vocab::build(train.sentences().flat_map(|s| s.words()), 1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub test: EvalReport,
    pub validation_micro_f1: Option<f64>,
    pub pretrain_log: Vec<EpochLog>,
    pub typing_log: Vec<TypingEpoch>,
    pub encoder_digest: String,
    pub predictions: Vec<TypingPrediction>,
}

/// Runs pre-training (per `variant`) and the typing probe on prepared splits.
pub fn run_on_splits(splits: &Splits, config: &ExperimentConfig) -> Result<ExperimentResult> {
    let vocab = build_vocab(&splits.train);
    let encoder_config = EncoderConfig {
        seed: derive_seed(config.seed, 1),
        ..config.encoder.clone()
    };
    let mut encoder = Encoder::new(encoder_config, vocab)?;
    let mut pretrain_log = Vec::new();
    if config.variant != Variant::NoPretraining {
        let pc = PretrainConfig {
            seed: derive_seed(config.seed, 2),
            objective: match config.variant {
                Variant::MlmOnly => Objective::MlmOnly,
                _ => Objective::Combined,
            },
            ..config.pretrain.clone()
        };
        let out = pretrain(
            encoder,
            &splits.train,
            Some(&splits.validation),
            &config.coref_source.system_name(),
            &pc,
            |_, _| Ok(()),
        )?;
        encoder = out.best.encoder;
        pretrain_log = out.log;
    }

    let tc = TypingConfig {
        seed: derive_seed(config.seed, 3),
        ..config.typing.clone()
    };
    let mut all = splits.train.typed_mentions.clone();
    all.extend(splits.validation.typed_mentions.iter().cloned());
    all.extend(splits.test.typed_mentions.iter().cloned());
    let labels = label_inventory(&all);
    let typed = train(&splits.train, Some(&splits.validation), &encoder, labels, config.frozen, &tc)?;
    let validation_micro_f1 = typed
        .log
        .iter()
        .find(|e| e.epoch == typed.best_epoch)
        .and_then(|e| e.val_micro_f1);

    let predictions = predict_corpus(&typed.model, &typed.encoder, &splits.test, &splits.test.typed_mentions)?;
    let pred: Vec<LabelSet> = predictions.iter().map(|p| p.labels.iter().cloned().collect()).collect();
    let gold: Vec<LabelSet> = splits
        .test
        .typed_mentions
        .iter()
        .map(|m| m.labels.iter().cloned().collect())
        .collect();
    Ok(ExperimentResult {
        test: EvalReport::typing(&pred, &gold)?,
        validation_micro_f1,
        pretrain_log,
        typing_log: typed.log,
        encoder_digest: typed.encoder.digest(),
        predictions,
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let corpus = prepare_corpus(&config.synth)?;
    let splits = split_corpus(&corpus, config.train_fraction, config.validation_fraction)?;
    run_on_splits(&splits, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    SpanStrategy,
    NegativeScope,
    MaskPolicy,
    CorefSource,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::SpanStrategy => "span_strategy",
            AblationAxis::NegativeScope => "negative_scope",
            AblationAxis::MaskPolicy => "mask_policy",
            AblationAxis::CorefSource => "coref_source",
        }
    }

    pub fn values(self) -> Vec<&'static str> {
        match self {
            AblationAxis::SpanStrategy => SpanStrategy::ALL.iter().map(|s| s.name()).collect(),
            AblationAxis::NegativeScope => vec!["different_stories", "same_story"],
            AblationAxis::MaskPolicy => vec!["none", "head", "full_span"],
            AblationAxis::CorefSource => vec!["sysA", "sysB", "consensus"],
        }
    }

    fn apply(self, value: &str, config: &mut ExperimentConfig) -> Result<()> {
        match self {
            AblationAxis::SpanStrategy => config.typing.strategy = value.parse()?,
            AblationAxis::NegativeScope => config.pretrain.negative_scope = value.parse::<NegativeScope>()?,
            AblationAxis::MaskPolicy => config.pretrain.mask_policy = value.parse::<MaskPolicy>()?,
            AblationAxis::CorefSource => config.coref_source = value.parse()?,
        }
        Ok(())
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            AblationAxis::SpanStrategy,
            AblationAxis::NegativeScope,
            AblationAxis::MaskPolicy,
            AblationAxis::CorefSource,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| Error::UnknownAxis(s.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    /// Axis name to value for this cell.
    pub cell: BTreeMap<String, String>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub axes: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn table(&self) -> String {
        let mut out = String::new();
        for a in &self.axes {
            out.push_str(&format!("{a:<26}"));
        }
        out.push_str(&format!("{:>10}{:>10}\n", "micro_f1", "macro_f1"));
        for r in &self.rows {
            for a in &self.axes {
                out.push_str(&format!("{:<26}", r.cell[a]));
            }
            out.push_str(&format!("{:>10.4}{:>10.4}\n", r.report.micro_f1, r.report.macro_f1));
        }
        out
    }
}

/// Runs every combination of the axes' values with the base seed. With no
/// axes this is one baseline run.
pub fn ablate(base: &ExperimentConfig, axes: &[AblationAxis]) -> Result<AblationTable> {
    let mut axes = axes.to_vec();
    axes.dedup();
    let corpus = prepare_corpus(&base.synth)?;
    let splits = split_corpus(&corpus, base.train_fraction, base.validation_fraction)?;
    let mut cells: Vec<Vec<(AblationAxis, &str)>> = vec![Vec::new()];
    for &axis in &axes {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                axis.values().into_iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((axis, v));
                    c
                })
            })
            .collect();
    }
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut config = base.clone();
        for &(axis, value) in &cell {
            axis.apply(value, &mut config)?;
        }
        let result = run_on_splits(&splits, &config)?;
        log::info!("ablation cell {cell:?}: micro {:.4}", result.test.micro_f1);
        rows.push(AblationRow {
            cell: cell.iter().map(|(a, v)| (a.name().to_string(), v.to_string())).collect(),
            report: result.test,
        });
    }
    Ok(AblationTable {
        axes: axes.iter().map(|a| a.name().to_string()).collect(),
        rows,
    })
}

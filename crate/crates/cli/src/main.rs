use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use corefenc::consensus::{consensus_with, MatchMode};
use corefenc::corpus::{load_corpus, save_corpus, write_typed_mentions, Corpus, Mention, TypedMention};
use corefenc::encoder::{Checkpoint, Encoder, EncoderConfig};
use corefenc::eval::{EvalReport, LabelSet, TypedSpan};
use corefenc::pipeline::{ablate, build_vocab, split_corpus, AblationAxis, ExperimentConfig, Splits};
use corefenc::pretrain::{pretrain, PretrainConfig};
use corefenc::rng::derive_seed;
use corefenc::spandet::{gold_typed_spans, predict_spans, span_label, train_tagger, TaggerConfig};
use corefenc::synth::{generate, SynthConfig};
use corefenc::typing::{label_inventory, predict_corpus, train, SpanStrategy, TypingConfig};

#[derive(Parser)]
#[command(name = "corefenc", version, about = "Coreference-supervised entity encoder pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct SplitArgs {
    /// Leading fraction of stories used for training.
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
    /// Fraction after the training stories used for validation; the rest is test.
    #[arg(long, default_value_t = 0.15)]
    validation_fraction: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with two noisy coreference systems.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add the consensus of two coreference systems to a corpus.
    MergeCoref {
        #[arg(long)]
        corpus: PathBuf,
        /// Two system names, comma separated.
        #[arg(long, default_value = "sysA,sysB", value_parser = parse_pair)]
        systems: (String, String),
        #[arg(long = "match", default_value = "exact", value_parser = parse::<MatchMode>)]
        match_mode: MatchMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pre-training on the training split.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        /// Coreference system name; `consensus` picks the corpus's consensus annotation.
        #[arg(long, default_value = "consensus")]
        coref: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a typing head and predict the test split.
    TrainTyping {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse::<SpanStrategy>)]
        strategy: Option<SpanStrategy>,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        frozen: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a span tagger and predict the test split.
    TrainSpan {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        frozen: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against gold typed mentions.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, value_parser = ["typing", "span"])]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full pipeline over a grid of settings.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Any of span_strategy, negative_scope, mask_policy, coref_source.
        #[arg(long, value_delimiter = ',', value_parser = parse::<AblationAxis>)]
        axes: Vec<AblationAxis>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_pair(s: &str) -> std::result::Result<(String, String), String> {
    match s.split(',').collect::<Vec<_>>().as_slice() {
        [a, b] if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
        _ => Err(format!("expected two comma-separated system names, got '{s}'")),
    }
}

fn parse<T: FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    config: Value,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
    duration_secs: f64,
}

fn digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

struct Run {
    name: &'static str,
    start: Instant,
    out: PathBuf,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
}

impl Run {
    fn new(name: &'static str, out: &Path, inputs: &[&Path]) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Run {
            name,
            start: Instant::now(),
            out: out.to_path_buf(),
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            artifacts: Vec::new(),
        })
    }

    fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    fn artifact(&mut self, path: PathBuf) {
        self.artifacts.push(path);
    }

    fn write_json(&mut self, file: &str, value: &impl Serialize) -> Result<()> {
        let path = self.path(file);
        fs::write(&path, serde_json::to_vec_pretty(value)?)?;
        self.artifact(path);
        Ok(())
    }

    fn finish(self, config: Value, seed: Option<u64>) -> Result<()> {
        let digests = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            paths.iter().map(|p| Ok((p.display().to_string(), digest(p)?))).collect()
        };
        let manifest = RunManifest {
            subcommand: self.name.to_string(),
            config,
            seed,
            inputs: digests(&self.inputs)?,
            artifacts: digests(&self.artifacts)?,
            duration_secs: self.start.elapsed().as_secs_f64(),
        };
        fs::write(self.out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        emit(json!({"event": "done", "subcommand": self.name, "artifacts": manifest.artifacts}));
        Ok(())
    }
}

fn emit(value: Value) {
    println!("{value}");
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn split(corpus: &Corpus, args: &SplitArgs) -> Result<Splits> {
    Ok(split_corpus(corpus, args.train_fraction, args.validation_fraction)?)
}

/// `consensus` resolves to the corpus's single consensus annotation.
fn resolve_system(corpus: &Corpus, name: &str) -> Result<String> {
    if corpus.coref_by_name(name).is_some() {
        return Ok(name.to_string());
    }
    if name == "consensus" {
        let found: Vec<&str> = corpus
            .coref
            .iter()
            .map(|a| a.system_name.as_str())
            .filter(|n| n.starts_with("consensus("))
            .collect();
        match found.as_slice() {
            [one] => return Ok(one.to_string()),
            [] => bail!("corpus has no consensus annotation; run merge-coref first"),
            _ => bail!("corpus has several consensus annotations: {}", found.join(", ")),
        }
    }
    bail!("corpus has no coreference system named '{name}'")
}

fn write_mentions(path: &Path, mentions: &[TypedMention]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_typed_mentions(mentions, BufWriter::new(file))?;
    Ok(())
}

fn with_source(mentions: &[TypedMention], source: &str) -> Vec<TypedMention> {
    mentions
        .iter()
        .map(|m| TypedMention {
            source: Some(source.to_string()),
            ..m.clone()
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct PretrainFile {
    encoder: EncoderConfig,
    pretrain: PretrainConfig,
}

/// Same defaults as the experiment pipeline.
impl Default for PretrainFile {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        PretrainFile {
            encoder: e.encoder,
            pretrain: e.pretrain,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, seed, out } => {
            let mut cfg: SynthConfig = read_json(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let inputs: Vec<&Path> = config.iter().map(PathBuf::as_path).collect();
            let mut run = Run::new("synth", &out, &inputs)?;
            let synth = generate(&cfg)?;
            let mut corpus = synth.corpus;
            corpus.set_coref(synth.gold_chains);
            let path = run.path("corpus.jsonl");
            save_corpus(&corpus, &path)?;
            run.artifact(path);
            emit(json!({"event": "synth", "stories": corpus.stories.len(), "mentions": corpus.typed_mentions.len()}));
            run.finish(serde_json::to_value(&cfg)?, Some(cfg.seed))
        }
        Command::MergeCoref {
            corpus: input,
            systems,
            match_mode,
            out,
        } => {
            let mut run = Run::new("merge-coref", &out, &[&input])?;
            let mut corpus = load_corpus(&input)?;
            let get = |n: &str| {
                corpus
                    .coref_by_name(n)
                    .with_context(|| format!("corpus has no coreference system named '{n}'"))
            };
            let merged = consensus_with(get(&systems.0)?, get(&systems.1)?, match_mode);
            let name = merged.system_name.clone();
            let chains = merged.num_chains();
            corpus.set_coref(merged);
            let path = run.path("corpus.jsonl");
            save_corpus(&corpus, &path)?;
            run.artifact(path);
            emit(json!({"event": "merge-coref", "system": name, "chains": chains}));
            let mode = match match_mode {
                MatchMode::Exact => "exact",
                MatchMode::Head => "head",
            };
            run.finish(json!({"systems": [systems.0, systems.1], "match": mode}), None)
        }
        Command::Pretrain {
            corpus: input,
            coref,
            config,
            epochs,
            seed,
            split: split_args,
            out,
        } => {
            let mut cfg: PretrainFile = read_json(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            if let Some(s) = seed {
                cfg.encoder.seed = derive_seed(s, 1);
                cfg.pretrain.seed = derive_seed(s, 2);
            }
            let mut inputs: Vec<&Path> = vec![&input];
            inputs.extend(config.as_deref());
            let mut run = Run::new("pretrain", &out, &inputs)?;
            let corpus = load_corpus(&input)?;
            let system = resolve_system(&corpus, &coref)?;
            let splits = split(&corpus, &split_args)?;
            let encoder = Encoder::new(cfg.encoder.clone(), build_vocab(&splits.train))?;
            let mut epoch_files = Vec::new();
            let outcome = pretrain(
                encoder,
                &splits.train,
                Some(&splits.validation),
                &system,
                &cfg.pretrain,
                |entry, ckpt| {
                    emit(json!({
                        "epoch": entry.epoch,
                        "entity_loss": entry.entity_loss,
                        "mlm_loss": entry.mlm_loss,
                        "total": entry.total,
                        "val_loss": entry.val_loss,
                    }));
                    let path = out.join(format!("epoch-{:03}.ckpt", entry.epoch));
                    ckpt.save(&path)?;
                    epoch_files.push(path);
                    Ok(())
                },
            )?;
            for p in epoch_files {
                run.artifact(p);
            }
            let best = run.path("best.ckpt");
            outcome.best.save(&best)?;
            run.artifact(best);
            run.write_json("log.json", &outcome.log)?;
            emit(json!({"event": "pretrain", "best_epoch": outcome.best_epoch}));
            let config = json!({"coref": system, "encoder": outcome.best.encoder.config, "pretrain": cfg.pretrain,
                "train_fraction": split_args.train_fraction, "validation_fraction": split_args.validation_fraction});
            run.finish(config, seed)
        }
        Command::TrainTyping {
            corpus: input,
            checkpoint,
            strategy,
            frozen,
            config,
            seed,
            split: split_args,
            out,
        } => {
            let mut cfg: TypingConfig = read_json(config.as_deref())?;
            if let Some(s) = strategy {
                cfg.strategy = s;
            }
            if let Some(s) = seed {
                cfg.seed = derive_seed(s, 3);
            }
            let mut inputs: Vec<&Path> = vec![&input, &checkpoint];
            inputs.extend(config.as_deref());
            let mut run = Run::new("train-typing", &out, &inputs)?;
            let corpus = load_corpus(&input)?;
            let splits = split(&corpus, &split_args)?;
            let encoder = Checkpoint::load(&checkpoint)?.encoder;
            let labels = label_inventory(&corpus.typed_mentions);
            let outcome = train(&splits.train, Some(&splits.validation), &encoder, labels, frozen, &cfg)?;
            for e in &outcome.log {
                emit(json!({"epoch": e.epoch, "loss": e.loss, "val_micro_f1": e.val_micro_f1, "val_macro_f1": e.val_macro_f1}));
            }
            let model_path = run.path("typing_model.json");
            outcome.model.save(&model_path)?;
            run.artifact(model_path);
            if !frozen {
                let path = run.path("encoder.ckpt");
                Checkpoint {
                    encoder: outcome.encoder.clone(),
                    step: 0,
                    rng: Checkpoint::load(&checkpoint)?.rng,
                }
                .save(&path)?;
                run.artifact(path);
            }
            let test = &splits.test.typed_mentions;
            let predictions = predict_corpus(&outcome.model, &outcome.encoder, &splits.test, test)?;
            let pred: Vec<TypedMention> = predictions
                .iter()
                .map(|p| TypedMention {
                    mention: p.mention.clone(),
                    labels: p.labels.clone(),
                    source: Some("predicted".into()),
                })
                .collect();
            for (file, mentions) in [("predictions.jsonl", pred), ("gold.jsonl", with_source(test, "gold"))] {
                let path = run.path(file);
                write_mentions(&path, &mentions)?;
                run.artifact(path);
            }
            run.write_json("probabilities.json", &predictions)?;
            emit(json!({"event": "train-typing", "best_epoch": outcome.best_epoch, "test_mentions": test.len()}));
            run.finish(json!({"typing": cfg, "frozen": frozen}), seed)
        }
        Command::TrainSpan {
            corpus: input,
            checkpoint,
            frozen,
            config,
            seed,
            split: split_args,
            out,
        } => {
            let mut cfg: TaggerConfig = read_json(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = derive_seed(s, 4);
            }
            let mut inputs: Vec<&Path> = vec![&input, &checkpoint];
            inputs.extend(config.as_deref());
            let mut run = Run::new("train-span", &out, &inputs)?;
            let corpus = load_corpus(&input)?;
            let splits = split(&corpus, &split_args)?;
            let encoder = Checkpoint::load(&checkpoint)?.encoder;
            let outcome = train_tagger(&splits.train, &encoder, frozen, &cfg)?;
            for (i, loss) in outcome.losses.iter().enumerate() {
                emit(json!({"epoch": i + 1, "loss": loss}));
            }
            let model_path = run.path("tagger_model.json");
            outcome.model.save(&model_path)?;
            run.artifact(model_path);
            let to_mentions = |spans: Vec<TypedSpan>, source: &str| -> Vec<TypedMention> {
                spans
                    .into_iter()
                    .map(|s| TypedMention {
                        mention: Mention {
                            story_id: s.story_id,
                            sent_index: s.sent_index,
                            start: s.start,
                            end: s.end,
                            head: s.end - 1,
                        },
                        labels: vec![s.label],
                        source: Some(source.to_string()),
                    })
                    .collect()
            };
            let pred = to_mentions(predict_spans(&outcome.model, &outcome.encoder, &splits.test)?, "predicted");
            let gold = to_mentions(gold_typed_spans(&splits.test), "gold");
            for (file, mentions) in [("predictions.jsonl", pred), ("gold.jsonl", gold)] {
                let path = run.path(file);
                write_mentions(&path, &mentions)?;
                run.artifact(path);
            }
            run.finish(json!({"tagger": cfg, "frozen": frozen}), seed)
        }
        Command::Evaluate { pred, gold, mode, out } => {
            let p = corefenc::corpus::read_typed_mentions(&pred)?;
            let g = corefenc::corpus::read_typed_mentions(&gold)?;
            let report = if mode == "typing" {
                typing_report(&p, &g)?
            } else {
                let spans = |ms: &[TypedMention]| -> Vec<TypedSpan> {
                    ms.iter()
                        .filter_map(|m| {
                            span_label(&m.labels).map(|l| TypedSpan {
                                story_id: m.mention.story_id.clone(),
                                sent_index: m.mention.sent_index,
                                start: m.mention.start,
                                end: m.mention.end,
                                label: l.clone(),
                            })
                        })
                        .collect()
                };
                EvalReport::spans(&spans(&p), &spans(&g))
            };
            println!("{}", serde_json::to_string(&report)?);
            print!("{}", report.table());
            if let Some(out) = out {
                let mut run = Run::new("evaluate", &out, &[&pred, &gold])?;
                run.write_json("report.json", &report)?;
                let table = run.path("report.txt");
                fs::write(&table, report.table())?;
                run.artifact(table);
                run.finish(json!({"mode": mode}), None)?;
            }
            Ok(())
        }
        Command::Ablate { config, axes, seed, out } => {
            let mut cfg: ExperimentConfig = read_json(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let inputs: Vec<&Path> = config.iter().map(PathBuf::as_path).collect();
            let mut run = Run::new("ablate", &out, &inputs)?;
            let table = ablate(&cfg, &axes)?;
            for row in &table.rows {
                emit(json!({"cell": row.cell, "micro_f1": row.report.micro_f1, "macro_f1": row.report.macro_f1}));
            }
            run.write_json("ablation.json", &table)?;
            let text = run.path("ablation.txt");
            fs::write(&text, table.table())?;
            run.artifact(text);
            print!("{}", table.table());
            let axes: Vec<&str> = axes.iter().map(|a| a.name()).collect();
            run.finish(json!({"experiment": cfg, "axes": axes}), Some(cfg.seed))
        }
    }
}

/// Aligns predictions to gold by mention span; a gold mention without a
/// prediction counts as an empty prediction.
fn typing_report(pred: &[TypedMention], gold: &[TypedMention]) -> Result<EvalReport> {
    let key = |m: &Mention| (m.story_id.clone(), m.sent_index, m.start, m.end);
    let mut by_key: BTreeMap<_, LabelSet> = BTreeMap::new();
    for p in pred {
        by_key
            .entry(key(&p.mention))
            .or_default()
            .extend(p.labels.iter().cloned());
    }
    let gold_keys: BTreeSet<_> = gold.iter().map(|g| key(&g.mention)).collect();
    let unmatched = by_key.keys().filter(|k| !gold_keys.contains(*k)).count();
    if unmatched > 0 {
        emit(json!({"event": "warning", "message": format!("{unmatched} predictions have no gold mention")}));
    }
    let p: Vec<LabelSet> = gold
        .iter()
        .map(|g| by_key.get(&key(&g.mention)).cloned().unwrap_or_default())
        .collect();
    let g: Vec<LabelSet> = gold.iter().map(|g| g.labels.iter().cloned().collect()).collect();
    Ok(EvalReport::typing(&p, &g)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": format!("{e:#}")}));
            ExitCode::from(1)
        }
    }
}

//! Annotated story corpora: data model plus JSONL ingestion and validation.
//!
//! A corpus file holds one JSON object per line, discriminated by `kind`:
//!
//! ```text
//! {"kind":"story","id":"s1","sentences":[["Alice","smiled","."],["She","left","."]]}
//! {"kind":"typed_mention","story":"s1","sent":0,"start":0,"end":1,"head":0,"labels":["/person"]}
//! {"kind":"coref","system":"sysA","story":"s1","chains":[[{"sent":0,"start":0,"end":1,"head":0},{"sent":1,"start":0,"end":1,"head":0}]]}
//! ```
//!
//! Spans are half-open token ranges `[start, end)` within one sentence. The
//! `head` field is optional on input; when absent the head is resolved with
//! [`HeadMode::Heuristic`]. Unknown fields are ignored.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub story_id: String,
    pub sent_index: usize,
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn new(story_id: &str, sent_index: usize, words: &[String]) -> Self {
        let tokens = words
            .iter()
            .enumerate()
            .map(|(index, text)| Token {
                text: text.clone(),
                index,
            })
            .collect();
        Sentence {
            story_id: story_id.to_string(),
            sent_index,
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.text.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Story {
    pub id: String,
    pub sentences: Vec<Sentence>,
}

/// An entity mention: a token span inside one sentence of one story.
///
/// Field order makes the derived ordering lexicographic on
/// `(story_id, sent_index, start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Mention {
    pub story_id: String,
    pub sent_index: usize,
    pub start: usize,
    pub end: usize,
    pub head: usize,
}

/// Span identity of a mention within its story: `(sent, start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpanKey {
    pub sent: usize,
    pub start: usize,
    pub end: usize,
}

impl Mention {
    pub fn key(&self) -> SpanKey {
        SpanKey {
            sent: self.sent_index,
            start: self.start,
            end: self.end,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// Checks the span and head against the sentence they claim to live in.
    pub fn validate(&self, sentence: &Sentence) -> std::result::Result<(), String> {
        if self.start >= self.end {
            return Err(format!("mention {} has empty span", self.describe()));
        }
        if self.end > sentence.len() {
            return Err(format!(
                "mention {} ends past sentence length {}",
                self.describe(),
                sentence.len()
            ));
        }
        if self.head < self.start || self.head >= self.end {
            return Err(format!(
                "mention {} has head {} outside its span",
                self.describe(),
                self.head
            ));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        format!(
            "{}:{}[{},{})",
            self.story_id, self.sent_index, self.start, self.end
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypedMention {
    pub mention: Mention,
    /// Hierarchical label paths such as `/person/artist`.
    pub labels: Vec<String>,
    pub source: Option<String>,
}

/// Number of segments in a label path; `/organization/company` has depth 2.
pub fn label_depth(label: &str) -> usize {
    label.split('/').filter(|s| !s.is_empty()).count()
}

pub type Chain = Vec<Mention>;

/// One coreference system's chains, keyed by story id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorefAnnotation {
    pub system_name: String,
    pub chains: BTreeMap<String, Vec<Chain>>,
}

impl CorefAnnotation {
    pub fn new(system_name: impl Into<String>) -> Self {
        CorefAnnotation {
            system_name: system_name.into(),
            chains: BTreeMap::new(),
        }
    }

    pub fn chains_for(&self, story_id: &str) -> &[Chain] {
        self.chains.get(story_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn num_chains(&self) -> usize {
        self.chains.values().map(Vec::len).sum()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        for (story, chains) in &self.chains {
            let mut seen = std::collections::HashSet::new();
            for chain in chains {
                if chain.len() < 2 {
                    return Err(format!(
                        "system {}: chain in story {} has fewer than 2 mentions",
                        self.system_name, story
                    ));
                }
                for m in chain {
                    if &m.story_id != story {
                        return Err(format!(
                            "system {}: mention {} filed under story {}",
                            self.system_name,
                            m.describe(),
                            story
                        ));
                    }
                    if !seen.insert(m.key()) {
                        return Err(format!(
                            "system {}: mention {} appears in more than one chain",
                            self.system_name,
                            m.describe()
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub stories: Vec<Story>,
    pub typed_mentions: Vec<TypedMention>,
    pub coref: Vec<CorefAnnotation>,
    index: HashMap<String, usize>,
}

/// How a mention's head token is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Given,
    Heuristic,
}

const HEAD_MARKERS: [&str; 9] = ["of", "in", "on", "at", "for", "with", "from", "to", "by"];

/// Picks the head token of `mention` within `sentence`.
///
/// `Heuristic` cuts the span before its first preposition marker (ignoring a
/// marker in first position) and returns the last remaining token.
pub fn resolve_head(mention: &Mention, sentence: &Sentence, mode: HeadMode) -> usize {
    match mode {
        HeadMode::Given => mention.head,
        HeadMode::Heuristic => heuristic_head(sentence, mention.start, mention.end),
    }
}

fn heuristic_head(sentence: &Sentence, start: usize, end: usize) -> usize {
    (start + 1..end)
        .find(|&i| HEAD_MARKERS.contains(&sentence.tokens[i].text.as_str()))
        .map(|marker| marker - 1)
        .unwrap_or(end - 1)
}

impl Corpus {
    /// Builds a corpus and checks every cross-reference.
    pub fn new(
        stories: Vec<Story>,
        typed_mentions: Vec<TypedMention>,
        coref: Vec<CorefAnnotation>,
    ) -> Result<Self> {
        let mut corpus = Corpus {
            stories,
            typed_mentions,
            coref,
            index: HashMap::new(),
        };
        corpus.reindex().map_err(|message| Error::Validation { line: 0, message })?;
        corpus.validate().map_err(|message| Error::Validation { line: 0, message })?;
        Ok(corpus)
    }

    fn reindex(&mut self) -> std::result::Result<(), String> {
        self.index.clear();
        for (i, story) in self.stories.iter().enumerate() {
            if self.index.insert(story.id.clone(), i).is_some() {
                return Err(format!("duplicate story id {}", story.id));
            }
            if story.sentences.is_empty() {
                return Err(format!("story {} has no sentences", story.id));
            }
            for (si, sentence) in story.sentences.iter().enumerate() {
                if sentence.tokens.is_empty() {
                    return Err(format!("story {} sentence {} is empty", story.id, si));
                }
                if sentence.sent_index != si || sentence.story_id != story.id {
                    return Err(format!("story {} sentence {} is misnumbered", story.id, si));
                }
                for (ti, tok) in sentence.tokens.iter().enumerate() {
                    if tok.text.is_empty() || tok.index != ti {
                        return Err(format!(
                            "story {} sentence {} token {} is empty or misnumbered",
                            story.id, si, ti
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn validate(&self) -> std::result::Result<(), String> {
        for tm in &self.typed_mentions {
            self.check_mention(&tm.mention)?;
            check_labels(&tm.labels, &tm.mention)?;
        }
        for ann in &self.coref {
            for m in ann.chains.values().flatten().flatten() {
                self.check_mention(m)?;
            }
            ann.validate()?;
        }
        Ok(())
    }

    fn check_mention(&self, m: &Mention) -> std::result::Result<(), String> {
        let sentence = self
            .sentence(&m.story_id, m.sent_index)
            .ok_or_else(|| format!("mention {} refers to a missing sentence", m.describe()))?;
        m.validate(sentence)
    }

    pub fn story(&self, id: &str) -> Option<&Story> {
        self.index.get(id).map(|&i| &self.stories[i])
    }

    pub fn sentence(&self, story_id: &str, sent_index: usize) -> Option<&Sentence> {
        self.story(story_id)?.sentences.get(sent_index)
    }

    pub fn coref_by_name(&self, system: &str) -> Option<&CorefAnnotation> {
        self.coref.iter().find(|a| a.system_name == system)
    }

    /// Appends or replaces the annotation with the same system name.
    pub fn set_coref(&mut self, annotation: CorefAnnotation) {
        match self
            .coref
            .iter_mut()
            .find(|a| a.system_name == annotation.system_name)
        {
            Some(slot) => *slot = annotation,
            None => self.coref.push(annotation),
        }
    }

    /// A corpus restricted to the given stories (in the given order), keeping
    /// only the annotations that refer to them.
    pub fn subset(&self, story_ids: &[String]) -> Corpus {
        let keep: std::collections::HashSet<&str> =
            story_ids.iter().map(String::as_str).collect();
        let stories = story_ids
            .iter()
            .filter_map(|id| self.story(id).cloned())
            .collect();
        let typed_mentions = self
            .typed_mentions
            .iter()
            .filter(|tm| keep.contains(tm.mention.story_id.as_str()))
            .cloned()
            .collect();
        let coref = self
            .coref
            .iter()
            .map(|ann| CorefAnnotation {
                system_name: ann.system_name.clone(),
                chains: ann
                    .chains
                    .iter()
                    .filter(|(k, _)| keep.contains(k.as_str()))
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect(),
            })
            .collect();
        let mut out = Corpus {
            stories,
            typed_mentions,
            coref,
            index: HashMap::new(),
        };
        out.reindex().expect("subset of a valid corpus is valid");
        out
    }

    pub fn story_ids(&self) -> Vec<String> {
        self.stories.iter().map(|s| s.id.clone()).collect()
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.stories.iter().flat_map(|s| s.sentences.iter())
    }
}

fn check_labels(labels: &[String], m: &Mention) -> std::result::Result<(), String> {
    if labels.is_empty() {
        return Err(format!("typed mention {} has no labels", m.describe()));
    }
    if let Some(bad) = labels.iter().find(|l| label_depth(l) == 0) {
        return Err(format!(
            "typed mention {} has empty label path '{}'",
            m.describe(),
            bad
        ));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Story {
        id: String,
        sentences: Vec<Vec<String>>,
    },
    TypedMention {
        story: String,
        sent: usize,
        start: usize,
        end: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        head: Option<usize>,
        labels: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source: Option<String>,
    },
    Coref {
        system: String,
        story: String,
        chains: Vec<Vec<SpanRecord>>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct SpanRecord {
    sent: usize,
    start: usize,
    end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head: Option<usize>,
}

/// Reads and validates a JSONL corpus file.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file))
}

pub fn read_corpus(reader: impl BufRead) -> Result<Corpus> {
    let mut stories: Vec<Story> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    // Mention-bearing records are resolved after all stories are known, so
    // story lines may appear anywhere in the file.
    let mut pending: Vec<(usize, Record)> = Vec::new();

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io("<corpus>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(&line).map_err(|source| Error::Parse { line: lineno, source })?;
        match record {
            Record::Story { id, sentences } => {
                if index.contains_key(&id) {
                    return Err(Error::Validation {
                        line: lineno,
                        message: format!("duplicate story id {id}"),
                    });
                }
                if sentences.is_empty() || sentences.iter().any(|s| s.is_empty()) {
                    return Err(Error::Validation {
                        line: lineno,
                        message: format!("story {id} has an empty sentence list or sentence"),
                    });
                }
                if sentences.iter().flatten().any(|t| t.is_empty()) {
                    return Err(Error::Validation {
                        line: lineno,
                        message: format!("story {id} has an empty token"),
                    });
                }
                let sentences = sentences
                    .iter()
                    .enumerate()
                    .map(|(si, words)| Sentence::new(&id, si, words))
                    .collect();
                index.insert(id.clone(), stories.len());
                stories.push(Story { id, sentences });
            }
            other => pending.push((lineno, other)),
        }
    }

    let lookup = |story: &str, sent: usize| -> Option<&Sentence> {
        index
            .get(story)
            .and_then(|&i| stories[i].sentences.get(sent))
    };
    let build = |line: usize, story: &str, sent: usize, start: usize, end: usize, head: Option<usize>| {
        let sentence = lookup(story, sent).ok_or_else(|| Error::Validation {
            line,
            message: format!("mention {story}:{sent}[{start},{end}) refers to a missing sentence"),
        })?;
        let mut mention = Mention {
            story_id: story.to_string(),
            sent_index: sent,
            start,
            end,
            head: head.unwrap_or(start),
        };
        if start < end && end <= sentence.len() && head.is_none() {
            mention.head = resolve_head(&mention, sentence, HeadMode::Heuristic);
        }
        mention
            .validate(sentence)
            .map_err(|message| Error::Validation { line, message })?;
        Ok::<_, Error>(mention)
    };

    let mut typed_mentions = Vec::new();
    let mut coref: Vec<CorefAnnotation> = Vec::new();
    for (line, record) in pending {
        match record {
            Record::TypedMention {
                story,
                sent,
                start,
                end,
                head,
                labels,
                source,
            } => {
                let mention = build(line, &story, sent, start, end, head)?;
                check_labels(&labels, &mention)
                    .map_err(|message| Error::Validation { line, message })?;
                typed_mentions.push(TypedMention {
                    mention,
                    labels,
                    source,
                });
            }
            Record::Coref {
                system,
                story,
                chains,
            } => {
                let mut built = Vec::with_capacity(chains.len());
                for chain in chains {
                    let mut members = Vec::with_capacity(chain.len());
                    for span in chain {
                        members.push(build(line, &story, span.sent, span.start, span.end, span.head)?);
                    }
                    built.push(members);
                }
                let ann = match coref.iter_mut().find(|a| a.system_name == system) {
                    Some(a) => a,
                    None => {
                        coref.push(CorefAnnotation::new(system.clone()));
                        coref.last_mut().unwrap()
                    }
                };
                if !built.is_empty() {
                    ann.chains.entry(story).or_default().extend(built);
                }
            }
            Record::Story { .. } => unreachable!(),
        }
    }

    let corpus = Corpus {
        stories,
        typed_mentions,
        coref,
        index,
    };
    for ann in &corpus.coref {
        ann.validate()
            .map_err(|message| Error::Validation { line: 0, message })?;
    }
    Ok(corpus)
}

/// Serializes a corpus as JSONL: stories, then typed mentions, then one
/// coref line per (system, story).
pub fn write_corpus(corpus: &Corpus, mut out: impl Write) -> Result<()> {
    let mut emit = |record: &Record| -> Result<()> {
        let line = serde_json::to_string(record).expect("records serialize");
        writeln!(out, "{line}").map_err(|e| Error::io("<corpus>", e))
    };
    for story in &corpus.stories {
        emit(&Record::Story {
            id: story.id.clone(),
            sentences: story
                .sentences
                .iter()
                .map(|s| s.words().map(str::to_string).collect())
                .collect(),
        })?;
    }
    for tm in &corpus.typed_mentions {
        emit(&typed_record(tm))?;
    }
    for ann in &corpus.coref {
        // A system without chains still gets one line so it survives reloading.
        if ann.chains.values().all(Vec::is_empty) {
            if let Some(first) = corpus.stories.first() {
                emit(&Record::Coref {
                    system: ann.system_name.clone(),
                    story: first.id.clone(),
                    chains: Vec::new(),
                })?;
            }
        }
        for (story, chains) in ann.chains.iter().filter(|(_, c)| !c.is_empty()) {
            emit(&Record::Coref {
                system: ann.system_name.clone(),
                story: story.clone(),
                chains: chains
                    .iter()
                    .map(|c| {
                        c.iter()
                            .map(|m| SpanRecord {
                                sent: m.sent_index,
                                start: m.start,
                                end: m.end,
                                head: Some(m.head),
                            })
                            .collect()
                    })
                    .collect(),
            })?;
        }
    }
    Ok(())
}

fn typed_record(tm: &TypedMention) -> Record {
    Record::TypedMention {
        story: tm.mention.story_id.clone(),
        sent: tm.mention.sent_index,
        start: tm.mention.start,
        end: tm.mention.end,
        head: Some(tm.mention.head),
        labels: tm.labels.clone(),
        source: tm.source.clone(),
    }
}

/// Writes only `typed_mention` lines (prediction files).
pub fn write_typed_mentions(mentions: &[TypedMention], mut out: impl Write) -> Result<()> {
    for tm in mentions {
        let line = serde_json::to_string(&typed_record(tm)).expect("records serialize");
        writeln!(out, "{line}").map_err(|e| Error::io("<typed mentions>", e))?;
    }
    Ok(())
}

/// Reads `typed_mention` lines without requiring the stories they refer to.
/// Other record kinds are skipped.
pub fn read_typed_mentions(path: impl AsRef<Path>) -> Result<Vec<TypedMention>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(&line).map_err(|source| Error::Parse { line: i + 1, source })?;
        if let Record::TypedMention {
            story,
            sent,
            start,
            end,
            head,
            labels,
            source,
        } = record
        {
            let mention = Mention {
                story_id: story,
                sent_index: sent,
                start,
                end,
                head: head.unwrap_or(start),
            };
            if start >= end || mention.head < start || mention.head >= end {
                return Err(Error::Validation {
                    line: i + 1,
                    message: format!("mention {} is malformed", mention.describe()),
                });
            }
            out.push(TypedMention {
                mention,
                labels,
                source,
            });
        }
    }
    Ok(out)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write_corpus(corpus, &mut writer)?;
    writer.flush().map_err(|e| Error::io(path, e))
}

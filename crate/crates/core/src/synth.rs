//! Synthetic story corpora with known entity types and coreference chains.
//!
//! Every mention sits in its own sentence built from a context template of
//! its entity's type, so the type is readable from the surrounding words even
//! when the mention itself is a pronoun. Two noisy coreference systems are
//! derived from the gold chains by dropping gold links and adding spurious
//! cross-entity links, then re-forming chains as connected components.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::DisjointSets;
use crate::corpus::{Chain, CorefAnnotation, Corpus, Mention, Sentence, Story, TypedMention};
use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeSpec {
    /// Full label path, e.g. `/person/artist`. Gold labels for an entity of
    /// this type are every prefix of the path.
    pub label: String,
    /// Sentence templates with `{}` marking the mention slot.
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Probability that a gold link is dropped.
    pub miss_rate: f64,
    /// Probability that a cross-entity mention pair is linked.
    pub spurious_rate: f64,
}

impl NoiseConfig {
    pub const NONE: NoiseConfig = NoiseConfig {
        miss_rate: 0.0,
        spurious_rate: 0.0,
    };

    pub fn uniform(rate: f64) -> Self {
        NoiseConfig {
            miss_rate: rate,
            spurious_rate: rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_stories: usize,
    pub entities_per_story: usize,
    pub mentions_per_entity: usize,
    pub pronoun_fraction: f64,
    /// Number of distinct name words entities draw from.
    pub name_pool: usize,
    pub type_inventory: Vec<TypeSpec>,
    pub sys_a: NoiseConfig,
    pub sys_b: NoiseConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_stories: 200,
            entities_per_story: 3,
            mentions_per_entity: 3,
            pronoun_fraction: 0.3,
            name_pool: 150,
            type_inventory: default_inventory(),
            sys_a: NoiseConfig::uniform(0.1),
            sys_b: NoiseConfig::uniform(0.1),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, r) in [
            ("pronoun_fraction", self.pronoun_fraction),
            ("sys_a.miss_rate", self.sys_a.miss_rate),
            ("sys_a.spurious_rate", self.sys_a.spurious_rate),
            ("sys_b.miss_rate", self.sys_b.miss_rate),
            ("sys_b.spurious_rate", self.sys_b.spurious_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} = {r} is outside [0, 1]"));
            }
        }
        if self.type_inventory.is_empty() {
            return bad("type inventory is empty".into());
        }
        for t in &self.type_inventory {
            let distinct: BTreeSet<&String> = t.templates.iter().collect();
            if distinct.len() < 2 {
                return bad(format!("type {} needs at least 2 distinct templates", t.label));
            }
            if t.templates.iter().any(|tpl| tpl.matches("{}").count() != 1) {
                return bad(format!("every template of {} needs exactly one {{}} slot", t.label));
            }
            if crate::corpus::label_depth(&t.label) == 0 {
                return bad(format!("type label '{}' is empty", t.label));
            }
        }
        if self.n_stories == 0 || self.entities_per_story == 0 || self.mentions_per_entity == 0 {
            return bad("story, entity and mention counts must be positive".into());
        }
        if self.entities_per_story < 2
            && (self.sys_a.spurious_rate > 0.0 || self.sys_b.spurious_rate > 0.0)
        {
            return bad("spurious links need at least 2 entities per story".into());
        }
        if self.name_pool < 2 * self.entities_per_story {
            return bad("name pool too small for the entities in one story".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    /// Stories, gold typed mentions and the `sysA`/`sysB` annotations.
    pub corpus: Corpus,
    pub gold_chains: CorefAnnotation,
    pub gold_types: Vec<TypedMention>,
}

/// Raw link sample of one simulated system for one story.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampledLinks {
    pub kept: Vec<(Mention, Mention)>,
    pub dropped: Vec<(Mention, Mention)>,
    pub spurious: Vec<(Mention, Mention)>,
    /// Number of cross-entity pairs that could have been linked.
    pub candidates: usize,
}

impl SampledLinks {
    /// Connected components of kept + spurious links with at least 2 members.
    pub fn chains(&self) -> Vec<Chain> {
        let mut mentions: Vec<&Mention> = self
            .kept
            .iter()
            .chain(&self.spurious)
            .flat_map(|(a, b)| [a, b])
            .collect();
        mentions.sort();
        mentions.dedup();
        let pos = |m: &Mention| mentions.binary_search(&m).expect("mention listed");
        let mut dsu = DisjointSets::new(mentions.len());
        for (a, b) in self.kept.iter().chain(&self.spurious) {
            dsu.union(pos(a), pos(b));
        }
        let mut groups: std::collections::BTreeMap<usize, Chain> = Default::default();
        for (i, m) in mentions.iter().enumerate() {
            groups.entry(dsu.find(i)).or_default().push((*m).clone());
        }
        let mut chains: Vec<Chain> = groups.into_values().filter(|c| c.len() >= 2).collect();
        chains.iter_mut().for_each(|c| c.sort());
        chains.sort();
        chains
    }
}

/// Samples one system's links over a story's gold entities (each a list of
/// mentions). Pairs are visited in a fixed order so draws are reproducible.
pub fn sample_links(entities: &[Vec<Mention>], noise: NoiseConfig, rng: &mut ChaCha8Rng) -> SampledLinks {
    let mut out = SampledLinks::default();
    for entity in entities {
        for (i, a) in entity.iter().enumerate() {
            for b in &entity[i + 1..] {
                let pair = ordered(a, b);
                if rng.gen::<f64>() < noise.miss_rate {
                    out.dropped.push(pair);
                } else {
                    out.kept.push(pair);
                }
            }
        }
    }
    for (ei, ea) in entities.iter().enumerate() {
        for eb in &entities[ei + 1..] {
            for a in ea {
                for b in eb {
                    out.candidates += 1;
                    if rng.gen::<f64>() < noise.spurious_rate {
                        out.spurious.push(ordered(a, b));
                    }
                }
            }
        }
    }
    out
}

fn ordered(a: &Mention, b: &Mention) -> (Mention, Mention) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

/// Gold labels for a type path: every prefix, shortest first.
pub fn label_prefixes(label: &str) -> Vec<String> {
    let parts: Vec<&str> = label.split('/').filter(|s| !s.is_empty()).collect();
    (1..=parts.len())
        .map(|n| format!("/{}", parts[..n].join("/")))
        .collect()
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ra", "ten", "vo", "su", "del", "bar", "qui", "zen", "tor", "fa", "ni", "gul", "pe",
];
const FILLERS: [&str; 6] = ["yesterday", "meanwhile", "later", "reportedly", "again", "today"];

fn name_pool(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut pool = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let k = rng.gen_range(2..=3);
        let mut w: String = (0..k).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
        w[..1].make_ascii_uppercase();
        if pool.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn pronoun(label: &str, rng: &mut ChaCha8Rng) -> &'static str {
    match label.split('/').nth(1) {
        Some("person") => {
            if rng.gen_bool(0.5) {
                "he"
            } else {
                "she"
            }
        }
        Some("organization") => "they",
        _ => "it",
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = substream(config.seed, Purpose::Synth);
    let mut noise_a = substream(config.seed, Purpose::NoiseA);
    let mut noise_b = substream(config.seed, Purpose::NoiseB);
    let names = name_pool(config.name_pool, &mut rng);
    let m = config.mentions_per_entity;
    // The first mention of an entity is always its name, so later mentions
    // are pronouns slightly more often to hit the configured overall rate.
    let later_pronoun = if m > 1 {
        (config.pronoun_fraction * m as f64 / (m - 1) as f64).min(1.0)
    } else {
        0.0
    };

    let mut stories = Vec::with_capacity(config.n_stories);
    let mut typed = Vec::new();
    let mut gold = CorefAnnotation::new("gold");
    let mut sys_a = CorefAnnotation::new("sysA");
    let mut sys_b = CorefAnnotation::new("sysB");

    for si in 0..config.n_stories {
        let story_id = format!("story-{si:04}");
        // (entity, mention ordinal) in sentence order.
        let mut slots: Vec<(usize, usize)> = (0..config.entities_per_story)
            .flat_map(|e| (0..m).map(move |k| (e, k)))
            .collect();
        slots.shuffle(&mut rng);
        // Keep each entity's name mention ahead of its pronouns.
        let mut seen = vec![0usize; config.entities_per_story];
        for slot in slots.iter_mut() {
            slot.1 = seen[slot.0];
            seen[slot.0] += 1;
        }

        let mut entity_names: Vec<Vec<String>> = Vec::new();
        let mut used = BTreeSet::new();
        let mut entity_types = Vec::new();
        for _ in 0..config.entities_per_story {
            let ty = rng.gen_range(0..config.type_inventory.len());
            let len = rng.gen_range(1..=2);
            let mut name = Vec::with_capacity(len);
            while name.len() < len {
                let w = names.choose(&mut rng).unwrap().clone();
                if used.insert(w.clone()) {
                    name.push(w);
                }
            }
            entity_types.push(ty);
            entity_names.push(name);
        }

        let mut sentences = Vec::with_capacity(slots.len());
        let mut entities: Vec<Vec<Mention>> = vec![Vec::new(); config.entities_per_story];
        for (sent_index, &(e, k)) in slots.iter().enumerate() {
            let spec = &config.type_inventory[entity_types[e]];
            let surface: Vec<String> = if k > 0 && rng.gen::<f64>() < later_pronoun {
                vec![pronoun(&spec.label, &mut rng).to_string()]
            } else {
                entity_names[e].clone()
            };
            let template = spec.templates.choose(&mut rng).unwrap();
            let (left, right) = template.split_once("{}").expect("validated slot");
            let mut words: Vec<String> = Vec::new();
            if rng.gen_bool(0.3) {
                words.push(FILLERS.choose(&mut rng).unwrap().to_string());
            }
            words.extend(left.split_whitespace().map(str::to_string));
            let start = words.len();
            words.extend(surface.iter().cloned());
            let end = words.len();
            words.extend(right.split_whitespace().map(str::to_string));
            words.push(".".to_string());
            let mention = Mention {
                story_id: story_id.clone(),
                sent_index,
                start,
                end,
                head: end - 1,
            };
            typed.push(TypedMention {
                mention: mention.clone(),
                labels: label_prefixes(&spec.label),
                source: None,
            });
            entities[e].push(mention);
            sentences.push(Sentence::new(&story_id, sent_index, &words));
        }

        let gold_chains: Vec<Chain> = {
            let mut c: Vec<Chain> = entities
                .iter()
                .filter(|e| e.len() >= 2)
                .map(|e| {
                    let mut e = e.clone();
                    e.sort();
                    e
                })
                .collect();
            c.sort();
            c
        };
        if !gold_chains.is_empty() {
            gold.chains.insert(story_id.clone(), gold_chains);
        }
        for (ann, noise, nrng) in [
            (&mut sys_a, config.sys_a, &mut noise_a),
            (&mut sys_b, config.sys_b, &mut noise_b),
        ] {
            let chains = sample_links(&entities, noise, nrng).chains();
            if !chains.is_empty() {
                ann.chains.insert(story_id.clone(), chains);
            }
        }
        stories.push(Story {
            id: story_id,
            sentences,
        });
    }

    let corpus = Corpus::new(stories, typed.clone(), vec![sys_a, sys_b])?;
    Ok(SynthCorpus {
        corpus,
        gold_chains: gold,
        gold_types: typed,
    })
}

fn spec(label: &str, templates: &[&str]) -> TypeSpec {
    TypeSpec {
        label: label.to_string(),
        templates: templates.iter().map(|s| s.to_string()).collect(),
    }
}

/// Twenty hierarchical types (five top-level, fourteen second-level, one
/// third-level), three templates each.
pub fn default_inventory() -> Vec<TypeSpec> {
    vec![
        spec("/person", &[
            "{} said that talks would continue",
            "friends of {} gathered for dinner",
            "{} smiled and waved at neighbours",
        ]),
        spec("/person/artist", &[
            "the renowned {} performed a new song",
            "critics praised {} for the latest album",
            "{} painted a striking portrait",
        ]),
        spec("/person/athlete", &[
            "{} scored twice in the final match",
            "the coach substituted {} after halftime",
            "{} won the sprint in record time",
        ]),
        spec("/person/politician", &[
            "{} campaigned for the senate seat",
            "voters elected {} as governor",
            "{} vetoed the budget bill",
        ]),
        spec("/person/doctor", &[
            "{} examined the patient at the clinic",
            "the surgeon {} operated overnight",
            "{} prescribed antibiotics to patients",
        ]),
        spec("/organization", &[
            "{} announced a restructuring plan",
            "members of {} met in private",
            "{} issued a statement on friday",
        ]),
        spec("/organization/company", &[
            "shares of {} rose sharply",
            "{} reported quarterly profits",
            "investors sued {} over the merger",
        ]),
        spec("/organization/company/broadcast", &[
            "{} aired the documentary last night",
            "viewers tuned in to {} for the debate",
            "{} cancelled the television series",
        ]),
        spec("/organization/sports_team", &[
            "{} defeated their rivals at home",
            "supporters of {} filled the stadium",
            "{} signed a new striker",
        ]),
        spec("/organization/government", &[
            "{} passed the new regulation",
            "{} imposed sanctions on exports",
            "officials from {} drafted the treaty",
        ]),
        spec("/location", &[
            "travellers passed through {} on the way",
            "{} lies beyond the hills",
            "residents near {} reported flooding",
        ]),
        spec("/location/city", &[
            "the mayor of {} opened a park",
            "traffic in downtown {} stalled",
            "{} hosted the municipal festival",
        ]),
        spec("/location/country", &[
            "the embassy of {} closed its doors",
            "{} declared independence decades ago",
            "citizens of {} voted in the referendum",
        ]),
        spec("/location/body_of_water", &[
            "fishermen sailed across {} at dawn",
            "{} flooded its banks",
            "divers explored the depths of {}",
        ]),
        spec("/product", &[
            "customers bought {} online",
            "the price of {} increased",
            "{} went on sale worldwide",
        ]),
        spec("/product/software", &[
            "developers released an update to {}",
            "{} crashed after the patch",
            "users downloaded {} for free",
        ]),
        spec("/product/vehicle", &[
            "engineers tested {} on the track",
            "the driver parked {} outside",
            "{} reached top speed on the highway",
        ]),
        spec("/event", &[
            "thousands attended {} last year",
            "{} took place in the spring",
            "organizers postponed {} again",
        ]),
        spec("/event/election", &[
            "ballots for {} were counted overnight",
            "{} produced a narrow majority",
            "turnout during {} was high",
        ]),
        spec("/event/sports_event", &[
            "athletes trained for {} all season",
            "tickets for {} sold out",
            "the opening ceremony of {} dazzled",
        ]),
    ]
}

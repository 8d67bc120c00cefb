//! Consensus coreference: keep only the mention-pair links that two systems
//! agree on, then rebuild chains as connected components.
//!
//! A chain of `n` mentions induces all `n(n-1)/2` unordered links, so the
//! result does not depend on how either system ordered its chain members.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Chain, CorefAnnotation, Mention};
use crate::error::{Error, Result};

/// How mentions from different systems are identified with each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Same sentence and identical `[start, end)`.
    #[default]
    Exact,
    /// Same sentence and same head token; span boundaries may differ.
    Head,
}

impl std::str::FromStr for MatchMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "exact" => Ok(MatchMode::Exact),
            "head" => Ok(MatchMode::Head),
            other => Err(format!("unknown match mode '{other}' (expected exact|head)")),
        }
    }
}

/// Identity of a mention within a story under a [`MatchMode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MatchKey {
    pub sent: usize,
    pub start: usize,
    pub end: usize,
}

impl MatchKey {
    pub fn of(m: &Mention, mode: MatchMode) -> Self {
        match mode {
            MatchMode::Exact => MatchKey {
                sent: m.sent_index,
                start: m.start,
                end: m.end,
            },
            MatchMode::Head => MatchKey {
                sent: m.sent_index,
                start: m.head,
                end: m.head + 1,
            },
        }
    }
}

/// Unordered mention pair, stored with `first < second`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Link {
    first: MatchKey,
    second: MatchKey,
}

impl Link {
    /// Returns `None` for a self-pair.
    pub fn new(a: MatchKey, b: MatchKey) -> Option<Self> {
        match a.cmp(&b) {
            std::cmp::Ordering::Less => Some(Link { first: a, second: b }),
            std::cmp::Ordering::Greater => Some(Link { first: b, second: a }),
            std::cmp::Ordering::Equal => None,
        }
    }

    pub fn endpoints(&self) -> (MatchKey, MatchKey) {
        (self.first, self.second)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkSet {
    pub story_id: String,
    pub links: BTreeSet<Link>,
    /// Representative mention for each key that occurs in a link.
    pub mentions: BTreeMap<MatchKey, Mention>,
}

impl LinkSet {
    pub fn empty(story_id: impl Into<String>) -> Self {
        LinkSet {
            story_id: story_id.into(),
            links: BTreeSet::new(),
            mentions: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn contains(&self, a: &Mention, b: &Mention, mode: MatchMode) -> bool {
        Link::new(MatchKey::of(a, mode), MatchKey::of(b, mode))
            .is_some_and(|l| self.links.contains(&l))
    }
}

/// Clique expansion of every chain, one [`LinkSet`] per story.
pub fn chains_to_links(annotation: &CorefAnnotation) -> BTreeMap<String, LinkSet> {
    chains_to_links_with(annotation, MatchMode::Exact)
}

pub fn chains_to_links_with(
    annotation: &CorefAnnotation,
    mode: MatchMode,
) -> BTreeMap<String, LinkSet> {
    annotation
        .chains
        .iter()
        .map(|(story, chains)| (story.clone(), story_links(story, chains, mode)))
        .collect()
}

fn story_links(story: &str, chains: &[Chain], mode: MatchMode) -> LinkSet {
    let mut set = LinkSet::empty(story);
    for chain in chains {
        for (i, a) in chain.iter().enumerate() {
            for b in &chain[i + 1..] {
                let (ka, kb) = (MatchKey::of(a, mode), MatchKey::of(b, mode));
                if let Some(link) = Link::new(ka, kb) {
                    set.links.insert(link);
                    set.mentions.entry(ka).or_insert_with(|| a.clone());
                    set.mentions.entry(kb).or_insert_with(|| b.clone());
                }
            }
        }
    }
    set
}

/// Links present in both sets. Mentions are taken from `a`.
pub fn intersect(a: &LinkSet, b: &LinkSet) -> Result<LinkSet> {
    if a.story_id != b.story_id {
        return Err(Error::StoryMismatch(a.story_id.clone(), b.story_id.clone()));
    }
    let links: BTreeSet<Link> = a.links.intersection(&b.links).copied().collect();
    let mentions = links
        .iter()
        .flat_map(|l| [l.first, l.second])
        .map(|k| (k, a.mentions[&k].clone()))
        .collect();
    Ok(LinkSet {
        story_id: a.story_id.clone(),
        links,
        mentions,
    })
}

/// Connected components of the link graph, each sorted, in order of their
/// smallest mention.
pub fn links_to_chains(links: &LinkSet) -> Vec<Chain> {
    let keys: Vec<MatchKey> = links.mentions.keys().copied().collect();
    let pos: BTreeMap<MatchKey, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let mut dsu = DisjointSets::new(keys.len());
    for link in &links.links {
        dsu.union(pos[&link.first], pos[&link.second]);
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..keys.len() {
        groups.entry(dsu.find(i)).or_default().push(i);
    }
    let mut chains: Vec<Chain> = groups
        .into_values()
        .filter(|g| g.len() >= 2)
        .map(|g| {
            let mut chain: Chain = g.iter().map(|&i| links.mentions[&keys[i]].clone()).collect();
            chain.sort();
            chain
        })
        .collect();
    chains.sort();
    chains
}

pub fn consensus(a: &CorefAnnotation, b: &CorefAnnotation) -> CorefAnnotation {
    consensus_with(a, b, MatchMode::Exact)
}

/// Chains rebuilt from the links both systems predict, per story.
pub fn consensus_with(a: &CorefAnnotation, b: &CorefAnnotation, mode: MatchMode) -> CorefAnnotation {
    let links_a = chains_to_links_with(a, mode);
    let links_b = chains_to_links_with(b, mode);
    let mut out = CorefAnnotation::new(consensus_name(&a.system_name, &b.system_name));
    for (story, la) in &links_a {
        let Some(lb) = links_b.get(story) else { continue };
        let shared = intersect(la, lb).expect("keys match by construction");
        let chains = links_to_chains(&shared);
        if !chains.is_empty() {
            out.chains.insert(story.clone(), chains);
        }
    }
    out
}

pub fn consensus_name(a: &str, b: &str) -> String {
    format!("consensus({a},{b})")
}

/// Union-find with path halving and union by size.
pub(crate) struct DisjointSets {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSets {
    pub(crate) fn new(n: usize) -> Self {
        DisjointSets {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub(crate) fn find(&mut self, mut v: usize) -> usize {
        while self.parent[v] != v {
            self.parent[v] = self.parent[self.parent[v]];
            v = self.parent[v];
        }
        v
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

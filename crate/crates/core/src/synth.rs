//! Synthetic clustered catalog with known similarity structure.
//!
//! Each cluster owns a set of attributes. An attribute has one title word
//! and several description synonyms, so titles and descriptions of the same
//! item share meaning but not surface form. Items in one cluster are each
//! other's positives.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{AnnotationSet, Catalog, CatalogError, CatalogItem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub items: usize,
    pub clusters: usize,
    pub attributes_per_cluster: usize,
    pub synonyms_per_attribute: usize,
    pub title_attributes: usize,
    pub description_attributes: usize,
    /// Attribute words borrowed from other clusters per description.
    pub noise_attributes: usize,
    /// Generic words per description, inclusive range.
    pub filler: (usize, usize),
    /// Shared producer names; titles start with one of them.
    pub producers: usize,
    pub seeds_per_cluster: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            items: 200,
            clusters: 10,
            attributes_per_cluster: 8,
            synonyms_per_attribute: 3,
            title_attributes: 2,
            description_attributes: 5,
            noise_attributes: 2,
            filler: (4, 8),
            producers: 40,
            seeds_per_cluster: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCatalog {
    pub catalog: Catalog,
    pub annotations: AnnotationSet,
    /// Cluster of each item, in catalog order.
    pub clusters: Vec<usize>,
}

const ONSETS: &[&str] = &[
    "b", "br", "c", "ch", "d", "dr", "f", "g", "gr", "k", "l", "m", "n", "p", "pl", "r", "s",
    "st", "t", "tr", "v", "z",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "n", "l", "r", "s", "x"];

const FILLER: &[&str] = &[
    "the", "with", "and", "a", "of", "this", "shows", "offers", "hints", "notes", "touch",
    "bottle", "glass", "finish", "palate", "nose", "very", "quite", "rather", "some", "its",
    "lovely", "nice", "clear", "open", "long", "light", "fresh", "bright", "gentle",
];

/// Deterministic pronounceable word generator with no repeats.
struct Words {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Words {
    fn next(&mut self) -> String {
        loop {
            let syllables = self.rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(&mut self.rng).unwrap());
                w.push_str(VOWELS.choose(&mut self.rng).unwrap());
            }
            w.push_str(CODAS.choose(&mut self.rng).unwrap());
            if !FILLER.contains(&w.as_str()) && self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

struct Attribute {
    title_word: String,
    synonyms: Vec<String>,
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCatalog, CatalogError> {
    assert!(cfg.clusters >= 1 && cfg.items >= cfg.clusters, "need at least one item per cluster");
    assert!(cfg.title_attributes <= cfg.attributes_per_cluster);
    assert!(cfg.description_attributes <= cfg.attributes_per_cluster);
    assert!(cfg.synonyms_per_attribute >= 1 && cfg.filler.0 <= cfg.filler.1);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut words = Words {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x776f_7264),
        used: HashSet::new(),
    };
    let producers: Vec<String> = (0..cfg.producers.max(1)).map(|_| capitalize(&words.next())).collect();
    let attributes: Vec<Vec<Attribute>> = (0..cfg.clusters)
        .map(|_| {
            (0..cfg.attributes_per_cluster)
                .map(|_| Attribute {
                    title_word: words.next(),
                    synonyms: (0..cfg.synonyms_per_attribute).map(|_| words.next()).collect(),
                })
                .collect()
        })
        .collect();

    let mut items = Vec::with_capacity(cfg.items);
    let mut clusters = Vec::with_capacity(cfg.items);
    for i in 0..cfg.items {
        let c = i % cfg.clusters;
        let own = &attributes[c];
        let mut idx: Vec<usize> = (0..own.len()).collect();
        idx.shuffle(&mut rng);
        let title_attrs = &idx[..cfg.title_attributes];
        // descriptions cover the title's attributes first, then others
        let mut desc_attrs: Vec<usize> = title_attrs.to_vec();
        desc_attrs.extend(idx[cfg.title_attributes..].iter().copied());
        desc_attrs.truncate(cfg.description_attributes);

        let producer = producers.choose(&mut rng).unwrap();
        let title_words: Vec<&str> = title_attrs.iter().map(|&a| own[a].title_word.as_str()).collect();
        let title = format!("{producer} {}", title_words.join(" "));

        let mut tokens: Vec<String> = desc_attrs
            .iter()
            .map(|&a| own[a].synonyms.choose(&mut rng).unwrap().clone())
            .collect();
        if cfg.clusters > 1 {
            for _ in 0..cfg.noise_attributes {
                let mut other = rng.random_range(0..cfg.clusters - 1);
                if other >= c {
                    other += 1;
                }
                let attr = attributes[other].choose(&mut rng).unwrap();
                tokens.push(attr.synonyms.choose(&mut rng).unwrap().clone());
            }
        }
        for _ in 0..rng.random_range(cfg.filler.0..=cfg.filler.1) {
            tokens.push(FILLER.choose(&mut rng).unwrap().to_string());
        }
        tokens.shuffle(&mut rng);
        let description = format!("{} .", tokens.join(" "));

        items.push(CatalogItem::new(format!("s{i:04}"), title, description)?);
        clusters.push(c);
    }
    let catalog = Catalog::from_items(items)?;

    let mut entries = BTreeMap::new();
    for c in 0..cfg.clusters {
        let members: Vec<&str> = catalog
            .items()
            .iter()
            .zip(&clusters)
            .filter(|(_, &k)| k == c)
            .map(|(it, _)| it.id.as_str())
            .collect();
        if members.len() < 2 {
            continue;
        }
        for seed in members.choose_multiple(&mut rng, cfg.seeds_per_cluster.min(members.len())) {
            let positives: BTreeSet<String> = members
                .iter()
                .filter(|m| *m != seed)
                .map(|m| m.to_string())
                .collect();
            entries.insert(seed.to_string(), positives);
        }
    }

    Ok(SynthCatalog {
        catalog,
        annotations: AnnotationSet { entries },
        clusters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::tokenize;

    #[test]
    fn shape_and_determinism() {
        let cfg = SynthConfig { seed: 5, ..SynthConfig::default() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.catalog, b.catalog);
        assert_eq!(a.annotations, b.annotations);
        assert_eq!(a.catalog.len(), 200);
        assert_eq!(a.annotations.entries.len(), 20);
        assert_eq!(a.annotations.pair_count(), 20 * 19);
        for (seed, pos) in &a.annotations.entries {
            let c = a.clusters[a.catalog.position(seed).unwrap()];
            assert!(!pos.contains(seed));
            assert!(pos.iter().all(|p| a.clusters[a.catalog.position(p).unwrap()] == c));
        }
        let other = generate(&SynthConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(other.catalog, a.catalog);
    }

    #[test]
    fn titles_and_descriptions_use_disjoint_words() {
        let s = generate(&SynthConfig::default()).unwrap();
        for item in s.catalog.items() {
            let t = tokenize(&item.title);
            assert_eq!(t.len(), 3);
            let d: BTreeSet<String> = tokenize(&item.description).into_iter().collect();
            assert!(t.iter().all(|w| !d.contains(w)), "{item:?}");
        }
    }
}

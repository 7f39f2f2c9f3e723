//! Inference: embed the catalog once, score seed/candidate pairs with four
//! signals, z-normalize each signal over the candidate pool, combine with
//! λ weights and sort.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CatalogItem};
use crate::encoder::{embed_sequence, write_checkpoint, EncoderError, ItemEmbedding, Model};
use crate::hash::fnv1a64;
use crate::objectives::{cosine, pair_tdm_score, ObjectiveError};
use crate::tokenizer::{encode_pair, tokenize, EncodeOptions, TokenizerError, Vocabulary};

pub const STORE_MAGIC: &[u8; 4] = b"RCBE";
pub const STORE_VERSION: u32 = 1;
/// Columns with a smaller population std normalize to zeros.
pub const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RankError {
    #[error("seed {0:?} is not in the catalog or embedding store")]
    UnknownSeed(String),
    #[error("seed {0:?} has no candidates to rank")]
    EmptyCandidates(String),
    #[error("zero-norm feature vector for item {0:?}")]
    ZeroVector(String),
    #[error("no embedding for item {0:?}")]
    MissingEmbedding(String),
    #[error("embedding store was produced by model {store:016x}, not {model:016x}")]
    FingerprintMismatch { store: u64, model: u64 },
    #[error("embedding dimension {found} does not match {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("malformed embedding store: {0}")]
    BadStore(String),
    #[error("lambda weights must be finite: {0:?}")]
    NonFiniteLambda([f64; 4]),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Identifies a model together with the vocabulary it was trained on.
pub fn model_fingerprint(model: &Model, vocab_hash: u64) -> u64 {
    fnv1a64(&write_checkpoint(model, vocab_hash))
}

/// Pooled features for every embeddable catalog item. Values are held at
/// `f32` precision, the precision of the store file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    fingerprint: u64,
    hidden: usize,
    ids: Vec<String>,
    entries: Vec<ItemEmbedding>,
    index: HashMap<String, usize>,
    skipped: Vec<(String, String)>,
}

fn to_f32(v: &Array1<f64>) -> Array1<f64> {
    v.mapv(|x| x as f32 as f64)
}

impl EmbeddingStore {
    pub fn new(
        fingerprint: u64,
        hidden: usize,
        records: Vec<(String, ItemEmbedding)>,
    ) -> Result<Self, RankError> {
        let mut ids = Vec::with_capacity(records.len());
        let mut entries = Vec::with_capacity(records.len());
        let mut index = HashMap::with_capacity(records.len());
        for (id, e) in records {
            for v in [&e.title, &e.description] {
                if v.len() != hidden {
                    return Err(RankError::DimensionMismatch {
                        expected: hidden,
                        found: v.len(),
                    });
                }
            }
            if index.insert(id.clone(), ids.len()).is_some() {
                return Err(RankError::BadStore(format!("duplicate id {id:?}")));
            }
            ids.push(id);
            entries.push(ItemEmbedding {
                title: to_f32(&e.title),
                description: to_f32(&e.description),
            });
        }
        Ok(EmbeddingStore {
            fingerprint,
            hidden,
            ids,
            entries,
            index,
            skipped: Vec::new(),
        })
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&ItemEmbedding> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ItemEmbedding)> {
        self.ids.iter().map(String::as_str).zip(&self.entries)
    }

    /// Items that could not be embedded, with the reason.
    pub fn skipped(&self) -> &[(String, String)] {
        &self.skipped
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.len() * (8 * self.hidden + 16));
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.hidden as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (id, e) in self.iter() {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for &v in e.title.iter().chain(e.description.iter()) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RankError> {
        let bad = |m: &str| RankError::BadStore(m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], RankError> {
            let s = bytes
                .get(pos..pos.checked_add(n).ok_or_else(|| bad("length overflow"))?)
                .ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != STORE_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != STORE_VERSION {
            return Err(RankError::BadStore(format!("unsupported version {version}")));
        }
        let fingerprint = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let hidden = u32_at(take(4)?) as usize;
        let count = u32_at(take(4)?) as usize;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = u32_at(take(4)?) as usize;
            let id = std::str::from_utf8(take(len)?)
                .map_err(|_| bad("id is not UTF-8"))?
                .to_string();
            let raw = take(hidden.checked_mul(8).ok_or_else(|| bad("length overflow"))?)?;
            let values: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(RankError::BadStore(format!("non-finite value for {id:?}")));
            }
            records.push((
                id,
                ItemEmbedding {
                    title: Array1::from(values[..hidden].to_vec()),
                    description: Array1::from(values[hidden..].to_vec()),
                },
            ));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        EmbeddingStore::new(fingerprint, hidden, records)
    }

    pub fn save(&self, path: &Path) -> Result<(), RankError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| RankError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, RankError> {
        let bytes = std::fs::read(path).map_err(|source| RankError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Encodes an item's own title and description, unmasked.
fn encode_item(
    title: &str,
    description: &str,
    vocab: &Vocabulary,
    opts: EncodeOptions,
) -> Result<crate::tokenizer::InputSequence, TokenizerError> {
    encode_pair(&tokenize(title), &tokenize(description), vocab, opts)
}

/// Embeds every catalog item. Items that fail to encode are skipped with a
/// warning and listed in [`EmbeddingStore::skipped`].
pub fn embed_catalog(
    model: &Model,
    catalog: &Catalog,
    vocab: &Vocabulary,
    opts: EncodeOptions,
    batch_size: usize,
) -> Result<EmbeddingStore, RankError> {
    let mut records = Vec::with_capacity(catalog.len());
    let mut skipped = Vec::new();
    for chunk in catalog.items().chunks(batch_size.max(1)) {
        let embedded: Vec<Result<ItemEmbedding, String>> = chunk
            .par_iter()
            .map(|item| {
                let seq = encode_item(&item.title, &item.description, vocab, opts)
                    .map_err(|e| e.to_string())?;
                embed_sequence(model, &seq).map_err(|e| e.to_string())
            })
            .collect();
        for (item, r) in chunk.iter().zip(embedded) {
            match r {
                Ok(e) => records.push((item.id.clone(), e)),
                Err(reason) => {
                    log::warn!("skipping item {:?}: {reason}", item.id);
                    skipped.push((item.id.clone(), reason));
                }
            }
        }
    }
    let mut store = EmbeddingStore::new(
        model_fingerprint(model, vocab.hash()),
        model.config.hidden,
        records,
    )?;
    store.skipped = skipped;
    Ok(store)
}

/// Raw `(cos_d, cos_t)` columns between the seed and each candidate.
pub fn base_scores<'a, I>(seed: &ItemEmbedding, candidates: I) -> Result<[Vec<f64>; 2], RankError>
where
    I: IntoIterator<Item = (&'a str, &'a ItemEmbedding)>,
{
    let mut cos_d = Vec::new();
    let mut cos_t = Vec::new();
    for (id, c) in candidates {
        let zero = |_| RankError::ZeroVector(id.to_string());
        cos_d.push(cosine(seed.description.view(), c.description.view()).map_err(zero)?);
        cos_t.push(cosine(seed.title.view(), c.title.view()).map_err(zero)?);
    }
    Ok([cos_d, cos_t])
}

/// Cross columns: `C_TDM(t_m, d_s)` and `C_TDM(t_s, d_m)` for each candidate
/// `m`. Each candidate costs two forward passes, counted in `passes`.
pub fn cross_scores(
    model: &Model,
    seed: &CatalogItem,
    candidates: &[&CatalogItem],
    vocab: &Vocabulary,
    opts: EncodeOptions,
    passes: &AtomicUsize,
) -> Result<[Vec<f64>; 2], RankError> {
    let pairs: Vec<(f64, f64)> = candidates
        .par_iter()
        .map(|m| -> Result<(f64, f64), RankError> {
            let sd = encode_item(&m.title, &seed.description, vocab, opts)?;
            let st = encode_item(&seed.title, &m.description, vocab, opts)?;
            let a = pair_tdm_score(model, &sd)?.0;
            let b = pair_tdm_score(model, &st)?.0;
            passes.fetch_add(2, Ordering::Relaxed);
            Ok((a, b))
        })
        .collect::<Result<_, _>>()?;
    Ok([
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1).collect(),
    ])
}

/// `(x − mean) / std` with the population std; degenerate columns give zeros.
pub fn znormalize(column: &[f64]) -> Vec<f64> {
    let n = column.len() as f64;
    if column.len() < 2 {
        return vec![0.0; column.len()];
    }
    let mean = column.iter().sum::<f64>() / n;
    let var = column.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std >= DEGENERATE_STD) {
        return vec![0.0; column.len()];
    }
    column.iter().map(|x| (x - mean) / std).collect()
}

/// Weights for `cos_d`, `cos_t`, `C_TDM(t_m, d_s)` and `C_TDM(t_s, d_m)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas(pub [f64; 4]);

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas([1.0; 4])
    }
}

impl Lambdas {
    pub fn new(values: [f64; 4]) -> Result<Self, RankError> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(Lambdas(values))
        } else {
            Err(RankError::NonFiniteLambda(values))
        }
    }

    /// True when the cross columns carry no weight.
    pub fn bi_encoder_only(&self) -> bool {
        self.0[2] == 0.0 && self.0[3] == 0.0
    }
}

impl std::str::FromStr for Lambdas {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        let values: [f64; 4] = parts
            .try_into()
            .map_err(|v: Vec<f64>| format!("expected 4 comma-separated weights, got {}", v.len()))?;
        Lambdas::new(values).map_err(|e| e.to_string())
    }
}

impl std::fmt::Display for Lambdas {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [a, b, c, d] = self.0;
        write!(f, "{a},{b},{c},{d}")
    }
}

/// Per-candidate raw and normalized scores. Absent cross columns are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub ids: Vec<String>,
    pub raw: [Option<Vec<f64>>; 4],
    pub normalized: [Option<Vec<f64>>; 4],
    pub total: Vec<f64>,
}

impl ScoreTable {
    pub fn new(ids: Vec<String>, raw: [Option<Vec<f64>>; 4], lambdas: Lambdas) -> Self {
        let normalized = raw.clone().map(|c| c.map(|c| znormalize(&c)));
        let mut total = vec![0.0; ids.len()];
        for (col, &l) in normalized.iter().zip(&lambdas.0) {
            if let Some(col) = col {
                debug_assert_eq!(col.len(), ids.len());
                for (t, v) in total.iter_mut().zip(col) {
                    *t += l * v;
                }
            }
        }
        ScoreTable {
            ids,
            raw,
            normalized,
            total,
        }
    }

    /// Descending by total; ties broken by ascending id.
    pub fn into_ranked(self, seed_id: &str) -> RankedList {
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        order.sort_by(|&a, &b| {
            self.total[b]
                .total_cmp(&self.total[a])
                .then_with(|| self.ids[a].cmp(&self.ids[b]))
        });
        let raw = |c: usize, i: usize| self.raw[c].as_ref().map(|v| v[i]);
        RankedList {
            seed_id: seed_id.to_string(),
            ranked: order
                .into_iter()
                .map(|i| RankedEntry {
                    id: self.ids[i].clone(),
                    total: self.total[i],
                    cos_d: raw(0, i).unwrap_or(f64::NAN),
                    cos_t: raw(1, i).unwrap_or(f64::NAN),
                    tdm_sd: raw(2, i),
                    tdm_st: raw(3, i),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub id: String,
    pub total: f64,
    pub cos_d: f64,
    pub cos_t: f64,
    /// `C_TDM(t_m, d_s)`; absent under bi-encoder-only inference.
    pub tdm_sd: Option<f64>,
    /// `C_TDM(t_s, d_m)`.
    pub tdm_st: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub seed_id: String,
    pub ranked: Vec<RankedEntry>,
}

impl RankedList {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ranked.iter().map(|e| e.id.as_str())
    }

    /// 1-based position of `id`, if ranked.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.ranked.iter().position(|e| e.id == id).map(|p| p + 1)
    }

    pub fn truncated(&self, top: usize) -> RankedList {
        RankedList {
            seed_id: self.seed_id.clone(),
            ranked: self.ranked.iter().take(top).cloned().collect(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("serializable") + "\n"
    }
}

/// Ranks candidates from a fixed pool against seeds drawn from that pool.
pub struct Ranker<'a> {
    model: &'a Model,
    vocab: &'a Vocabulary,
    catalog: &'a Catalog,
    store: &'a EmbeddingStore,
    opts: EncodeOptions,
    cross_passes: AtomicUsize,
}

impl<'a> Ranker<'a> {
    /// Fails when `store` was not produced by `model` with `vocab`.
    pub fn new(
        model: &'a Model,
        vocab: &'a Vocabulary,
        catalog: &'a Catalog,
        store: &'a EmbeddingStore,
        opts: EncodeOptions,
    ) -> Result<Self, RankError> {
        let expected = model_fingerprint(model, vocab.hash());
        if store.fingerprint() != expected {
            return Err(RankError::FingerprintMismatch {
                store: store.fingerprint(),
                model: expected,
            });
        }
        Ok(Ranker {
            model,
            vocab,
            catalog,
            store,
            opts,
            cross_passes: AtomicUsize::new(0),
        })
    }

    /// Forward passes spent on cross scores since construction.
    pub fn cross_passes(&self) -> usize {
        self.cross_passes.load(Ordering::Relaxed)
    }

    pub fn catalog(&self) -> &Catalog {
        self.catalog
    }

    /// Candidate pool: every embedded catalog item except the seed.
    fn candidates(&self, seed_id: &str) -> Vec<&'a CatalogItem> {
        self.catalog
            .items()
            .iter()
            .filter(|i| i.id != seed_id && self.store.get(&i.id).is_some())
            .collect()
    }

    pub fn score_table(
        &self,
        seed_id: &str,
        lambdas: Lambdas,
        skip_cross: bool,
    ) -> Result<ScoreTable, RankError> {
        let seed = self
            .catalog
            .get(seed_id)
            .ok_or_else(|| RankError::UnknownSeed(seed_id.to_string()))?;
        let seed_emb = self
            .store
            .get(seed_id)
            .ok_or_else(|| RankError::UnknownSeed(seed_id.to_string()))?;
        let candidates = self.candidates(seed_id);
        if candidates.is_empty() {
            return Err(RankError::EmptyCandidates(seed_id.to_string()));
        }
        let [cos_d, cos_t] = base_scores(
            seed_emb,
            candidates
                .iter()
                .map(|c| (c.id.as_str(), self.store.get(&c.id).expect("filtered"))),
        )?;
        let cross = if skip_cross || lambdas.bi_encoder_only() {
            [None, None]
        } else {
            let [sd, st] = cross_scores(
                self.model,
                seed,
                &candidates,
                self.vocab,
                self.opts,
                &self.cross_passes,
            )?;
            [Some(sd), Some(st)]
        };
        let [sd, st] = cross;
        let ids = candidates.iter().map(|c| c.id.clone()).collect();
        Ok(ScoreTable::new(ids, [Some(cos_d), Some(cos_t), sd, st], lambdas))
    }

    pub fn rank(
        &self,
        seed_id: &str,
        lambdas: Lambdas,
        skip_cross: bool,
    ) -> Result<RankedList, RankError> {
        Ok(self
            .score_table(seed_id, lambdas, skip_cross)?
            .into_ranked(seed_id))
    }

    /// Rankings for several seeds, computed in parallel, returned in input order.
    pub fn rank_all(
        &self,
        seeds: &[String],
        lambdas: Lambdas,
        skip_cross: bool,
    ) -> Result<Vec<RankedList>, RankError> {
        seeds
            .par_iter()
            .map(|s| self.rank(s, lambdas, skip_cross))
            .collect()
    }
}

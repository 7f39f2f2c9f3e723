//! Ranking metrics averaged over (seed, positive) pairs, and the evaluation
//! driver that produces rankings for every annotated seed.
//!
//! Percentile rank is reported with higher-is-better orientation:
//! `(N − rank) / (N − 1)`, so a positive ranked first scores 1 and one
//! ranked last scores 0.

use std::collections::{BTreeMap, HashMap};

use clap::ValueEnum;
use rayon::prelude::*;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::catalog::{AnnotationSet, Catalog};
use crate::encoder::Model;
use crate::ranker::{EmbeddingStore, Lambdas, RankError, RankedList, Ranker, ScoreTable};
use crate::tokenizer::{EncodeOptions, Vocabulary};

pub const MPR_ORIENTATION: &str = "(N - rank) / (N - 1); 1.0 = positive ranked first";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no ranking for annotated seed {0:?}")]
    MissingRanking(String),
    #[error("positive {positive:?} of seed {seed:?} is not in the candidate pool")]
    PositiveNotRanked { seed: String, positive: String },
    #[error("seed {seed:?} has a pool of {size} items; percentile rank needs at least 2")]
    PoolTooSmall { seed: String, size: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("annotation set has no (seed, positive) pairs")]
    NoPairs,
    #[error(transparent)]
    Rank(#[from] RankError),
}

/// Seed id → its ranked candidates.
pub type Rankings = BTreeMap<String, RankedList>;

/// Where a positive landed: 1-based `rank` in a pool of `pool` candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairRank {
    pub rank: usize,
    pub pool: usize,
}

/// Ranks of every annotated (seed, positive) pair, in annotation order.
pub fn pair_ranks(
    rankings: &Rankings,
    annotations: &AnnotationSet,
) -> Result<Vec<PairRank>, MetricsError> {
    let mut out = Vec::with_capacity(annotations.pair_count());
    for (seed, positives) in &annotations.entries {
        let list = rankings
            .get(seed)
            .ok_or_else(|| MetricsError::MissingRanking(seed.clone()))?;
        let position: HashMap<&str, usize> =
            list.ids().enumerate().map(|(i, id)| (id, i + 1)).collect();
        for p in positives {
            let rank = *position
                .get(p.as_str())
                .ok_or_else(|| MetricsError::PositiveNotRanked {
                    seed: seed.clone(),
                    positive: p.clone(),
                })?;
            out.push(PairRank {
                rank,
                pool: list.ranked.len(),
            });
        }
    }
    if out.is_empty() {
        return Err(MetricsError::NoPairs);
    }
    Ok(out)
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len() as f64;
    values.sum::<f64>() / n
}

pub fn hit_ratio_at_k(
    rankings: &Rankings,
    annotations: &AnnotationSet,
    k: usize,
) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    let ranks = pair_ranks(rankings, annotations)?;
    Ok(mean(ranks.iter().map(|r| f64::from(u8::from(r.rank <= k)))))
}

pub fn mean_reciprocal_rank(
    rankings: &Rankings,
    annotations: &AnnotationSet,
) -> Result<f64, MetricsError> {
    let ranks = pair_ranks(rankings, annotations)?;
    Ok(mean(ranks.iter().map(|r| 1.0 / r.rank as f64)))
}

pub fn mean_percentile_rank(
    rankings: &Rankings,
    annotations: &AnnotationSet,
) -> Result<f64, MetricsError> {
    for (seed, list) in rankings {
        if annotations.entries.contains_key(seed) && list.ranked.len() < 2 {
            return Err(MetricsError::PoolTooSmall {
                seed: seed.clone(),
                size: list.ranked.len(),
            });
        }
    }
    let ranks = pair_ranks(rankings, annotations)?;
    Ok(mean(
        ranks
            .iter()
            .map(|r| (r.pool - r.rank) as f64 / (r.pool - 1) as f64),
    ))
}

/// Hit ratios keyed `hr@k`, serialized in ascending k.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(from = "BTreeMap<String, f64>")]
pub struct HitRatios(pub Vec<(usize, f64)>);

impl HitRatios {
    pub fn get(&self, k: usize) -> Option<f64> {
        self.0.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

impl Serialize for HitRatios {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(&format!("hr@{k}"), v)?;
        }
        map.end()
    }
}

impl From<BTreeMap<String, f64>> for HitRatios {
    fn from(m: BTreeMap<String, f64>) -> Self {
        let mut v: Vec<(usize, f64)> = m
            .into_iter()
            .filter_map(|(k, v)| Some((k.strip_prefix("hr@")?.parse().ok()?, v)))
            .collect();
        v.sort_by_key(|p| p.0);
        HitRatios(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub mpr: f64,
    pub mrr: f64,
    pub hr: HitRatios,
}

pub fn evaluate_rankings(
    rankings: &Rankings,
    annotations: &AnnotationSet,
    ks: &[usize],
) -> Result<MetricValues, MetricsError> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let hr = ks
        .iter()
        .map(|&k| Ok((k, hit_ratio_at_k(rankings, annotations, k)?)))
        .collect::<Result<_, MetricsError>>()?;
    Ok(MetricValues {
        mpr: mean_percentile_rank(rankings, annotations)?,
        mrr: mean_reciprocal_rank(rankings, annotations)?,
        hr: HitRatios(hr),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Every catalog item is a candidate.
    #[default]
    Full,
    /// Candidates are restricted to annotated items.
    Subset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub seeds: usize,
    pub pairs: usize,
    /// Candidates ranked per seed.
    pub pool_sizes: BTreeMap<String, usize>,
    pub cross_passes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub lambdas: Lambdas,
    pub ks: Vec<usize>,
    pub metrics: MetricValues,
    pub counts: EvalCounts,
    pub checkpoint_fingerprint: String,
    pub mpr_orientation: String,
}

fn header_row(ks: &[usize]) -> String {
    let mut s = format!("{:<28}{:>9}{:>9}", "model", "MPR", "MRR");
    for k in ks.iter().rev() {
        s.push_str(&format!("{:>10}", format!("HR@{k}")));
    }
    s
}

fn value_row(name: &str, m: &MetricValues) -> String {
    let pct = |v: f64| format!("{:.1}%", 100.0 * v);
    let mut s = format!("{:<28}{:>9}{:>9}", name, pct(m.mpr), pct(m.mrr));
    for (_, v) in m.hr.0.iter().rev() {
        s.push_str(&format!("{:>10}", pct(*v)));
    }
    s
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    /// Aligned table: MPR, MRR, then HR@k in descending k.
    pub fn to_table(&self, name: &str) -> String {
        format!(
            "{}\n{}\nmode {:?}, {} seeds, {} pairs, MPR = {}\n",
            header_row(&self.ks),
            value_row(name, &self.metrics),
            self.mode,
            self.counts.seeds,
            self.counts.pairs,
            MPR_ORIENTATION
        )
    }
}

/// Everything needed to rank annotated seeds.
#[derive(Clone, Copy)]
pub struct EvalInputs<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocabulary,
    pub catalog: &'a Catalog,
    pub store: &'a EmbeddingStore,
    pub annotations: &'a AnnotationSet,
    pub opts: EncodeOptions,
}

/// Raw score tables for every annotated seed under `mode`.
struct SeedTables {
    tables: BTreeMap<String, ScoreTable>,
    cross_passes: usize,
}

fn seed_tables(
    inputs: &EvalInputs<'_>,
    mode: EvalMode,
    with_cross: bool,
) -> Result<SeedTables, MetricsError> {
    let pool: Catalog = match mode {
        EvalMode::Full => inputs.catalog.clone(),
        EvalMode::Subset => inputs.catalog.restrict(&inputs.annotations.all_ids()),
    };
    let ranker = Ranker::new(inputs.model, inputs.vocab, &pool, inputs.store, inputs.opts)?;
    let seeds: Vec<&String> = inputs.annotations.entries.keys().collect();
    // the weights only matter for the totals, which are recomputed per use
    let lambdas = if with_cross {
        Lambdas::default()
    } else {
        Lambdas([1.0, 1.0, 0.0, 0.0])
    };
    let tables: Vec<ScoreTable> = seeds
        .par_iter()
        .map(|s| ranker.score_table(s, lambdas, !with_cross))
        .collect::<Result<_, _>>()?;
    Ok(SeedTables {
        tables: seeds.into_iter().cloned().zip(tables).collect(),
        cross_passes: ranker.cross_passes(),
    })
}

fn report_from_tables(
    inputs: &EvalInputs<'_>,
    tables: &SeedTables,
    lambdas: Lambdas,
    ks: &[usize],
    mode: EvalMode,
) -> Result<(EvalReport, Rankings), MetricsError> {
    let rankings: Rankings = tables
        .tables
        .iter()
        .map(|(seed, t)| {
            let reweighted = ScoreTable::new(t.ids.clone(), t.raw.clone(), lambdas);
            (seed.clone(), reweighted.into_ranked(seed))
        })
        .collect();
    let metrics = evaluate_rankings(&rankings, inputs.annotations, ks)?;
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let report = EvalReport {
        mode,
        lambdas,
        ks,
        metrics,
        counts: EvalCounts {
            seeds: rankings.len(),
            pairs: inputs.annotations.pair_count(),
            pool_sizes: rankings
                .iter()
                .map(|(s, r)| (s.clone(), r.ranked.len()))
                .collect(),
            cross_passes: tables.cross_passes,
        },
        checkpoint_fingerprint: format!("{:016x}", inputs.store.fingerprint()),
        mpr_orientation: MPR_ORIENTATION.to_string(),
    };
    Ok((report, rankings))
}

/// Ranks every annotated seed under `lambdas` and scores the rankings.
pub fn evaluate(
    inputs: &EvalInputs<'_>,
    lambdas: Lambdas,
    ks: &[usize],
    mode: EvalMode,
) -> Result<(EvalReport, Rankings), MetricsError> {
    let tables = seed_tables(inputs, mode, !lambdas.bi_encoder_only())?;
    report_from_tables(inputs, &tables, lambdas, ks, mode)
}

/// The seven inference variants: each eliminates some scores by zeroing
/// their weights.
pub fn ablation_grid() -> Vec<(&'static str, Lambdas)> {
    vec![
        ("RecoBERT λ3,λ4←0,0", Lambdas([1.0, 1.0, 0.0, 0.0])),
        ("RecoBERT λ1,λ2←0,0", Lambdas([0.0, 0.0, 1.0, 1.0])),
        ("RecoBERT λ1←0", Lambdas([0.0, 1.0, 1.0, 1.0])),
        ("RecoBERT λ2←0", Lambdas([1.0, 0.0, 1.0, 1.0])),
        ("RecoBERT λ3←0", Lambdas([1.0, 1.0, 0.0, 1.0])),
        ("RecoBERT λ4←0", Lambdas([1.0, 1.0, 1.0, 0.0])),
        ("RecoBERT", Lambdas::default()),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    pub fn to_table(&self) -> String {
        let Some(first) = self.rows.first() else {
            return String::new();
        };
        let mut s = header_row(&first.report.ks) + "\n";
        for row in &self.rows {
            s.push_str(&value_row(&row.name, &row.report.metrics));
            s.push('\n');
        }
        s.push_str(&format!(
            "mode {:?}, {} seeds, {} pairs, MPR = {}\n",
            first.report.mode, first.report.counts.seeds, first.report.counts.pairs, MPR_ORIENTATION
        ));
        s
    }

    pub fn row(&self, name: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.name == name).map(|r| &r.report)
    }
}

/// Evaluates every ablation variant. Cross scores are computed once and
/// reweighted per variant.
pub fn ablate(
    inputs: &EvalInputs<'_>,
    ks: &[usize],
    mode: EvalMode,
) -> Result<AblationReport, MetricsError> {
    let tables = seed_tables(inputs, mode, true)?;
    let rows = ablation_grid()
        .into_iter()
        .map(|(name, l)| {
            let (report, _) = report_from_tables(inputs, &tables, l, ks, mode)?;
            Ok(AblationRow {
                name: name.to_string(),
                report,
            })
        })
        .collect::<Result<_, MetricsError>>()?;
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranker::RankedEntry;
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeSet;

    fn list(seed: &str, ids: &[&str]) -> RankedList {
        RankedList {
            seed_id: seed.into(),
            ranked: ids
                .iter()
                .enumerate()
                .map(|(i, id)| RankedEntry {
                    id: id.to_string(),
                    total: -(i as f64),
                    cos_d: 0.0,
                    cos_t: 0.0,
                    tdm_sd: None,
                    tdm_st: None,
                })
                .collect(),
        }
    }

    fn ann(pairs: &[(&str, &[&str])]) -> AnnotationSet {
        AnnotationSet {
            entries: pairs
                .iter()
                .map(|(s, p)| (s.to_string(), p.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>()))
                .collect(),
        }
    }

    fn rankings(lists: Vec<RankedList>) -> Rankings {
        lists.into_iter().map(|l| (l.seed_id.clone(), l)).collect()
    }

    #[test]
    fn hit_ratio_examples() {
        let r = rankings(vec![list("s", &["a", "b", "c"])]);
        let a = ann(&[("s", &["b"])]);
        assert_eq!(hit_ratio_at_k(&r, &a, 1).unwrap(), 0.0);
        assert_eq!(hit_ratio_at_k(&r, &a, 2).unwrap(), 1.0);
        assert_eq!(hit_ratio_at_k(&r, &a, 3).unwrap(), 1.0);
        assert!(matches!(hit_ratio_at_k(&r, &a, 0), Err(MetricsError::InvalidK)));

        let r = rankings(vec![
            list("s1", &["a", "x", "y", "z", "w"]),
            list("s2", &["a", "x", "y", "z", "b"]),
        ]);
        let a = ann(&[("s1", &["a"]), ("s2", &["a", "b"])]);
        assert_abs_diff_eq!(hit_ratio_at_k(&r, &a, 3).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn reciprocal_rank_examples() {
        let r = rankings(vec![list("s", &["a", "b", "c"])]);
        assert_abs_diff_eq!(mean_reciprocal_rank(&r, &ann(&[("s", &["c"])])).unwrap(), 1.0 / 3.0);
        let r = rankings(vec![
            list("s1", &["p", "q", "r", "t"]),
            list("s2", &["q", "p", "r", "t"]),
            list("s3", &["q", "r", "t", "p"]),
        ]);
        let a = ann(&[("s1", &["p"]), ("s2", &["p"]), ("s3", &["p"])]);
        assert_abs_diff_eq!(mean_reciprocal_rank(&r, &a).unwrap(), (1.0 + 0.5 + 0.25) / 3.0);
    }

    #[test]
    fn percentile_rank_examples() {
        let ids: Vec<String> = (0..100).map(|i| format!("c{i:03}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let r = rankings(vec![list("s", &refs)]);
        let mpr = |p: &str| mean_percentile_rank(&r, &ann(&[("s", &[p])])).unwrap();
        assert_eq!(mpr("c000"), 1.0);
        assert_eq!(mpr("c099"), 0.0);
        assert_abs_diff_eq!(mpr("c049"), 50.0 / 99.0, epsilon = 1e-15);
        let tiny = rankings(vec![list("s", &["a"])]);
        assert!(matches!(
            mean_percentile_rank(&tiny, &ann(&[("s", &["a"])])),
            Err(MetricsError::PoolTooSmall { size: 1, .. })
        ));
    }

    #[test]
    fn missing_rankings_and_positives_are_errors() {
        let r = rankings(vec![list("s", &["a", "b"])]);
        assert!(matches!(
            mean_reciprocal_rank(&r, &ann(&[("t", &["a"])])),
            Err(MetricsError::MissingRanking(s)) if s == "t"
        ));
        assert!(matches!(
            mean_reciprocal_rank(&r, &ann(&[("s", &["z"])])),
            Err(MetricsError::PositiveNotRanked { .. })
        ));
        assert!(matches!(mean_reciprocal_rank(&r, &ann(&[])), Err(MetricsError::NoPairs)));
    }

    #[test]
    fn report_keys_and_table() {
        let r = rankings(vec![list("s", &["a", "b", "c", "d", "e", "f"])]);
        let a = ann(&[("s", &["b", "e"])]);
        let m = evaluate_rankings(&r, &a, &[50, 5, 10, 5]).unwrap();
        let json = serde_json::to_value(&m).unwrap();
        let keys: BTreeSet<&str> = json["hr"].as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, BTreeSet::from(["hr@5", "hr@10", "hr@50"]));
        let vals: Vec<f64> = m.hr.0.iter().map(|p| p.1).collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        let back: MetricValues = serde_json::from_value(json).unwrap();
        assert_eq!(back, m);
        let row = value_row("x", &m);
        assert!(row.contains("100.0%"));
        let header = header_row(&[5, 10, 50]);
        assert!(header.find("HR@50").unwrap() < header.find("HR@10").unwrap());
    }

    #[test]
    fn ablation_grid_has_seven_rows() {
        let g = ablation_grid();
        assert_eq!(g.len(), 7);
        let distinct: BTreeSet<String> = g.iter().map(|(_, l)| l.to_string()).collect();
        assert_eq!(distinct.len(), 7);
        assert_eq!(g.last().unwrap().1, Lambdas::default());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        /// One seed with `n` candidates in a shuffled order and a non-empty
        /// positive subset.
        fn instance() -> impl Strategy<Value = (Vec<String>, Vec<String>)> {
            (2usize..12)
                .prop_flat_map(|n| {
                    let ids: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
                    (Just(ids.clone()).prop_shuffle(), proptest::sample::subsequence(ids, 1..=n))
                })
        }

        fn setup(order: &[String], positives: &[String]) -> (Rankings, AnnotationSet) {
            let refs: Vec<&str> = order.iter().map(String::as_str).collect();
            let pos: Vec<&str> = positives.iter().map(String::as_str).collect();
            (rankings(vec![list("s", &refs)]), ann(&[("s", &pos)]))
        }

        proptest! {
            #[test]
            fn hit_ratio_is_monotone_and_bounded((order, positives) in instance()) {
                let (r, a) = setup(&order, &positives);
                let mut prev = 0.0;
                for k in 1..=order.len() {
                    let hr = hit_ratio_at_k(&r, &a, k).unwrap();
                    prop_assert!((0.0..=1.0).contains(&hr));
                    prop_assert!(hr >= prev);
                    prev = hr;
                }
                prop_assert_eq!(prev, 1.0);
            }

            #[test]
            fn mrr_bounds((order, positives) in instance()) {
                let (r, a) = setup(&order, &positives);
                let mrr = mean_reciprocal_rank(&r, &a).unwrap();
                prop_assert!(mrr >= 1.0 / order.len() as f64 && mrr <= 1.0);
                prop_assert!(mrr >= hit_ratio_at_k(&r, &a, 1).unwrap());
            }

            #[test]
            fn reversing_ranking_mirrors_mpr((order, positives) in instance()) {
                let (r, a) = setup(&order, &positives);
                let reversed: Vec<String> = order.iter().rev().cloned().collect();
                let (rr, _) = setup(&reversed, &positives);
                let m = mean_percentile_rank(&r, &a).unwrap();
                let mr = mean_percentile_rank(&rr, &a).unwrap();
                prop_assert!((0.0..=1.0).contains(&m));
                prop_assert!((m + mr - 1.0).abs() < 1e-12);
            }
        }
    }
}

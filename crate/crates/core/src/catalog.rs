//! Catalogs of title/description items and expert annotation sets.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("record {record}: missing field `{field}`")]
    MissingField { record: usize, field: String },
    #[error("record {record}: {message}")]
    Malformed { record: usize, message: String },
    #[error("duplicate item id `{0}`")]
    DuplicateId(String),
    #[error("item `{id}`: empty {field}")]
    EmptyText { id: String, field: &'static str },
    #[error("missing CSV column `{0}`")]
    MissingColumn(String),
    #[error("record {record}: unknown item id `{id}`")]
    UnknownId { id: String, record: usize },
    #[error("split of {items} items with validation fraction {fraction} leaves one side empty")]
    DegenerateSplit { items: usize, fraction: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CatalogError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CatalogError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// NFKC-normalizes and trims a text field.
pub fn normalize_text(s: &str) -> String {
    s.nfkc().collect::<String>().trim().to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogItem {
    pub id: String,
    pub title: String,
    pub description: String,
}

impl CatalogItem {
    /// Builds a normalized item, rejecting empty ids or texts.
    pub fn new(
        id: impl AsRef<str>,
        title: impl AsRef<str>,
        description: impl AsRef<str>,
    ) -> Result<Self, CatalogError> {
        let id = normalize_text(id.as_ref());
        let title = normalize_text(title.as_ref());
        let description = normalize_text(description.as_ref());
        if id.is_empty() {
            return Err(CatalogError::EmptyText { id, field: "id" });
        }
        if title.is_empty() {
            return Err(CatalogError::EmptyText { id, field: "title" });
        }
        if description.is_empty() {
            return Err(CatalogError::EmptyText {
                id,
                field: "description",
            });
        }
        Ok(CatalogItem {
            id,
            title,
            description,
        })
    }
}

/// An ordered, id-indexed collection of items. Immutable once built.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    items: Vec<CatalogItem>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn from_items(items: Vec<CatalogItem>) -> Result<Self, CatalogError> {
        let mut index = HashMap::with_capacity(items.len());
        for (pos, item) in items.iter().enumerate() {
            if index.insert(item.id.clone(), pos).is_some() {
                return Err(CatalogError::DuplicateId(item.id.clone()));
            }
        }
        Ok(Catalog { items, index })
    }

    pub fn items(&self) -> &[CatalogItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&CatalogItem> {
        self.position(id).map(|p| &self.items[p])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Sub-catalog restricted to `ids`, in catalog order.
    pub fn restrict(&self, ids: &BTreeSet<String>) -> Catalog {
        let items = self
            .items
            .iter()
            .filter(|it| ids.contains(&it.id))
            .cloned()
            .collect();
        Catalog::from_items(items).expect("subset of a valid catalog")
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CatalogError> {
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&serde_json::to_string(item).expect("serializable"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| CatalogError::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CatalogFormat {
    Jsonl,
    Csv,
}

impl CatalogFormat {
    /// Guesses the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => CatalogFormat::Csv,
            _ => CatalogFormat::Jsonl,
        }
    }
}

const CATALOG_KEYS: [&str; 3] = ["id", "title", "description"];

pub fn load_catalog(path: &Path, format: CatalogFormat) -> Result<Catalog, CatalogError> {
    let items = match format {
        CatalogFormat::Jsonl => read_jsonl_items(path)?,
        CatalogFormat::Csv => read_csv_items(path)?,
    };
    Catalog::from_items(items)
}

fn read_jsonl_items(path: &Path) -> Result<Vec<CatalogItem>, CatalogError> {
    let file = File::open(path).map_err(|e| CatalogError::io(path, e))?;
    let mut items = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let record = lineno + 1;
        let line = line.map_err(|e| CatalogError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| CatalogError::Malformed {
                record,
                message: e.to_string(),
            })?;
        let obj = value.as_object().ok_or_else(|| CatalogError::Malformed {
            record,
            message: "expected a JSON object".into(),
        })?;
        if let Some(extra) = obj.keys().find(|k| !CATALOG_KEYS.contains(&k.as_str())) {
            return Err(CatalogError::Malformed {
                record,
                message: format!("unexpected key `{extra}`"),
            });
        }
        let mut fields = [""; 3];
        for (slot, key) in fields.iter_mut().zip(CATALOG_KEYS) {
            *slot = obj
                .get(key)
                .and_then(|v| v.as_str())
                .ok_or_else(|| CatalogError::MissingField {
                    record,
                    field: key.to_string(),
                })?;
        }
        items.push(CatalogItem::new(fields[0], fields[1], fields[2])?);
    }
    Ok(items)
}

fn read_csv_items(path: &Path) -> Result<Vec<CatalogItem>, CatalogError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let headers = reader.headers().map_err(|e| csv_io(path, e))?.clone();
    let mut cols = [0usize; 3];
    for (slot, key) in cols.iter_mut().zip(CATALOG_KEYS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == key)
            .ok_or_else(|| CatalogError::MissingColumn(key.to_string()))?;
    }
    let mut items = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let record = row + 1;
        let rec = rec.map_err(|e| CatalogError::Malformed {
            record,
            message: e.to_string(),
        })?;
        let field = |i: usize, key: &str| {
            rec.get(cols[i]).ok_or_else(|| CatalogError::MissingField {
                record,
                field: key.to_string(),
            })
        };
        items.push(CatalogItem::new(
            field(0, "id")?,
            field(1, "title")?,
            field(2, "description")?,
        )?);
    }
    Ok(items)
}

fn csv_io(path: &Path, e: csv::Error) -> CatalogError {
    CatalogError::io(path, std::io::Error::other(e.to_string()))
}

/// Column names for the wine-review CSV importer.
#[derive(Debug, Clone)]
pub struct WineColumns {
    /// Column holding a stable id. Row index is used when absent.
    pub id: Option<String>,
    pub winery: String,
    /// Explicit vintage column; when absent the year is pulled from `title`.
    pub year: Option<String>,
    /// Source title column the vintage may be embedded in.
    pub title: Option<String>,
    pub name: String,
    pub variety: String,
    pub description: String,
}

impl Default for WineColumns {
    fn default() -> Self {
        WineColumns {
            id: None,
            winery: "winery".into(),
            year: None,
            title: Some("title".into()),
            name: "designation".into(),
            variety: "variety".into(),
            description: "description".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ImportSummary {
    pub rows: usize,
    pub imported: usize,
    pub dropped_empty_description: usize,
    pub unreadable_rows: usize,
}

/// Finds a plausible vintage (1900..=2099) among the words of `text`.
pub fn extract_year(text: &str) -> Option<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_ascii_digit()))
        .find(|w| {
            w.len() == 4
                && w.chars().all(|c| c.is_ascii_digit())
                && (w.starts_with("19") || w.starts_with("20"))
        })
        .map(str::to_string)
}

/// Joins the non-empty title components with single spaces.
pub fn compose_wine_title(winery: &str, year: &str, name: &str, variety: &str) -> String {
    [winery, year, name, variety]
        .iter()
        .flat_map(|part| part.split_whitespace())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn import_wine_csv(
    path: &Path,
    columns: &WineColumns,
) -> Result<(Catalog, ImportSummary), CatalogError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let headers = reader.headers().map_err(|e| csv_io(path, e))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CatalogError::MissingColumn(name.to_string()))
    };
    let winery = find(&columns.winery)?;
    let name = find(&columns.name)?;
    let variety = find(&columns.variety)?;
    let description = find(&columns.description)?;
    let id_col = columns.id.as_deref().map(find).transpose()?;
    let year_col = columns.year.as_deref().map(find).transpose()?;
    let title_col = match (&columns.year, &columns.title) {
        (None, Some(t)) => headers.iter().position(|h| h.trim() == t),
        _ => None,
    };

    let mut summary = ImportSummary::default();
    let mut items = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        summary.rows += 1;
        let Ok(rec) = rec else {
            summary.unreadable_rows += 1;
            log::warn!("wine csv row {}: unreadable, skipped", row + 1);
            continue;
        };
        let get = |i: usize| rec.get(i).unwrap_or("");
        let desc = normalize_text(get(description));
        if desc.is_empty() {
            summary.dropped_empty_description += 1;
            continue;
        }
        let year = match (year_col, title_col) {
            (Some(c), _) => get(c).trim().to_string(),
            (None, Some(c)) => extract_year(get(c)).unwrap_or_default(),
            (None, None) => String::new(),
        };
        let title = compose_wine_title(get(winery), &year, get(name), get(variety));
        let id = match id_col {
            Some(c) => get(c).to_string(),
            None => row.to_string(),
        };
        match CatalogItem::new(&id, &title, &desc) {
            Ok(item) => items.push(item),
            Err(CatalogError::EmptyText { .. }) => {
                summary.unreadable_rows += 1;
                log::warn!("wine csv row {}: empty id or title, skipped", row + 1);
            }
            Err(e) => return Err(e),
        }
    }
    summary.imported = items.len();
    Ok((Catalog::from_items(items)?, summary))
}

/// How annotation records refer to catalog items.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationKey {
    #[default]
    Id,
    Title,
}

/// Seed id → set of positive ids, all resolved against a catalog.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    pub entries: BTreeMap<String, BTreeSet<String>>,
}

impl AnnotationSet {
    pub fn pair_count(&self) -> usize {
        self.entries.values().map(BTreeSet::len).sum()
    }

    /// Every id mentioned as a seed or a positive.
    pub fn all_ids(&self) -> BTreeSet<String> {
        let mut ids = BTreeSet::new();
        for (seed, pos) in &self.entries {
            ids.insert(seed.clone());
            ids.extend(pos.iter().cloned());
        }
        ids
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CatalogError> {
        let mut out = String::new();
        for (seed, pos) in &self.entries {
            let rec = AnnotationRecord {
                seed_id: seed.clone(),
                positive_ids: pos.iter().cloned().collect(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("serializable"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| CatalogError::io(path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    seed_id: String,
    positive_ids: Vec<String>,
}

#[derive(Debug, Default)]
pub struct AnnotationLoad {
    pub annotations: AnnotationSet,
    pub self_references_removed: usize,
}

pub fn load_annotations(
    path: &Path,
    catalog: &Catalog,
    key: AnnotationKey,
) -> Result<AnnotationLoad, CatalogError> {
    let title_index: HashMap<&str, &str> = match key {
        AnnotationKey::Id => HashMap::new(),
        AnnotationKey::Title => catalog
            .items()
            .iter()
            .map(|it| (it.title.as_str(), it.id.as_str()))
            .collect(),
    };
    let resolve = |raw: &str, record: usize| -> Result<String, CatalogError> {
        let norm = normalize_text(raw);
        let hit = match key {
            AnnotationKey::Id => catalog.get(&norm).map(|it| it.id.clone()),
            AnnotationKey::Title => title_index.get(norm.as_str()).map(|s| s.to_string()),
        };
        hit.ok_or(CatalogError::UnknownId { id: norm, record })
    };

    let file = File::open(path).map_err(|e| CatalogError::io(path, e))?;
    let mut out = AnnotationLoad::default();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let record = lineno + 1;
        let line = line.map_err(|e| CatalogError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| CatalogError::Malformed {
                record,
                message: e.to_string(),
            })?;
        let seed = resolve(&rec.seed_id, record)?;
        let mut positives = BTreeSet::new();
        for raw in &rec.positive_ids {
            let id = resolve(raw, record)?;
            if id == seed {
                out.self_references_removed += 1;
                log::warn!("annotation record {record}: seed `{seed}` lists itself, dropped");
                continue;
            }
            positives.insert(id);
        }
        if positives.is_empty() {
            log::warn!("annotation record {record}: seed `{seed}` has no positives, skipped");
            continue;
        }
        out.annotations
            .entries
            .entry(seed)
            .or_default()
            .extend(positives);
    }
    Ok(out)
}

/// Deterministic item-level train/validation split.
pub fn split_train_val(
    catalog: &Catalog,
    val_fraction: f64,
    seed: u64,
) -> Result<(Catalog, Catalog), CatalogError> {
    let n = catalog.len();
    let degenerate = CatalogError::DegenerateSplit {
        items: n,
        fraction: val_fraction,
    };
    if !(val_fraction > 0.0 && val_fraction < 1.0) || n < 2 {
        return Err(degenerate);
    }
    let n_val = (val_fraction * n as f64).ceil() as usize;
    if n_val < 1 || n_val >= n {
        return Err(degenerate);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val_idx = order[..n_val].to_vec();
    let mut train_idx = order[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |idx: &[usize]| {
        Catalog::from_items(idx.iter().map(|&i| catalog.items[i].clone()).collect())
            .expect("subset of a valid catalog")
    };
    Ok((pick(&train_idx), pick(&val_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str, suffix: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn small_catalog(n: usize) -> Catalog {
        Catalog::from_items(
            (0..n)
                .map(|i| CatalogItem::new(format!("i{i}"), format!("t{i}"), format!("d{i}")).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn loads_valid_jsonl() {
        let f = write_tmp(
            r#"{"id":"a","title":"Red one","description":"Dry."}
{"id":"b","title":" White ","description":"Crisp."}

{"id":"c","title":"Rosé","description":"Pink."}
"#,
            ".jsonl",
        );
        let cat = load_catalog(f.path(), CatalogFormat::Jsonl).unwrap();
        assert_eq!(cat.len(), 3);
        assert_eq!(cat.index.len(), 3);
        assert_eq!(cat.get("b").unwrap().title, "White");
        for item in cat.items() {
            assert_eq!(cat.get(&item.id), Some(item));
        }
    }

    #[test]
    fn rejects_duplicate_ids() {
        let f = write_tmp(
            "{\"id\":\"w1\",\"title\":\"a\",\"description\":\"b\"}\n{\"id\":\"w1\",\"title\":\"c\",\"description\":\"d\"}\n",
            ".jsonl",
        );
        match load_catalog(f.path(), CatalogFormat::Jsonl) {
            Err(CatalogError::DuplicateId(id)) => assert_eq!(id, "w1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_empty_description_and_missing_field() {
        let f = write_tmp("{\"id\":\"w1\",\"title\":\"a\",\"description\":\"\"}\n", ".jsonl");
        assert!(matches!(
            load_catalog(f.path(), CatalogFormat::Jsonl),
            Err(CatalogError::EmptyText { field: "description", .. })
        ));
        let f = write_tmp("{\"id\":\"w1\",\"title\":\"a\"}\n", ".jsonl");
        assert!(matches!(
            load_catalog(f.path(), CatalogFormat::Jsonl),
            Err(CatalogError::MissingField { record: 1, .. })
        ));
    }

    #[test]
    fn loads_csv_catalog() {
        let f = write_tmp("id,title,description\na,T1,D1\nb,T2,D2\n", ".csv");
        let cat = load_catalog(f.path(), CatalogFormat::Csv).unwrap();
        assert_eq!(cat.len(), 2);
    }

    #[test]
    fn nfkc_applied_at_load() {
        let item = CatalogItem::new("x", "ﬁne Vulka\u{300}", "d").unwrap();
        assert_eq!(item.title, "fine Vulkà");
    }

    #[test]
    fn wine_title_composition() {
        let f = write_tmp(
            ",country,description,designation,title,variety,winery\n\
             0,Italy,\"Aromas include tropical fruit, broom.\",Vulkà Bianco,Nicosia 2013 Vulkà Bianco  (Etna),White Blend,Nicosia\n\
             1,Portugal,\"Ripe and fruity.\",Avidagos,Quinta dos Avidagos 2011 Avidagos Red (Douro),,Quinta dos Avidagos\n\
             2,US,,Reserve,X 2010 Reserve,Pinot Noir,X\n",
            ".csv",
        );
        let (cat, summary) = import_wine_csv(f.path(), &WineColumns::default()).unwrap();
        assert_eq!(cat.len(), 2);
        assert_eq!(summary.dropped_empty_description, 1);
        assert_eq!(summary.rows, 3);
        assert_eq!(cat.items()[0].title, "Nicosia 2013 Vulkà Bianco White Blend");
        assert_eq!(cat.items()[0].id, "0");
        let t = &cat.items()[1].title;
        assert_eq!(t, "Quinta dos Avidagos 2011 Avidagos");
        assert!(!t.contains("  "));
    }

    #[test]
    fn wine_missing_column() {
        let f = write_tmp("winery,description\nA,B\n", ".csv");
        assert!(matches!(
            import_wine_csv(f.path(), &WineColumns::default()),
            Err(CatalogError::MissingColumn(c)) if c == "designation"
        ));
    }

    #[test]
    fn annotations_resolve_and_drop_self_refs() {
        let cat = Catalog::from_items(
            ["s1", "a", "b"]
                .iter()
                .map(|id| CatalogItem::new(id, format!("title {id}"), "d").unwrap())
                .collect(),
        )
        .unwrap();
        let f = write_tmp("{\"seed_id\":\"s1\",\"positive_ids\":[\"s1\",\"a\"]}\n", ".jsonl");
        let load = load_annotations(f.path(), &cat, AnnotationKey::Id).unwrap();
        assert_eq!(load.self_references_removed, 1);
        assert_eq!(
            load.annotations.entries["s1"],
            BTreeSet::from(["a".to_string()])
        );

        let f = write_tmp("{\"seed_id\":\"s1\",\"positive_ids\":[\"a\",\"zzz\"]}\n", ".jsonl");
        match load_annotations(f.path(), &cat, AnnotationKey::Id) {
            Err(CatalogError::UnknownId { id, record }) => {
                assert_eq!(id, "zzz");
                assert_eq!(record, 1);
            }
            other => panic!("unexpected {other:?}"),
        }

        let f = write_tmp(
            "{\"seed_id\":\"title s1\",\"positive_ids\":[\"title a\",\"title b\"]}\n",
            ".jsonl",
        );
        let load = load_annotations(f.path(), &cat, AnnotationKey::Title).unwrap();
        assert_eq!(load.annotations.entries["s1"].len(), 2);
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let cat = small_catalog(10);
        let (tr, va) = split_train_val(&cat, 0.2, 7).unwrap();
        assert_eq!((tr.len(), va.len()), (8, 2));
        let (tr2, va2) = split_train_val(&cat, 0.2, 7).unwrap();
        assert_eq!(tr.items(), tr2.items());
        assert_eq!(va.items(), va2.items());
        for it in va.items() {
            assert!(!tr.contains(&it.id));
        }
    }

    #[test]
    fn degenerate_split() {
        let cat = small_catalog(2);
        assert!(matches!(
            split_train_val(&cat, 0.9, 1),
            Err(CatalogError::DegenerateSplit { .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn split_covers_input(n in 2usize..60, frac in 0.01f64..0.6, seed in proptest::prelude::any::<u64>()) {
            let cat = small_catalog(n);
            if let Ok((tr, va)) = split_train_val(&cat, frac, seed) {
                proptest::prop_assert_eq!(tr.len() + va.len(), n);
                let mut ids: Vec<_> = tr.items().iter().chain(va.items()).map(|i| i.id.clone()).collect();
                ids.sort();
                ids.dedup();
                proptest::prop_assert_eq!(ids.len(), n);
            }
        }

        #[test]
        fn composed_titles_have_clean_spacing(parts in proptest::collection::vec("[ a-z]{0,6}", 4)) {
            let t = compose_wine_title(&parts[0], &parts[1], &parts[2], &parts[3]);
            proptest::prop_assert!(!t.starts_with(' ') && !t.ends_with(' ') && !t.contains("  "));
        }
    }
}

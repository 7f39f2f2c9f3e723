//! Command-line front end.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::catalog::{
    import_wine_csv, load_annotations, load_catalog, split_train_val, AnnotationKey,
    AnnotationSet, Catalog, CatalogFormat, WineColumns,
};
use crate::encoder::{checkpoint_load, checkpoint_save, init_model, EncoderConfig, Model};
use crate::error::{Error, Result};
use crate::hash::fnv1a64_file;
use crate::metrics::{ablate, evaluate, EvalInputs, EvalMode};
use crate::objectives::Objective;
use crate::optim::AdamConfig;
use crate::ranker::{embed_catalog, EmbeddingStore, Lambdas, Ranker};
use crate::synth::{generate, SynthConfig};
use crate::tokenizer::{
    build_vocab, EncodeOptions, MaskReplacement, Vocabulary, DEFAULT_MASK_RATE,
    DEFAULT_TITLE_CAP,
};
use crate::trainer::{train, TrainerConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

const TAG_SPLIT: u64 = 0x7370_6c69_7400_0001;
const TAG_INIT: u64 = 0x696e_6974_0000_0002;
const TAG_TRAIN: u64 = 0x7472_6169_6e00_0003;
const TAG_SYNTH: u64 = 0x7379_6e74_6800_0004;

#[derive(Debug, Parser)]
#[command(name = "recobert", version, about = "Text-based item-to-item recommendation")]
#[command(args_override_self = true)]
pub struct Cli {
    /// TOML file with default flag values (keys are flag names); explicit
    /// flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores). Affects speed only.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary file from a catalog.
    BuildVocab(BuildVocabArgs),
    /// Train an encoder and write checkpoints.
    Train(TrainArgs),
    /// Embed every catalog item with a trained checkpoint.
    Embed(EmbedArgs),
    /// Rank candidates for seed items.
    Recommend(RecommendArgs),
    /// Score rankings against annotated positives.
    Evaluate(EvaluateArgs),
    /// Evaluate the seven score-ablation variants.
    Ablate(AblateArgs),
    /// Convert a wine-review CSV into a catalog.
    ImportWines(ImportWinesArgs),
    /// Generate a synthetic clustered catalog with annotations.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct CatalogArgs {
    #[arg(long)]
    pub catalog: PathBuf,
    /// Catalog format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<CatalogFormat>,
}

impl CatalogArgs {
    fn load(&self) -> Result<Catalog> {
        let format = self
            .format
            .unwrap_or_else(|| CatalogFormat::from_path(&self.catalog));
        Ok(load_catalog(&self.catalog, format)?)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct BuildVocabArgs {
    #[command(flatten)]
    pub input: CatalogArgs,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    #[arg(long, default_value_t = 30_000)]
    pub max_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: CatalogArgs,
    /// Existing vocabulary; built from the catalog when omitted.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub val_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Probability of pairing a title with another item's description.
    #[arg(long, default_value_t = 0.5)]
    pub ps: f64,
    #[arg(long, default_value_t = DEFAULT_MASK_RATE)]
    pub mask_rate: f64,
    #[arg(long, value_enum, default_value_t = Objective::Recobert)]
    pub objective: Objective,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    /// Linear warmup steps (default: 1% of --steps).
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long, default_value_t = 2)]
    pub val_pairs_per_item: usize,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub ff_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long, default_value_t = DEFAULT_TITLE_CAP)]
    pub title_cap: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    /// Drop segment embeddings.
    #[arg(long)]
    pub no_segments: bool,
    /// Learned title and description projections before the TDM cosine.
    #[arg(long)]
    pub tdm_projection: bool,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    #[arg(long, default_value_t = 30_000)]
    pub max_vocab: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Title token cap used when encoding; must match training.
    #[arg(long, default_value_t = DEFAULT_TITLE_CAP)]
    pub title_cap: usize,
}

struct LoadedModel {
    model: Model,
    vocab: Vocabulary,
    opts: EncodeOptions,
}

impl ModelArgs {
    fn load(&self, inputs: &mut Inputs) -> Result<LoadedModel> {
        let vocab = Vocabulary::load(&self.vocab)?;
        inputs.record(&self.vocab)?;
        let (model, _) = checkpoint_load(&self.checkpoint, Some(vocab.hash()))?;
        inputs.record(&self.checkpoint)?;
        let opts = EncodeOptions {
            max_len: model.config.max_len,
            title_cap: self.title_cap,
        };
        Ok(LoadedModel { model, vocab, opts })
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: CatalogArgs,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoringArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: CatalogArgs,
    /// Precomputed embedding store; computed on the fly when omitted.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

impl ScoringArgs {
    fn load(&self, inputs: &mut Inputs) -> Result<(LoadedModel, Catalog, EmbeddingStore)> {
        let loaded = self.model.load(inputs)?;
        let catalog = self.input.load()?;
        inputs.record(&self.input.catalog)?;
        let store = match &self.embeddings {
            Some(p) => {
                let s = EmbeddingStore::load(p)?;
                inputs.record(p)?;
                s
            }
            None => embed_catalog(&loaded.model, &catalog, &loaded.vocab, loaded.opts, 32)?,
        };
        Ok((loaded, catalog, store))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct RecommendArgs {
    #[command(flatten)]
    pub scoring: ScoringArgs,
    /// Seed item ids; every catalog item when omitted.
    #[arg(long = "seed-id")]
    pub seed_ids: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// Weights for cos_d, cos_t and the two cross scores.
    #[arg(long, default_value_t = Lambdas::default())]
    #[serde(serialize_with = "as_display")]
    pub lambda: Lambdas,
    /// Bi-encoder scores only, whatever the weights.
    #[arg(long)]
    pub skip_cross: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AnnotationArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, value_enum, default_value_t = AnnotationKey::Id)]
    pub annotation_key: AnnotationKey,
    #[arg(long, value_enum, default_value_t = EvalMode::Full)]
    pub mode: EvalMode,
    /// Cutoffs for hit ratio.
    #[arg(long, value_delimiter = ',', default_values_t = vec![5, 10, 50, 100, 1000])]
    pub ks: Vec<usize>,
}

impl AnnotationArgs {
    fn load(&self, catalog: &Catalog, inputs: &mut Inputs) -> Result<AnnotationSet> {
        let loaded = load_annotations(&self.annotations, catalog, self.annotation_key)?;
        inputs.record(&self.annotations)?;
        if loaded.self_references_removed > 0 {
            log::warn!(
                "removed {} seed self-references from annotations",
                loaded.self_references_removed
            );
        }
        Ok(loaded.annotations)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[command(flatten)]
    pub annotations: AnnotationArgs,
    #[arg(long, default_value_t = Lambdas::default())]
    #[serde(serialize_with = "as_display")]
    pub lambda: Lambdas,
    /// Also write the per-seed rankings.
    #[arg(long)]
    pub write_rankings: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[command(flatten)]
    pub annotations: AnnotationArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ImportWinesArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub id_column: Option<String>,
    #[arg(long, default_value = "winery")]
    pub winery_column: String,
    #[arg(long)]
    pub year_column: Option<String>,
    #[arg(long, default_value = "title")]
    pub title_column: String,
    #[arg(long, default_value = "designation")]
    pub name_column: String,
    #[arg(long, default_value = "variety")]
    pub variety_column: String,
    #[arg(long, default_value = "description")]
    pub description_column: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub items: usize,
    #[arg(long, default_value_t = 10)]
    pub clusters: usize,
    #[arg(long, default_value_t = 2)]
    pub seeds_per_cluster: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn as_display<T: std::fmt::Display, S: serde::Serializer>(
    v: &T,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

/// Provenance written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub args: serde_json::Value,
    pub config_file: Option<PathBuf>,
    pub seeds: BTreeMap<String, u64>,
    /// Input path → FNV-1a 64 hash of its bytes, hex.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Default)]
struct Inputs(BTreeMap<String, String>);

impl Inputs {
    fn record(&mut self, path: &Path) -> Result<()> {
        let h = fnv1a64_file(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.0.insert(path.display().to_string(), format!("{h:016x}"));
        Ok(())
    }
}

struct Run {
    out: PathBuf,
    inputs: Inputs,
    outputs: Vec<PathBuf>,
    seeds: BTreeMap<String, u64>,
}

impl Run {
    fn new(out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
        Ok(Run {
            out: out.to_path_buf(),
            inputs: Inputs::default(),
            outputs: Vec::new(),
            seeds: BTreeMap::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, contents).map_err(|e| Error::io(p.display().to_string(), e))?;
        self.outputs.push(p.clone());
        Ok(p)
    }

    fn produced(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn finish<A: Serialize>(
    run: Run,
    command: &str,
    args: &A,
    config: Option<&Path>,
    started: u64,
) -> Result<()> {
    let mut outputs = BTreeMap::new();
    for p in &run.outputs {
        let h = fnv1a64_file(p).map_err(|e| Error::io(p.display().to_string(), e))?;
        outputs.insert(p.display().to_string(), format!("{h:016x}"));
    }
    let manifest = RunManifest {
        command: command.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        args: serde_json::to_value(args).expect("serializable"),
        config_file: config.map(Path::to_path_buf),
        seeds: run.seeds,
        inputs: run.inputs.0,
        outputs,
        started_unix: started,
        finished_unix: unix_now(),
    };
    let p = run.out.join("manifest.json");
    std::fs::write(
        &p,
        serde_json::to_string_pretty(&manifest).expect("serializable") + "\n",
    )
    .map_err(|e| Error::io(p.display().to_string(), e))
}

fn corpus(catalog: &Catalog) -> Vec<&str> {
    catalog
        .items()
        .iter()
        .flat_map(|i| [i.title.as_str(), i.description.as_str()])
        .collect()
}

fn cmd_build_vocab(a: &BuildVocabArgs, run: &mut Run) -> Result<()> {
    let catalog = a.input.load()?;
    run.inputs.record(&a.input.catalog)?;
    let vocab = build_vocab(&corpus(&catalog), a.min_freq, a.max_size)?;
    run.write("vocab.txt", vocab.to_file_string())?;
    log::info!("vocabulary of {} ids", vocab.len());
    Ok(())
}

fn cmd_train(a: &TrainArgs, run: &mut Run) -> Result<()> {
    let catalog = a.input.load()?;
    run.inputs.record(&a.input.catalog)?;
    let vocab = match &a.vocab {
        Some(p) => {
            run.inputs.record(p)?;
            Vocabulary::load(p)?
        }
        None => build_vocab(&corpus(&catalog), a.min_freq, a.max_vocab)?,
    };
    run.write("vocab.txt", vocab.to_file_string())?;

    let split_seed = a.seed ^ TAG_SPLIT;
    let init_seed = a.seed ^ TAG_INIT;
    let train_seed = a.seed ^ TAG_TRAIN;
    run.seeds.insert("split".into(), split_seed);
    run.seeds.insert("init".into(), init_seed);
    run.seeds.insert("train".into(), train_seed);

    let (train_cat, val_cat) = split_train_val(&catalog, a.val_frac, split_seed)?;
    let split = serde_json::json!({
        "train": train_cat.items().iter().map(|i| &i.id).collect::<Vec<_>>(),
        "validation": val_cat.items().iter().map(|i| &i.id).collect::<Vec<_>>(),
    });
    run.write("split.json", serde_json::to_string_pretty(&split).expect("json") + "\n")?;

    let config = EncoderConfig {
        vocab_size: vocab.len(),
        max_len: a.max_len,
        hidden: a.hidden,
        layers: a.layers,
        heads: a.heads,
        ff_dim: a.ff_dim,
        dropout: a.dropout,
        use_segments: !a.no_segments,
        tdm_projection: a.tdm_projection,
        ..EncoderConfig::default()
    };
    let model = init_model(&config, init_seed)?;
    let cfg = TrainerConfig {
        p_s: a.ps,
        batch_size: a.batch_size,
        max_steps: a.steps,
        eval_every: a.eval_every,
        patience: a.patience,
        adam: AdamConfig {
            learning_rate: a.lr,
            warmup_steps: a.warmup.unwrap_or(a.steps / 100),
            ..AdamConfig::default()
        },
        seed: train_seed,
        objective: a.objective,
        mask_rate: a.mask_rate,
        mask_replacement: MaskReplacement::default(),
        encode: EncodeOptions {
            max_len: a.max_len,
            title_cap: a.title_cap,
        },
        val_pairs_per_item: a.val_pairs_per_item,
        clip_norm: a.clip_norm,
    };
    log::info!(
        "training on {} items, validating on {}, {} parameters",
        train_cat.len(),
        val_cat.len(),
        model.params.num_values()
    );
    let outcome = train(model, &train_cat, &val_cat, &vocab, &cfg)?;
    let hash = vocab.hash();
    for (name, m) in [("best.rcbt", &outcome.best), ("final.rcbt", &outcome.last)] {
        let p = run.path(name);
        checkpoint_save(m, hash, &p)?;
        run.produced(p);
    }
    run.write("history.jsonl", outcome.history.to_jsonl())?;
    log::info!(
        "stopped ({:?}) after {} steps; best step {}",
        outcome.history.stop_reason,
        outcome.history.steps_run,
        outcome.history.best_step
    );
    Ok(())
}

fn cmd_embed(a: &EmbedArgs, run: &mut Run) -> Result<()> {
    let loaded = a.model.load(&mut run.inputs)?;
    let catalog = a.input.load()?;
    run.inputs.record(&a.input.catalog)?;
    let store = embed_catalog(&loaded.model, &catalog, &loaded.vocab, loaded.opts, a.batch_size)?;
    for (id, reason) in store.skipped() {
        log::warn!("not embedded: {id}: {reason}");
    }
    run.write("embeddings.rcbe", store.to_bytes())?;
    log::info!("embedded {} of {} items", store.len(), catalog.len());
    Ok(())
}

fn cmd_recommend(a: &RecommendArgs, run: &mut Run) -> Result<()> {
    let (loaded, catalog, store) = a.scoring.load(&mut run.inputs)?;
    let ranker = Ranker::new(&loaded.model, &loaded.vocab, &catalog, &store, loaded.opts)?;
    let seeds: Vec<String> = if a.seed_ids.is_empty() {
        catalog.items().iter().map(|i| i.id.clone()).collect()
    } else {
        a.seed_ids.clone()
    };
    let lists = ranker.rank_all(&seeds, a.lambda, a.skip_cross)?;
    let mut out = String::new();
    for list in &lists {
        if list.ranked.len() < a.top {
            log::info!(
                "seed {}: only {} candidates available (requested top {})",
                list.seed_id,
                list.ranked.len(),
                a.top
            );
        }
        out.push_str(&list.truncated(a.top).to_json_line());
    }
    run.write("recommendations.jsonl", out)?;
    log::info!("{} cross-score forward passes", ranker.cross_passes());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, run: &mut Run) -> Result<()> {
    let (loaded, catalog, store) = a.scoring.load(&mut run.inputs)?;
    let annotations = a.annotations.load(&catalog, &mut run.inputs)?;
    let inputs = EvalInputs {
        model: &loaded.model,
        vocab: &loaded.vocab,
        catalog: &catalog,
        store: &store,
        annotations: &annotations,
        opts: loaded.opts,
    };
    let (report, rankings) = evaluate(&inputs, a.lambda, &a.annotations.ks, a.annotations.mode)?;
    run.write("report.json", report.to_json())?;
    let table = report.to_table(&format!("RecoBERT λ={}", a.lambda));
    run.write("report.txt", &table)?;
    if a.write_rankings {
        let lines: String = rankings.values().map(|r| r.to_json_line()).collect();
        run.write("rankings.jsonl", lines)?;
    }
    println!("{table}");
    Ok(())
}

fn cmd_ablate(a: &AblateArgs, run: &mut Run) -> Result<()> {
    let (loaded, catalog, store) = a.scoring.load(&mut run.inputs)?;
    let annotations = a.annotations.load(&catalog, &mut run.inputs)?;
    let inputs = EvalInputs {
        model: &loaded.model,
        vocab: &loaded.vocab,
        catalog: &catalog,
        store: &store,
        annotations: &annotations,
        opts: loaded.opts,
    };
    let report = ablate(&inputs, &a.annotations.ks, a.annotations.mode)?;
    run.write("ablation.json", report.to_json())?;
    let table = report.to_table();
    run.write("ablation.txt", &table)?;
    println!("{table}");
    Ok(())
}

fn cmd_import_wines(a: &ImportWinesArgs, run: &mut Run) -> Result<()> {
    let cols = WineColumns {
        id: a.id_column.clone(),
        winery: a.winery_column.clone(),
        year: a.year_column.clone(),
        title: Some(a.title_column.clone()),
        name: a.name_column.clone(),
        variety: a.variety_column.clone(),
        description: a.description_column.clone(),
    };
    let (catalog, summary) = import_wine_csv(&a.input, &cols)?;
    run.inputs.record(&a.input)?;
    let p = run.path("catalog.jsonl");
    catalog.write_jsonl(&p)?;
    run.produced(p);
    run.write(
        "import_summary.json",
        serde_json::to_string_pretty(&summary).expect("json") + "\n",
    )?;
    log::info!("{summary:?}");
    Ok(())
}

fn cmd_synth(a: &SynthArgs, run: &mut Run) -> Result<()> {
    let seed = a.seed ^ TAG_SYNTH;
    run.seeds.insert("synth".into(), seed);
    if a.clusters == 0 || a.items < a.clusters {
        return Err(Error::InvalidArgument(
            "--items must be at least --clusters, which must be positive".into(),
        ));
    }
    let s = generate(&SynthConfig {
        items: a.items,
        clusters: a.clusters,
        seeds_per_cluster: a.seeds_per_cluster,
        seed,
        ..SynthConfig::default()
    })?;
    let p = run.path("catalog.jsonl");
    s.catalog.write_jsonl(&p)?;
    run.produced(p);
    let p = run.path("annotations.jsonl");
    s.annotations.write_jsonl(&p)?;
    run.produced(p);
    let clusters: BTreeMap<&str, usize> = s
        .catalog
        .items()
        .iter()
        .zip(&s.clusters)
        .map(|(i, &c)| (i.id.as_str(), c))
        .collect();
    run.write(
        "clusters.json",
        serde_json::to_string_pretty(&clusters).expect("json") + "\n",
    )?;
    Ok(())
}

const SUBCOMMANDS: &[&str] = &[
    "build-vocab",
    "train",
    "embed",
    "recommend",
    "evaluate",
    "ablate",
    "import-wines",
    "synth",
];

/// Finds `--config PATH` or `--config=PATH`.
fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Turns a TOML table into flag arguments.
fn config_flags(contents: &str) -> std::result::Result<Vec<OsString>, String> {
    let table: toml::Table = contents.parse().map_err(|e: toml::de::Error| e.to_string())?;
    let mut out = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        let scalar = |v: &toml::Value| -> std::result::Result<String, String> {
            match v {
                toml::Value::String(s) => Ok(s.clone()),
                toml::Value::Integer(i) => Ok(i.to_string()),
                toml::Value::Float(f) => Ok(f.to_string()),
                other => Err(format!("unsupported value for {key}: {other}")),
            }
        };
        match &value {
            toml::Value::Boolean(true) => out.push(flag.into()),
            toml::Value::Boolean(false) => {}
            toml::Value::Array(items) => {
                for v in items {
                    out.push(flag.clone().into());
                    out.push(scalar(v)?.into());
                }
            }
            v => {
                out.push(flag.into());
                out.push(scalar(v)?.into());
            }
        }
    }
    Ok(out)
}

/// Inserts config-file flags right after the subcommand so that flags given
/// on the command line, which come later, override them.
fn expand_config(mut argv: Vec<OsString>) -> std::result::Result<Vec<OsString>, String> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let contents = std::fs::read_to_string(&path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let flags = config_flags(&contents)?;
    let Some(pos) = argv
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref()))
    else {
        return Ok(argv);
    };
    argv.splice(pos + 1..pos + 1, flags);
    Ok(argv)
}

fn dispatch(cli: &Cli) -> Result<()> {
    let started = unix_now();
    let config = cli.config.as_deref();
    macro_rules! go {
        ($name:literal, $args:expr, $f:ident) => {{
            let mut run = Run::new(&$args.out)?;
            $f($args, &mut run)?;
            finish(run, $name, $args, config, started)
        }};
    }
    match &cli.command {
        Command::BuildVocab(a) => go!("build-vocab", a, cmd_build_vocab),
        Command::Train(a) => go!("train", a, cmd_train),
        Command::Embed(a) => go!("embed", a, cmd_embed),
        Command::Recommend(a) => go!("recommend", a, cmd_recommend),
        Command::Evaluate(a) => go!("evaluate", a, cmd_evaluate),
        Command::Ablate(a) => go!("ablate", a, cmd_ablate),
        Command::ImportWines(a) => go!("import-wines", a, cmd_import_wines),
        Command::Synth(a) => go!("synth", a, cmd_synth),
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            if e.is_io() {
                EXIT_IO
            } else {
                EXIT_VALIDATION
            }
        }
    }
}

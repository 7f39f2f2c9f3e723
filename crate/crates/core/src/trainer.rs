//! Training loop: positive/negative pair generation, masking, Adam updates
//! and validation-based early stopping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CatalogItem};
use crate::encoder::{EncoderError, Model};
use crate::hash::derive_seed;
use crate::objectives::{
    batch_loss, total_loss_and_gradients, LossBreakdown, Objective, ObjectiveError,
    TrainingExample,
};
use crate::optim::{Adam, AdamConfig};
use crate::tokenizer::{
    apply_masking, encode_pair, tokenize, EncodeOptions, MaskReplacement, TokenizerError,
    Vocabulary, DEFAULT_MASK_RATE,
};

const TAG_TRAIN: u64 = 0x0074_7261_696e;
const TAG_VALIDATION: u64 = 0x76_616c;
const TAG_DROPOUT: u64 = 0x6472_6f70;
const EMA_DECAY: f64 = 0.98;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("catalog has {0} items; pair sampling needs at least 2")]
    CatalogTooSmall(usize),
    #[error("non-finite loss at step {step}: {loss:?}")]
    NonFiniteLoss { step: usize, loss: LossBreakdown },
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("vocabulary has {vocab} ids but the model expects {model}")]
    VocabSize { vocab: usize, model: usize },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    /// Probability of swapping in another item's description.
    pub p_s: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Consecutive non-improving evaluations before stopping.
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub objective: Objective,
    pub mask_rate: f64,
    pub mask_replacement: MaskReplacement,
    pub encode: EncodeOptions,
    /// Validation pairs generated per validation item.
    pub val_pairs_per_item: usize,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            p_s: 0.5,
            batch_size: 16,
            max_steps: 2000,
            eval_every: 100,
            patience: 5,
            adam: AdamConfig {
                warmup_steps: 20,
                ..AdamConfig::default()
            },
            seed: 0,
            objective: Objective::Recobert,
            mask_rate: DEFAULT_MASK_RATE,
            mask_replacement: MaskReplacement::default(),
            encode: EncodeOptions::default(),
            val_pairs_per_item: 2,
            clip_norm: None,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(0.0..=1.0).contains(&self.p_s) {
            return bad("p_s must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return bad("mask_rate must lie in [0, 1]");
        }
        if !(self.adam.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub title: Vec<String>,
    pub description: Vec<String>,
    /// True when the description belongs to the title's item.
    pub label: bool,
}

/// Chooses which item's description pairs with item `i` of `n`: itself with
/// probability `1 − p_s`, otherwise a uniformly drawn other item.
pub fn sample_description_source<R: Rng + ?Sized>(
    i: usize,
    n: usize,
    p_s: f64,
    rng: &mut R,
) -> (usize, bool) {
    debug_assert!(n >= 2 && i < n);
    if rng.random::<f64>() < p_s {
        let r = rng.random_range(0..n - 1);
        (if r >= i { r + 1 } else { r }, false)
    } else {
        (i, true)
    }
}

pub fn make_training_pair<R: Rng + ?Sized>(
    item: &CatalogItem,
    train_catalog: &Catalog,
    p_s: f64,
    rng: &mut R,
) -> Result<TrainingPair, TrainError> {
    let n = train_catalog.len();
    if n < 2 {
        return Err(TrainError::CatalogTooSmall(n));
    }
    let title = tokenize(&item.title);
    let (description, label) = match train_catalog.position(&item.id) {
        Some(i) => {
            let (j, label) = sample_description_source(i, n, p_s, rng);
            (tokenize(&train_catalog.items()[j].description), label)
        }
        // not a member: every catalog item is "another" item
        None if rng.random::<f64>() < p_s => {
            let j = rng.random_range(0..n);
            (tokenize(&train_catalog.items()[j].description), false)
        }
        None => (tokenize(&item.description), true),
    };
    Ok(TrainingPair {
        title,
        description,
        label,
    })
}

struct TokenizedCatalog {
    titles: Vec<Vec<String>>,
    descriptions: Vec<Vec<String>>,
}

impl TokenizedCatalog {
    fn new(catalog: &Catalog) -> Self {
        TokenizedCatalog {
            titles: catalog.items().iter().map(|i| tokenize(&i.title)).collect(),
            descriptions: catalog
                .items()
                .iter()
                .map(|i| tokenize(&i.description))
                .collect(),
        }
    }

    fn len(&self) -> usize {
        self.titles.len()
    }

    fn example<R: Rng + ?Sized>(
        &self,
        i: usize,
        p_s: f64,
        vocab: &Vocabulary,
        cfg: &TrainerConfig,
        rng: &mut R,
    ) -> Result<TrainingExample, TrainError> {
        let (j, label) = sample_description_source(i, self.len(), p_s, rng);
        let seq = encode_pair(&self.titles[i], &self.descriptions[j], vocab, cfg.encode)?;
        let masked = apply_masking(&seq, cfg.mask_rate, cfg.mask_replacement, vocab.len(), rng);
        Ok(TrainingExample { seq: masked, label })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Exponential moving average of the training loss; absent before the
    /// first update.
    pub train_loss: Option<f64>,
    pub val_tdm: f64,
    pub val_mlm: f64,
    pub val_total: f64,
    /// True when this evaluation set a new best validation loss.
    pub best: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    EarlyStopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EvalRecord>,
    pub best_step: usize,
    pub stop_reason: StopReason,
    pub steps_run: usize,
}

impl TrainingHistory {
    /// One JSON object per evaluation.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
            .collect()
    }
}

pub struct TrainOutcome {
    /// Parameters from the evaluation with the lowest validation loss.
    pub best: Model,
    /// Parameters after the last update.
    pub last: Model,
    pub history: TrainingHistory,
}

fn validation_set(
    val: &TokenizedCatalog,
    vocab: &Vocabulary,
    cfg: &TrainerConfig,
) -> Result<Vec<TrainingExample>, TrainError> {
    let p_s = match cfg.objective {
        Objective::Recobert => 0.5,
        Objective::MlmOnly => 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_VALIDATION, 0));
    let mut out = Vec::with_capacity(val.len() * cfg.val_pairs_per_item);
    for _ in 0..cfg.val_pairs_per_item.max(1) {
        for i in 0..val.len() {
            out.push(val.example(i, p_s, vocab, cfg, &mut rng)?);
        }
    }
    Ok(out)
}

fn clip(grads: &mut crate::encoder::Parameters, max_norm: f64) {
    let norm = grads.l2_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, mut t) in grads.tensors_mut() {
            t.mapv_inplace(|v| v * s);
        }
    }
}

/// Trains `model` and returns the best-validation snapshot. Deterministic
/// for a fixed `(model, catalogs, vocab, cfg)`.
pub fn train(
    model: Model,
    train_catalog: &Catalog,
    val_catalog: &Catalog,
    vocab: &Vocabulary,
    cfg: &TrainerConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if vocab.len() != model.config.vocab_size {
        return Err(TrainError::VocabSize {
            vocab: vocab.len(),
            model: model.config.vocab_size,
        });
    }
    let min_val = if cfg.objective == Objective::Recobert { 2 } else { 1 };
    if train_catalog.len() < 2 {
        return Err(TrainError::CatalogTooSmall(train_catalog.len()));
    }
    if val_catalog.len() < min_val {
        return Err(TrainError::CatalogTooSmall(val_catalog.len()));
    }
    let train_tok = TokenizedCatalog::new(train_catalog);
    let val_tok = TokenizedCatalog::new(val_catalog);
    let val_set = validation_set(&val_tok, vocab, cfg)?;
    let p_s = match cfg.objective {
        Objective::Recobert => cfg.p_s,
        Objective::MlmOnly => 0.0,
    };

    let mut model = model;
    let mut adam = Adam::new(cfg.adam, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_TRAIN, 0));
    let mut records = Vec::new();
    let mut ema: Option<f64> = None;
    let mut best_loss = f64::INFINITY;
    let mut best_step = 0;
    let mut best = model.clone();
    let mut stale = 0;
    let mut stop_reason = StopReason::MaxSteps;

    let mut evaluate = |model: &Model, step: usize, ema: Option<f64>| -> Result<bool, TrainError> {
        let val = batch_loss(model, &val_set, cfg.objective)?;
        if !val.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, loss: val });
        }
        let improved = val.l_total < best_loss;
        if improved {
            best_loss = val.l_total;
            best_step = step;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        log::info!(
            "step {step}: val tdm {:.4} mlm {:.4} total {:.4}{}",
            val.l_tdm,
            val.l_mlm,
            val.l_total,
            if improved { " *" } else { "" }
        );
        records.push(EvalRecord {
            step,
            train_loss: ema,
            val_tdm: val.l_tdm,
            val_mlm: val.l_mlm,
            val_total: val.l_total,
            best: improved,
        });
        Ok(stale >= cfg.patience)
    };

    let mut stopped = evaluate(&model, 0, None)?;
    let mut step = 0;
    while step < cfg.max_steps && !stopped {
        let batch: Vec<TrainingExample> = (0..cfg.batch_size)
            .map(|_| {
                let i = rng.random_range(0..train_tok.len());
                train_tok.example(i, p_s, vocab, cfg, &mut rng)
            })
            .collect::<Result<_, _>>()?;
        let seeds: Vec<u64> = (0..batch.len())
            .map(|i| derive_seed(cfg.seed, TAG_DROPOUT, (step * cfg.batch_size + i) as u64))
            .collect();
        let (loss, mut grads) =
            total_loss_and_gradients(&model, &batch, cfg.objective, Some(&seeds))?;
        if !loss.is_finite() || !grads.is_finite() {
            log::error!(
                "non-finite loss at step {step}: {loss:?}, parameter norm {:.4e}",
                model.params.l2_norm()
            );
            return Err(TrainError::NonFiniteLoss { step, loss });
        }
        if let Some(c) = cfg.clip_norm {
            clip(&mut grads, c);
        }
        adam.update(&mut model.params, &grads);
        step += 1;
        ema = Some(match ema {
            Some(e) => EMA_DECAY * e + (1.0 - EMA_DECAY) * loss.l_total,
            None => loss.l_total,
        });
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            stopped = evaluate(&model, step, ema)?;
            if stopped {
                stop_reason = StopReason::EarlyStopped;
            }
        }
    }

    Ok(TrainOutcome {
        best,
        last: model,
        history: TrainingHistory {
            records,
            best_step,
            stop_reason,
            steps_run: step,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_model, EncoderConfig};

    fn catalog(n: usize) -> Catalog {
        Catalog::from_items(
            (0..n)
                .map(|i| {
                    CatalogItem::new(
                        format!("i{i}"),
                        format!("title{} word{}", i % 5, i % 3),
                        format!("desc{} shade{} , body{} .", i % 5, i % 3, i % 4),
                    )
                    .unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    fn setup(n: usize) -> (Catalog, Catalog, Vocabulary, Model) {
        let cat = catalog(n);
        let corpus: Vec<String> = cat
            .items()
            .iter()
            .flat_map(|i| [i.title.clone(), i.description.clone()])
            .collect();
        let vocab = crate::tokenizer::build_vocab(&corpus, 1, 1000).unwrap();
        let (tr, va) = crate::catalog::split_train_val(&cat, 0.25, 3).unwrap();
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            max_len: 16,
            hidden: 16,
            layers: 1,
            heads: 2,
            ff_dim: 32,
            ..EncoderConfig::default()
        };
        (tr, va, vocab, init_model(&cfg, 1).unwrap())
    }

    fn small_cfg() -> TrainerConfig {
        TrainerConfig {
            max_steps: 20,
            eval_every: 5,
            batch_size: 4,
            encode: EncodeOptions { max_len: 16, title_cap: 8 },
            seed: 11,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn pair_boundaries() {
        let cat = catalog(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let item = &cat.items()[0];
        for _ in 0..50 {
            let p = make_training_pair(item, &cat, 0.0, &mut rng).unwrap();
            assert!(p.label);
            assert_eq!(p.description, tokenize(&item.description));
            let p = make_training_pair(item, &cat, 1.0, &mut rng).unwrap();
            assert!(!p.label);
            assert_eq!(p.description, tokenize(&cat.items()[1].description));
        }
        let one = catalog(1);
        assert!(matches!(
            make_training_pair(item, &one, 0.5, &mut rng),
            Err(TrainError::CatalogTooSmall(1))
        ));
    }

    #[test]
    fn negative_rate_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 10_000;
        let mut negatives = 0;
        for k in 0..draws {
            let i = k % 10;
            let (j, label) = sample_description_source(i, 10, 0.5, &mut rng);
            assert_eq!(label, j == i);
            negatives += usize::from(!label);
        }
        let frac = negatives as f64 / draws as f64;
        assert!((frac - 0.5).abs() <= 0.015, "{frac}");
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let (tr, va, vocab, model) = setup(12);
        let cfg = TrainerConfig { max_steps: 0, ..small_cfg() };
        let out = train(model.clone(), &tr, &va, &vocab, &cfg).unwrap();
        assert_eq!(out.best, model);
        assert_eq!(out.history.records.len(), 1);
        assert_eq!(out.history.records[0].step, 0);
        assert_eq!(out.history.best_step, 0);
    }

    #[test]
    fn training_is_deterministic_and_best_is_argmin() {
        let (tr, va, vocab, model) = setup(12);
        let cfg = small_cfg();
        let a = train(model.clone(), &tr, &va, &vocab, &cfg).unwrap();
        let b = train(model, &tr, &va, &vocab, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.best, b.best);
        let min = a
            .history
            .records
            .iter()
            .min_by(|x, y| x.val_total.total_cmp(&y.val_total))
            .unwrap();
        assert_eq!(min.step, a.history.best_step);
        assert_eq!(a.history.records.len(), 5);
    }

    #[test]
    fn early_stopping_honours_patience() {
        let (tr, va, vocab, model) = setup(12);
        // an oversized learning rate makes validation oscillate, so patience 1
        // trips well before max_steps
        let cfg = TrainerConfig {
            max_steps: 400,
            eval_every: 1,
            patience: 1,
            adam: AdamConfig { learning_rate: 5.0, warmup_steps: 0, ..AdamConfig::default() },
            ..small_cfg()
        };
        let out = train(model, &tr, &va, &vocab, &cfg).unwrap();
        assert_eq!(out.history.stop_reason, StopReason::EarlyStopped);
        assert!(out.history.steps_run < 400);
    }

    #[test]
    fn mlm_only_keeps_projection_at_init() {
        let (tr, va, vocab, model) = setup(12);
        let cfg_model = EncoderConfig { tdm_projection: true, ..model.config.clone() };
        let model = init_model(&cfg_model, 3).unwrap();
        let cfg = TrainerConfig { objective: Objective::MlmOnly, ..small_cfg() };
        let out = train(model.clone(), &tr, &va, &vocab, &cfg).unwrap();
        assert_eq!(out.last.params.tdm, model.params.tdm);
        assert_ne!(out.last.params.token_emb, model.params.token_emb);
        assert!(out.history.records.iter().all(|r| r.val_tdm == 0.0));
    }
}

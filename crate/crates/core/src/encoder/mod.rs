//! The transformer backbone: configuration, parameters, initialization,
//! forward/backward passes, span pooling and checkpoints.

mod checkpoint;
mod layers;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::derive_seed;
use crate::tokenizer::InputSequence;

pub use checkpoint::{checkpoint_load, checkpoint_save, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use layers::{backward_sequence, forward_sequence, SequenceCache};

pub const INIT_STD: f64 = 0.02;
const TAG_DROPOUT: u64 = 0x6472_6f70;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty {0} span")]
    EmptySpan(&'static str),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("checkpoint vocabulary hash {found:016x} does not match {expected:016x}")]
    VocabMismatch { expected: u64, found: u64 },
    #[error("corrupt tensor `{0}`")]
    CorruptTensor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    /// Add learned title/description segment embeddings.
    pub use_segments: bool,
    /// Learned linear maps on the pooled features before the cosine head.
    pub tdm_projection: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 1000,
            max_len: crate::tokenizer::DEFAULT_MAX_LEN,
            hidden: 64,
            layers: 2,
            heads: 4,
            ff_dim: 256,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
            use_segments: true,
            tdm_projection: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.to_string()));
        if self.vocab_size <= crate::tokenizer::NUM_SPECIALS as usize {
            return bad("vocab_size must exceed the special tokens");
        }
        if self.max_len < 4 {
            return bad("max_len must be at least 4");
        }
        if self.hidden == 0 || self.heads == 0 {
            return bad("hidden and heads must be positive");
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad("h not divisible by A");
        }
        if self.ff_dim < self.hidden {
            return bad("ff_dim must be at least hidden");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array1<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdmProjection {
    pub w_title: Array2<f64>,
    pub b_title: Array1<f64>,
    pub w_desc: Array2<f64>,
    pub b_desc: Array1<f64>,
}

/// All trainable tensors. Also used as the gradient container.
///
/// Weight matrices are stored `[in × out]` so a row-vector input multiplies
/// on the left. The MLM projection reuses `token_emb`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub token_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub seg_emb: Array2<f64>,
    pub emb_ln_gain: Array1<f64>,
    pub emb_ln_bias: Array1<f64>,
    pub layers: Vec<LayerParams>,
    pub mlm_bias: Array1<f64>,
    pub tdm: Option<TdmProjection>,
}

macro_rules! tensor_list {
    ($self:ident, $view:ident, $iter:ident, $opt:ident) => {{
        let mut out = vec![
            ("token_emb".to_string(), $self.token_emb.$view().into_dyn()),
            ("pos_emb".to_string(), $self.pos_emb.$view().into_dyn()),
            ("seg_emb".to_string(), $self.seg_emb.$view().into_dyn()),
            ("emb_ln_gain".to_string(), $self.emb_ln_gain.$view().into_dyn()),
            ("emb_ln_bias".to_string(), $self.emb_ln_bias.$view().into_dyn()),
        ];
        for (i, l) in $self.layers.$iter().enumerate() {
            let p = |s: &str| format!("layer{i}.{s}");
            out.push((p("wq"), l.wq.$view().into_dyn()));
            out.push((p("bq"), l.bq.$view().into_dyn()));
            out.push((p("wk"), l.wk.$view().into_dyn()));
            out.push((p("bk"), l.bk.$view().into_dyn()));
            out.push((p("wv"), l.wv.$view().into_dyn()));
            out.push((p("bv"), l.bv.$view().into_dyn()));
            out.push((p("wo"), l.wo.$view().into_dyn()));
            out.push((p("bo"), l.bo.$view().into_dyn()));
            out.push((p("ln1_gain"), l.ln1_gain.$view().into_dyn()));
            out.push((p("ln1_bias"), l.ln1_bias.$view().into_dyn()));
            out.push((p("w_ff1"), l.w_ff1.$view().into_dyn()));
            out.push((p("b_ff1"), l.b_ff1.$view().into_dyn()));
            out.push((p("w_ff2"), l.w_ff2.$view().into_dyn()));
            out.push((p("b_ff2"), l.b_ff2.$view().into_dyn()));
            out.push((p("ln2_gain"), l.ln2_gain.$view().into_dyn()));
            out.push((p("ln2_bias"), l.ln2_bias.$view().into_dyn()));
        }
        out.push(("mlm_bias".into(), $self.mlm_bias.$view().into_dyn()));
        if let Some(t) = $self.tdm.$opt() {
            out.push(("tdm.w_title".into(), t.w_title.$view().into_dyn()));
            out.push(("tdm.b_title".into(), t.b_title.$view().into_dyn()));
            out.push(("tdm.w_desc".into(), t.w_desc.$view().into_dyn()));
            out.push(("tdm.b_desc".into(), t.b_desc.$view().into_dyn()));
        }
        out
    }};
}

impl Parameters {
    /// Named views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        tensor_list!(self, view, iter, as_ref)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        tensor_list!(self, view_mut, iter_mut, as_mut)
    }

    /// A same-shaped value with every entry zero.
    pub fn zeros_like(&self) -> Parameters {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Parameters, scale: f64) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(scale, &b);
        }
    }

    /// Rounds every value to the nearest `f32`, the on-disk precision.
    pub fn round_to_f32(&mut self) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v as f32 as f64);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Configuration plus parameters: the backbone function and its MLM head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: Parameters,
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64, rows: usize, cols: usize) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            break x;
        }
    })
}

/// Deterministic initialization: truncated normal (std 0.02, cut at 2σ) for
/// matrices and embeddings, unit layer-norm gains, zero biases. Values are
/// rounded to `f32` so checkpoints round-trip exactly.
pub fn init_model(config: &EncoderConfig, seed: u64) -> Result<Model, EncoderError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.hidden;
    let f = config.ff_dim;
    let zeros = |n: usize| Array1::<f64>::zeros(n);
    let ones = |n: usize| Array1::<f64>::ones(n);
    let token_emb = truncated_normal(&mut rng, INIT_STD, config.vocab_size, h);
    let pos_emb = truncated_normal(&mut rng, INIT_STD, config.max_len, h);
    let seg_emb = truncated_normal(&mut rng, INIT_STD, 2, h);
    let layers = (0..config.layers)
        .map(|_| LayerParams {
            wq: truncated_normal(&mut rng, INIT_STD, h, h),
            bq: zeros(h),
            wk: truncated_normal(&mut rng, INIT_STD, h, h),
            bk: zeros(h),
            wv: truncated_normal(&mut rng, INIT_STD, h, h),
            bv: zeros(h),
            wo: truncated_normal(&mut rng, INIT_STD, h, h),
            bo: zeros(h),
            ln1_gain: ones(h),
            ln1_bias: zeros(h),
            w_ff1: truncated_normal(&mut rng, INIT_STD, h, f),
            b_ff1: zeros(f),
            w_ff2: truncated_normal(&mut rng, INIT_STD, f, h),
            b_ff2: zeros(h),
            ln2_gain: ones(h),
            ln2_bias: zeros(h),
        })
        .collect();
    let tdm = config.tdm_projection.then(|| TdmProjection {
        w_title: truncated_normal(&mut rng, INIT_STD, h, h),
        b_title: zeros(h),
        w_desc: truncated_normal(&mut rng, INIT_STD, h, h),
        b_desc: zeros(h),
    });
    let mut params = Parameters {
        token_emb,
        pos_emb,
        seg_emb,
        emb_ln_gain: ones(h),
        emb_ln_bias: zeros(h),
        layers,
        mlm_bias: zeros(config.vocab_size),
        tdm,
    };
    params.round_to_f32();
    Ok(Model {
        config: config.clone(),
        params,
    })
}

/// Per-position outputs for one sequence. Rows at PAD positions are zero;
/// PAD positions never enter the computation of other rows.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub rows: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; sample `i` of a batch draws its masks from a stream
    /// derived from `seed` and `i`.
    Train { seed: u64 },
}

impl Model {
    pub fn check_sequence(&self, seq: &InputSequence) -> Result<(), EncoderError> {
        let n = seq.ids.len();
        if n == 0 || n > self.config.max_len || seq.segments.len() != n || seq.pad_len >= n {
            return Err(EncoderError::ShapeMismatch(format!(
                "sequence of length {n} (segments {}, pad {}) vs max_len {}",
                seq.segments.len(),
                seq.pad_len,
                self.config.max_len
            )));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(EncoderError::ShapeMismatch(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Hidden states for one sequence, plus the cache for backpropagation.
    pub(crate) fn forward_cached(
        &self,
        seq: &InputSequence,
        dropout_seed: Option<u64>,
    ) -> Result<(HiddenStates, SequenceCache), EncoderError> {
        self.check_sequence(seq)?;
        let n = seq.content_len();
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let (out, cache) = forward_sequence(self, &seq.ids[..n], &seq.segments[..n], rng.as_mut());
        let mut rows = Array2::zeros((seq.len(), self.config.hidden));
        rows.slice_mut(ndarray::s![..n, ..]).assign(&out);
        Ok((HiddenStates { rows }, cache))
    }
}

/// Encodes a batch. Sequences may be shorter than `max_len`.
pub fn forward(
    model: &Model,
    batch: &[InputSequence],
    mode: Mode,
) -> Result<Vec<HiddenStates>, EncoderError> {
    batch
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            let seed = match mode {
                Mode::Eval => None,
                Mode::Train { seed } if model.config.dropout > 0.0 => {
                    Some(derive_seed(seed, TAG_DROPOUT, i as u64))
                }
                Mode::Train { .. } => None,
            };
            model.forward_cached(seq, seed).map(|(h, _)| h)
        })
        .collect()
}

/// Mean-pooled title and description features.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbedding {
    pub title: Array1<f64>,
    pub description: Array1<f64>,
}

pub fn span_mean(rows: &Array2<f64>, span: (usize, usize)) -> Option<Array1<f64>> {
    if span.1 <= span.0 || span.1 > rows.nrows() {
        return None;
    }
    rows.slice(ndarray::s![span.0..span.1, ..]).mean_axis(Axis(0))
}

pub fn pool_features(
    states: &HiddenStates,
    seq: &InputSequence,
) -> Result<ItemEmbedding, EncoderError> {
    Ok(ItemEmbedding {
        title: span_mean(&states.rows, seq.title_span).ok_or(EncoderError::EmptySpan("title"))?,
        description: span_mean(&states.rows, seq.desc_span)
            .ok_or(EncoderError::EmptySpan("description"))?,
    })
}

/// Unmasked, dropout-free embedding of one encoded pair.
pub fn embed_sequence(model: &Model, seq: &InputSequence) -> Result<ItemEmbedding, EncoderError> {
    let (states, _) = model.forward_cached(seq, None)?;
    pool_features(&states, seq)
}

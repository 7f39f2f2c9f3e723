//! The cosine title-description head, the tied-weight MLM classifier, their
//! losses, and exact gradients of the combined objective.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{
    backward_sequence, span_mean, EncoderError, HiddenStates, Model, Parameters, TdmProjection,
};
use crate::tokenizer::{InputSequence, MaskedSequence};

/// Norm below which a feature vector counts as zero.
pub const ZERO_NORM: f64 = 1e-12;
/// Probability clamp applied before logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("zero-norm feature vector")]
    ZeroVector,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("target position {0} outside sequence of length {1}")]
    PositionOutOfRange(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Which losses drive training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Title-description matching plus masked language modeling.
    Recobert,
    /// Masked language modeling alone (the domain-specialist baseline).
    MlmOnly,
}

/// `(1 + cos(a, b)) / 2`, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct TdmScore(pub f64);

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64, ObjectiveError> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na <= ZERO_NORM || nb <= ZERO_NORM {
        return Err(ObjectiveError::ZeroVector);
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn c_tdm(title: ArrayView1<f64>, desc: ArrayView1<f64>) -> Result<TdmScore, ObjectiveError> {
    Ok(TdmScore((1.0 + cosine(title, desc)?) / 2.0))
}

/// Score and its gradients with respect to both inputs.
fn c_tdm_with_grad(
    a: &Array1<f64>,
    b: &Array1<f64>,
) -> Result<(f64, Array1<f64>, Array1<f64>), ObjectiveError> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na <= ZERO_NORM || nb <= ZERO_NORM {
        return Err(ObjectiveError::ZeroVector);
    }
    let cos = a.dot(b) / (na * nb);
    // d cos / d a = b / (|a||b|) − cos · a / |a|²
    let da = (b / (na * nb) - a * (cos / (na * na))) * 0.5;
    let db = (a / (na * nb) - b * (cos / (nb * nb))) * 0.5;
    Ok(((1.0 + cos) / 2.0, da, db))
}

/// Mean binary cross-entropy with scores clamped into `[εc, 1 − εc]`.
pub fn loss_tdm(scores: &[TdmScore], labels: &[bool]) -> Result<f64, ObjectiveError> {
    if scores.len() != labels.len() {
        return Err(ObjectiveError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let sum: f64 = scores
        .iter()
        .zip(labels)
        .map(|(s, &y)| bce(s.0, y))
        .sum();
    Ok(sum / scores.len() as f64)
}

fn bce(score: f64, label: bool) -> f64 {
    let s = score.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label {
        -s.ln()
    } else {
        -(1.0 - s).ln()
    }
}

/// d bce / d score (zero where the clamp is active).
fn bce_grad(score: f64, label: bool) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&score) {
        return 0.0;
    }
    if label {
        -1.0 / score
    } else {
        1.0 / (1.0 - score)
    }
}

/// Vocabulary logits `states[l] · Eᵀ + b` at each target position.
pub fn mlm_logits(
    states: &HiddenStates,
    positions: &[usize],
    params: &Parameters,
) -> Result<Array2<f64>, ObjectiveError> {
    let rows = gather_rows(&states.rows, positions)?;
    Ok(rows.dot(&params.token_emb.t()) + &params.mlm_bias)
}

fn gather_rows(rows: &Array2<f64>, positions: &[usize]) -> Result<Array2<f64>, ObjectiveError> {
    if let Some(&p) = positions.iter().find(|&&p| p >= rows.nrows()) {
        return Err(ObjectiveError::PositionOutOfRange(p, rows.nrows()));
    }
    Ok(rows.select(Axis(0), positions))
}

fn log_softmax_row(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

/// Sum of negative log-probabilities of the true ids.
fn mlm_nll_sum(logits: &Array2<f64>, target_ids: &[u32]) -> f64 {
    logits
        .rows()
        .into_iter()
        .zip(target_ids)
        .map(|(row, &k)| -log_softmax_row(row)[k as usize])
        .sum()
}

/// Mean negative log-softmax probability of each row's true id.
pub fn loss_mlm(logits: &Array2<f64>, target_ids: &[u32]) -> Result<f64, ObjectiveError> {
    if logits.nrows() != target_ids.len() {
        return Err(ObjectiveError::LengthMismatch(logits.nrows(), target_ids.len()));
    }
    if target_ids.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    Ok(mlm_nll_sum(logits, target_ids) / target_ids.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_tdm: f64,
    pub l_mlm: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn new(l_tdm: f64, l_mlm: f64) -> Self {
        LossBreakdown {
            l_tdm,
            l_mlm,
            l_total: l_tdm + l_mlm,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_tdm.is_finite() && self.l_mlm.is_finite() && self.l_total.is_finite()
    }
}

/// A masked title-description pair with its same-item label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub seq: MaskedSequence,
    pub label: bool,
}

fn project(
    proj: Option<&TdmProjection>,
    title: Array1<f64>,
    desc: Array1<f64>,
) -> (Array1<f64>, Array1<f64>) {
    match proj {
        Some(p) => (
            title.dot(&p.w_title) + &p.b_title,
            desc.dot(&p.w_desc) + &p.b_desc,
        ),
        None => (title, desc),
    }
}

/// TDM score of an (unmasked) encoded pair, including the optional
/// projection.
pub fn pair_tdm_score(model: &Model, seq: &InputSequence) -> Result<TdmScore, ObjectiveError> {
    let (states, _) = model.forward_cached(seq, None)?;
    tdm_from_states(model, &states, seq)
}

fn pooled(
    states: &HiddenStates,
    seq: &InputSequence,
) -> Result<(Array1<f64>, Array1<f64>), ObjectiveError> {
    let t = span_mean(&states.rows, seq.title_span).ok_or(EncoderError::EmptySpan("title"))?;
    let d = span_mean(&states.rows, seq.desc_span).ok_or(EncoderError::EmptySpan("description"))?;
    Ok((t, d))
}

fn tdm_from_states(
    model: &Model,
    states: &HiddenStates,
    seq: &InputSequence,
) -> Result<TdmScore, ObjectiveError> {
    let (t, d) = pooled(states, seq)?;
    let (t, d) = project(model.params.tdm.as_ref(), t, d);
    c_tdm(t.view(), d.view())
}

struct SampleOutput {
    tdm_loss: f64,
    mlm_nll: f64,
    grads: Option<Parameters>,
}

fn check_targets(ex: &TrainingExample) -> Result<(), ObjectiveError> {
    let len = ex.seq.base.len();
    match ex.seq.targets.iter().find(|(p, _)| *p >= len) {
        Some(&(p, _)) => Err(ObjectiveError::PositionOutOfRange(p, len)),
        None => Ok(()),
    }
}

/// Loss terms of one sample, and optionally its gradient contribution
/// already scaled by the batch normalizers.
fn sample_pass(
    model: &Model,
    ex: &TrainingExample,
    objective: Objective,
    tdm_scale: f64,
    mlm_scale: f64,
    dropout_seed: Option<u64>,
    with_grads: bool,
) -> Result<SampleOutput, ObjectiveError> {
    check_targets(ex)?;
    let seq = &ex.seq.base;
    let (states, cache) = model.forward_cached(seq, dropout_seed)?;
    let n = seq.content_len();
    let h = model.config.hidden;
    let params = &model.params;
    let mut d_rows = with_grads.then(|| Array2::<f64>::zeros((n, h)));
    let mut grads = with_grads.then(|| params.zeros_like());

    let mut tdm_loss = 0.0;
    if objective == Objective::Recobert {
        let (ft, fd) = pooled(&states, seq)?;
        let (gt, gd) = project(params.tdm.as_ref(), ft.clone(), fd.clone());
        let (score, d_gt, d_gd) = c_tdm_with_grad(&gt, &gd)?;
        tdm_loss = bce(score, ex.label);
        if let (Some(d_rows), Some(grads)) = (d_rows.as_mut(), grads.as_mut()) {
            let g = bce_grad(score, ex.label) * tdm_scale;
            let (mut d_ft, mut d_fd) = (d_gt * g, d_gd * g);
            if let (Some(p), Some(gp)) = (params.tdm.as_ref(), grads.tdm.as_mut()) {
                outer_add(&mut gp.w_title, &ft, &d_ft);
                gp.b_title += &d_ft;
                outer_add(&mut gp.w_desc, &fd, &d_fd);
                gp.b_desc += &d_fd;
                d_ft = p.w_title.dot(&d_ft);
                d_fd = p.w_desc.dot(&d_fd);
            }
            spread_mean_grad(d_rows, seq.title_span, &d_ft);
            spread_mean_grad(d_rows, seq.desc_span, &d_fd);
        }
    }

    let mut mlm_nll = 0.0;
    if !ex.seq.targets.is_empty() {
        let positions: Vec<usize> = ex.seq.targets.iter().map(|t| t.0).collect();
        let ids: Vec<u32> = ex.seq.targets.iter().map(|t| t.1).collect();
        let hidden = gather_rows(&states.rows, &positions)?;
        let logits = hidden.dot(&params.token_emb.t()) + &params.mlm_bias;
        let mut d_logits = Array2::zeros(logits.dim());
        for (r, (row, &k)) in logits.rows().into_iter().zip(&ids).enumerate() {
            let logp = log_softmax_row(row);
            mlm_nll -= logp[k as usize];
            if with_grads {
                let mut d = d_logits.row_mut(r);
                d.assign(&logp.mapv(f64::exp));
                d[k as usize] -= 1.0;
            }
        }
        if let (Some(d_rows), Some(grads)) = (d_rows.as_mut(), grads.as_mut()) {
            d_logits *= mlm_scale;
            grads.token_emb += &d_logits.t().dot(&hidden);
            grads.mlm_bias += &d_logits.sum_axis(Axis(0));
            let d_hidden = d_logits.dot(&params.token_emb);
            for (&p, row) in positions.iter().zip(d_hidden.rows()) {
                let mut dst = d_rows.row_mut(p);
                dst += &row;
            }
        }
    }

    if let (Some(d_rows), Some(g)) = (d_rows, grads.as_mut()) {
        backward_sequence(model, &cache, d_rows, g);
    }
    Ok(SampleOutput {
        tdm_loss,
        mlm_nll,
        grads,
    })
}

fn outer_add(dst: &mut Array2<f64>, col: &Array1<f64>, row: &Array1<f64>) {
    for (i, &c) in col.iter().enumerate() {
        let mut r = dst.row_mut(i);
        r.scaled_add(c, row);
    }
}

fn spread_mean_grad(d_rows: &mut Array2<f64>, span: (usize, usize), d_mean: &Array1<f64>) {
    let scale = 1.0 / (span.1 - span.0) as f64;
    for p in span.0..span.1 {
        let mut r = d_rows.row_mut(p);
        r.scaled_add(scale, d_mean);
    }
}

fn run_batch(
    model: &Model,
    batch: &[TrainingExample],
    objective: Objective,
    dropout_seeds: Option<&[u64]>,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<Parameters>), ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let n_targets: usize = batch.iter().map(|e| e.seq.targets.len()).sum();
    let mlm_scale = if n_targets > 0 { 1.0 / n_targets as f64 } else { 0.0 };
    let outputs: Vec<SampleOutput> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let seed = dropout_seeds.map(|s| s[i]);
            sample_pass(model, ex, objective, 1.0 / n, mlm_scale, seed, with_grads)
        })
        .collect::<Result<_, _>>()?;
    // fixed reduction order keeps results independent of thread count
    let mut tdm = 0.0;
    let mut nll = 0.0;
    let mut grads: Option<Parameters> = None;
    for out in outputs {
        tdm += out.tdm_loss;
        nll += out.mlm_nll;
        if let Some(g) = out.grads {
            match grads.as_mut() {
                Some(acc) => acc.add_scaled(&g, 1.0),
                None => grads = Some(g),
            }
        }
    }
    let l_tdm = match objective {
        Objective::Recobert => tdm / n,
        Objective::MlmOnly => 0.0,
    };
    Ok((LossBreakdown::new(l_tdm, nll * mlm_scale), grads))
}

/// Losses of a batch and the gradient of `l_total` with respect to every
/// parameter. One forward pass per sample serves both losses.
///
/// `dropout_seeds`, when given, holds one dropout stream seed per sample.
pub fn total_loss_and_gradients(
    model: &Model,
    batch: &[TrainingExample],
    objective: Objective,
    dropout_seeds: Option<&[u64]>,
) -> Result<(LossBreakdown, Parameters), ObjectiveError> {
    if let Some(s) = dropout_seeds {
        if s.len() != batch.len() {
            return Err(ObjectiveError::LengthMismatch(s.len(), batch.len()));
        }
    }
    let (loss, grads) = run_batch(model, batch, objective, dropout_seeds, true)?;
    Ok((loss, grads.expect("nonempty batch yields gradients")))
}

/// Dropout-free losses without gradients.
pub fn batch_loss(
    model: &Model,
    batch: &[TrainingExample],
    objective: Objective,
) -> Result<LossBreakdown, ObjectiveError> {
    run_batch(model, batch, objective, None, false).map(|(l, _)| l)
}

/// Features and TDM score of each (unmasked) example, for diagnostics.
pub fn tdm_scores(model: &Model, seqs: &[InputSequence]) -> Result<Vec<TdmScore>, ObjectiveError> {
    seqs.par_iter().map(|s| pair_tdm_score(model, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_model, EncoderConfig};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn c_tdm_values() {
        let a = array![1.0, 2.0, 3.0];
        assert!((c_tdm(a.view(), a.view()).unwrap().0 - 1.0).abs() < 1e-15);
        assert_eq!(c_tdm(array![1.0, 0.0].view(), array![-1.0, 0.0].view()).unwrap().0, 0.0);
        assert_eq!(c_tdm(array![1.0, 0.0].view(), array![0.0, 1.0].view()).unwrap().0, 0.5);
        assert!(matches!(
            c_tdm(array![0.0, 0.0].view(), array![1.0, 0.0].view()),
            Err(ObjectiveError::ZeroVector)
        ));
    }

    #[test]
    fn c_tdm_gradient_matches_differences() {
        let a = array![0.3, -1.2, 0.8];
        let b = array![1.1, 0.4, -0.5];
        let (_, da, db) = c_tdm_with_grad(&a, &b).unwrap();
        for i in 0..3 {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[i] += 1e-6;
            am[i] -= 1e-6;
            let fd = (c_tdm(ap.view(), b.view()).unwrap().0 - c_tdm(am.view(), b.view()).unwrap().0) / 2e-6;
            assert!((fd - da[i]).abs() < 1e-8);
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[i] += 1e-6;
            bm[i] -= 1e-6;
            let fd = (c_tdm(a.view(), bp.view()).unwrap().0 - c_tdm(a.view(), bm.view()).unwrap().0) / 2e-6;
            assert!((fd - db[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn tdm_loss_values() {
        let half = [TdmScore(0.5), TdmScore(0.5)];
        assert!((loss_tdm(&half, &[true, false]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(loss_tdm(&[TdmScore(1.0 - PROB_CLAMP)], &[true]).unwrap() <= 1e-6);
        assert!(loss_tdm(&[TdmScore(1.0)], &[false]).unwrap().is_finite());
        assert!(matches!(loss_tdm(&half, &[true]), Err(ObjectiveError::LengthMismatch(2, 1))));

        // independent scalar recomputation
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<TdmScore> = (0..5).map(|_| TdmScore(rng.random_range(0.01..0.99))).collect();
        let labels: Vec<bool> = (0..5).map(|_| rng.random()).collect();
        let mut oracle = 0.0;
        for i in 0..5 {
            let s = scores[i].0;
            let y = if labels[i] { 1.0 } else { 0.0 };
            oracle += y * s.ln() + (1.0 - y) * (1.0 - s).ln();
        }
        oracle = -oracle / 5.0;
        assert!((loss_tdm(&scores, &labels).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn mlm_loss_values() {
        let uniform = Array2::zeros((3, 1000));
        let l = loss_mlm(&uniform, &[5, 17, 999]).unwrap();
        assert!((l - 1000f64.ln()).abs() < 1e-12);

        let mut peaked = Array2::from_elem((2, 10), -50.0);
        peaked[[0, 3]] = 50.0;
        peaked[[1, 7]] = 50.0;
        assert!(loss_mlm(&peaked, &[3, 7]).unwrap() <= 1e-6);
        assert!(matches!(loss_mlm(&peaked, &[3]), Err(ObjectiveError::LengthMismatch(2, 1))));

        // scalar log-sum-exp oracle
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = Array2::from_shape_simple_fn((4, 9), || rng.random_range(-3.0..3.0));
        let ids = [0u32, 8, 4, 4];
        let mut oracle = 0.0;
        for (r, &k) in ids.iter().enumerate() {
            let mut z = 0.0;
            for c in 0..9 {
                z += f64::exp(logits[[r, c]]);
            }
            oracle += z.ln() - logits[[r, k as usize]];
        }
        oracle /= 4.0;
        assert!((loss_mlm(&logits, &ids).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn mlm_logits_shape_and_argmax() {
        let cfg = EncoderConfig { vocab_size: 50, max_len: 8, hidden: 16, heads: 2, ff_dim: 32, ..EncoderConfig::default() };
        let m = init_model(&cfg, 1).unwrap();
        let states = HiddenStates { rows: Array2::zeros((8, 16)) };
        let logits = mlm_logits(&states, &[1, 2, 3], &m.params).unwrap();
        assert_eq!(logits.dim(), (3, 50));
        let p = log_softmax_row(logits.row(0)).mapv(f64::exp);
        for v in p.iter() {
            assert!((v - 1.0 / 50.0).abs() < 1e-15);
        }

        let mut rows = Array2::zeros((8, 16));
        rows.row_mut(2).assign(&(&m.params.token_emb.row(17) * 1e4));
        let logits = mlm_logits(&HiddenStates { rows }, &[2], &m.params).unwrap();
        let argmax = logits.row(0).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, 17);
        assert!(matches!(
            mlm_logits(&states, &[8], &m.params),
            Err(ObjectiveError::PositionOutOfRange(8, 8))
        ));
    }

    #[test]
    fn scale_invariance_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let a = Array1::from_shape_simple_fn(6, || rng.random_range(-1.0..1.0));
            let b = Array1::from_shape_simple_fn(6, || rng.random_range(-1.0..1.0));
            let (x, y): (f64, f64) = (rng.random_range(0.01..100.0), rng.random_range(0.01..100.0));
            let s = c_tdm(a.view(), b.view()).unwrap().0;
            assert!((s - c_tdm(b.view(), a.view()).unwrap().0).abs() < 1e-14);
            assert!((s - c_tdm((&a * x).view(), (&b * y).view()).unwrap().0).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&s));
        }
    }
}

//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recobert::encoder::{init_model, EncoderConfig, Model};
use recobert::objectives::{batch_loss, total_loss_and_gradients, Objective, TrainingExample};
use recobert::tokenizer::{apply_masking, encode_pair, EncodeOptions, MaskReplacement, Vocabulary};

/// The small configuration used for gradient verification.
pub fn grad_check_config(tdm_projection: bool) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 50,
        max_len: 16,
        hidden: 16,
        layers: 2,
        heads: 2,
        ff_dim: 32,
        dropout: 0.0,
        layer_norm_eps: 1e-12,
        use_segments: true,
        tdm_projection,
    }
}

/// Random masked pairs over a 45-word vocabulary (50 ids with specials).
pub fn random_examples(n: usize, max_len: usize, seed: u64) -> Vec<TrainingExample> {
    let vocab = Vocabulary::from_tokens((0..45).map(|i| format!("w{i}"))).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let nt = rng.random_range(1..4);
            let nd = rng.random_range(2..(max_len - nt - 2).min(9));
            let t: Vec<String> = (0..nt).map(|_| format!("w{}", rng.random_range(0..45))).collect();
            let d: Vec<String> = (0..nd).map(|_| format!("w{}", rng.random_range(0..45))).collect();
            let seq = encode_pair(&t, &d, &vocab, EncodeOptions { max_len, title_cap: 32 }).unwrap();
            let masked = apply_masking(&seq, 0.3, MaskReplacement::default(), vocab.len(), &mut rng);
            TrainingExample { seq: masked, label: i % 2 == 0 }
        })
        .collect()
}

pub const NORM_FLOOR: f64 = 1e-6;

pub struct TensorCheck {
    pub name: String,
    /// ‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖)
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Central finite differences of the batch loss over every entry of every
/// tensor, compared with the analytic gradient.
pub fn finite_difference_check(
    model: &Model,
    batch: &[TrainingExample],
    objective: Objective,
    step: f64,
) -> Vec<TensorCheck> {
    let (_, analytic) = total_loss_and_gradients(model, batch, objective, None).unwrap();
    let analytic_tensors = analytic.tensors();
    let mut probe = model.clone();
    let names: Vec<(String, usize)> =
        model.params.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let mut out = Vec::new();
    for (ti, (name, len)) in names.iter().enumerate() {
        let mut numeric = vec![0.0; *len];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = model.params.tensors()[ti].1.as_slice().unwrap()[k];
            set_entry(&mut probe, ti, k, orig + step);
            let plus = batch_loss(&probe, batch, objective).unwrap().l_total;
            set_entry(&mut probe, ti, k, orig - step);
            let minus = batch_loss(&probe, batch, objective).unwrap().l_total;
            set_entry(&mut probe, ti, k, orig);
            *slot = (plus - minus) / (2.0 * step);
        }
        let a = analytic_tensors[ti].1.as_slice().unwrap();
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        // Tensors whose true gradient vanishes (the key bias shifts every
        // score in a softmax row equally) are compared against an absolute
        // floor well above finite-difference round-off.
        let rel_error = diff / (na + nn).max(NORM_FLOOR);
        out.push(TensorCheck { name: name.clone(), rel_error, analytic_norm: na });
    }
    out
}

fn set_entry(model: &mut Model, tensor: usize, index: usize, value: f64) {
    let mut ts = model.params.tensors_mut();
    ts[tensor].1.as_slice_mut().unwrap()[index] = value;
}

pub fn tiny_model(tdm_projection: bool, seed: u64) -> Model {
    init_model(&grad_check_config(tdm_projection), seed).unwrap()
}

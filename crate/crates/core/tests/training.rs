use recobert::catalog::split_train_val;
use recobert::encoder::{init_model, EncoderConfig};
use recobert::optim::AdamConfig;
use recobert::synth::{generate, SynthConfig};
use recobert::tokenizer::{build_vocab, EncodeOptions};
use recobert::trainer::{train, TrainerConfig, TrainingHistory};
use recobert::{Catalog, Model, Vocabulary};

fn setup() -> (Catalog, Catalog, Vocabulary, Model) {
    let synth = generate(&SynthConfig {
        items: 50,
        clusters: 5,
        // 40 training items are too few to see through borrowed words
        noise_attributes: 0,
        producers: 10,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let (train_cat, val_cat) = split_train_val(&synth.catalog, 0.2, 3).unwrap();
    let corpus: Vec<String> = synth
        .catalog
        .items()
        .iter()
        .flat_map(|i| [i.title.clone(), i.description.clone()])
        .collect();
    let vocab = build_vocab(&corpus, 1, 10_000).unwrap();
    let cfg = EncoderConfig {
        vocab_size: vocab.len(),
        max_len: 32,
        ..EncoderConfig::default()
    };
    let model = init_model(&cfg, 11).unwrap();
    (train_cat, val_cat, vocab, model)
}

fn run(max_steps: usize) -> TrainingHistory {
    let (tr, va, vocab, model) = setup();
    let cfg = TrainerConfig {
        max_steps,
        adam: AdamConfig {
            learning_rate: 3e-4,
            ..AdamConfig::default()
        },
        encode: EncodeOptions {
            max_len: 32,
            title_cap: 8,
        },
        seed: 5,
        ..TrainerConfig::default()
    };
    train(model, &tr, &va, &vocab, &cfg).unwrap().history
}

#[test]
fn total_loss_falls_over_first_200_steps() {
    let h = run(200);
    let first = &h.records[0];
    let last = h.records.iter().find(|r| r.step == 200).unwrap();
    assert!(last.val_total < first.val_total, "{} !< {}", last.val_total, first.val_total);
    assert!(last.train_loss.unwrap() < first.val_total);
}

#[test]
fn tdm_beats_constant_predictor_on_small_catalog() {
    let h = run(2000);
    let best = h.records.iter().find(|r| r.step == h.best_step).unwrap();
    assert!(
        best.val_tdm < std::f64::consts::LN_2,
        "val l_tdm {} at step {}",
        best.val_tdm,
        h.best_step
    );
}

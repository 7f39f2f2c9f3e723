use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use recobert::encoder::{checkpoint_save, init_model, EncoderConfig};
use recobert::synth::{generate, SynthConfig};
use recobert::tokenizer::build_vocab;
use recobert_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn path(&self, name: &str) -> CString {
        CString::new(self.root.join(name).to_str().unwrap()).unwrap()
    }
}

fn write_model(root: &Path, name: &str, vocab: &recobert::Vocabulary, seed: u64) {
    let cfg = EncoderConfig {
        vocab_size: vocab.len(),
        max_len: 32,
        hidden: 16,
        layers: 1,
        heads: 2,
        ff_dim: 32,
        ..EncoderConfig::default()
    };
    let model = init_model(&cfg, seed).unwrap();
    checkpoint_save(&model, vocab.hash(), &root.join(name)).unwrap();
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let synth = generate(&SynthConfig {
        items: 24,
        clusters: 3,
        producers: 6,
        seeds_per_cluster: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    synth.catalog.write_jsonl(&root.join("catalog.jsonl")).unwrap();
    synth.annotations.write_jsonl(&root.join("annotations.jsonl")).unwrap();
    let corpus: Vec<String> = synth
        .catalog
        .items()
        .iter()
        .flat_map(|i| [i.title.clone(), i.description.clone()])
        .collect();
    let vocab = build_vocab(&corpus, 1, 10_000).unwrap();
    vocab.save(&root.join("vocab.txt")).unwrap();
    write_model(&root, "model.rcbt", &vocab, 1);
    write_model(&root, "other.rcbt", &vocab, 2);
    let other_vocab = build_vocab(&["unrelated words only"], 1, 100).unwrap();
    other_vocab.save(&root.join("other_vocab.txt")).unwrap();
    Fixture { _dir: dir, root }
}

fn last_error() -> Option<String> {
    let p = rcb_last_error();
    if p.is_null() {
        None
    } else {
        Some(unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
    }
}

unsafe fn load(f: &Fixture, ckpt: &str) -> (*mut RcbModel, *mut RcbCatalog, *mut RcbStore) {
    let mut model = ptr::null_mut();
    let mut catalog = ptr::null_mut();
    let mut store = ptr::null_mut();
    assert_eq!(
        rcb_model_load(f.path(ckpt).as_ptr(), f.path("vocab.txt").as_ptr(), 0, &mut model),
        RcbStatus::Ok
    );
    assert_eq!(rcb_catalog_load(f.path("catalog.jsonl").as_ptr(), &mut catalog), RcbStatus::Ok);
    assert_eq!(rcb_embed(model, catalog, &mut store), RcbStatus::Ok);
    (model, catalog, store)
}

unsafe fn ranking_ids(r: *const RcbRanking) -> Vec<(String, f64)> {
    let mut n = 0;
    assert_eq!(rcb_ranking_len(r, &mut n), RcbStatus::Ok);
    (0..n)
        .map(|i| {
            let mut id: *const c_char = ptr::null();
            let mut score = 0.0;
            assert_eq!(rcb_ranking_get(r, i, &mut id, &mut score), RcbStatus::Ok);
            (CStr::from_ptr(id).to_str().unwrap().to_string(), score)
        })
        .collect()
}

#[test]
fn embed_rank_and_store_round_trip() {
    let f = fixture();
    unsafe {
        let (model, catalog, store) = load(&f, "model.rcbt");
        assert!(last_error().is_none());
        let (mut n_cat, mut n_store, mut hidden) = (0, 0, 0);
        assert_eq!(rcb_catalog_len(catalog, &mut n_cat), RcbStatus::Ok);
        assert_eq!(rcb_store_len(store, &mut n_store), RcbStatus::Ok);
        assert_eq!(rcb_model_hidden(model, &mut hidden), RcbStatus::Ok);
        assert_eq!((n_cat, n_store, hidden), (24, 24, 16));

        let lambdas = [1.0, 1.0, 1.0, 1.0];
        let seed = CString::new("s0000").unwrap();
        let mut ranking = ptr::null_mut();
        assert_eq!(
            rcb_rank(model, catalog, store, seed.as_ptr(), lambdas.as_ptr(), &mut ranking),
            RcbStatus::Ok
        );
        let first = ranking_ids(ranking);
        assert_eq!(first.len(), 23);
        assert!(first.iter().all(|(id, _)| id != "s0000"));
        assert!(first.windows(2).all(|w| w[0].1 >= w[1].1));
        rcb_ranking_free(ranking);

        assert_eq!(rcb_store_save(store, f.path("store.rcbe").as_ptr()), RcbStatus::Ok);
        let mut reloaded = ptr::null_mut();
        assert_eq!(rcb_store_load(f.path("store.rcbe").as_ptr(), &mut reloaded), RcbStatus::Ok);
        let mut again = ptr::null_mut();
        assert_eq!(
            rcb_rank(model, catalog, reloaded, seed.as_ptr(), lambdas.as_ptr(), &mut again),
            RcbStatus::Ok
        );
        assert_eq!(ranking_ids(again), first);

        rcb_ranking_free(again);
        rcb_store_free(reloaded);
        rcb_store_free(store);
        rcb_catalog_free(catalog);
        rcb_model_free(model);
    }
}

#[test]
fn tdm_score_matches_library() {
    let f = fixture();
    let title = CString::new("Some title").unwrap();
    let desc = CString::new("a description of it .").unwrap();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(
            rcb_model_load(f.path("model.rcbt").as_ptr(), f.path("vocab.txt").as_ptr(), 0, &mut model),
            RcbStatus::Ok
        );
        let mut score = -1.0;
        assert_eq!(rcb_tdm_score(model, title.as_ptr(), desc.as_ptr(), &mut score), RcbStatus::Ok);
        assert!((0.0..=1.0).contains(&score));

        let vocab = recobert::Vocabulary::load(&f.root.join("vocab.txt")).unwrap();
        let (m, _) = recobert::encoder::checkpoint_load(&f.root.join("model.rcbt"), None).unwrap();
        let seq = recobert::tokenizer::encode_pair(
            &recobert::tokenizer::tokenize("Some title"),
            &recobert::tokenizer::tokenize("a description of it ."),
            &vocab,
            recobert::tokenizer::EncodeOptions { max_len: 32, ..Default::default() },
        )
        .unwrap();
        let expected = recobert::objectives::pair_tdm_score(&m, &seq).unwrap().0;
        assert_eq!(score.to_bits(), expected.to_bits());
        rcb_model_free(model);
    }
}

#[test]
fn evaluate_returns_json_report() {
    let f = fixture();
    unsafe {
        let (model, catalog, store) = load(&f, "model.rcbt");
        let lambdas = [1.0, 1.0, 0.0, 0.0];
        let ks = [1usize, 5, 10];
        let mut json = ptr::null_mut();
        assert_eq!(
            rcb_evaluate_json(
                model,
                catalog,
                store,
                f.path("annotations.jsonl").as_ptr(),
                lambdas.as_ptr(),
                ks.as_ptr(),
                ks.len(),
                &mut json,
            ),
            RcbStatus::Ok
        );
        let text = CStr::from_ptr(json).to_str().unwrap().to_string();
        rcb_string_free(json);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mrr = v["metrics"]["mrr"].as_f64().unwrap();
        assert!(mrr > 0.0 && mrr <= 1.0, "{text}");
        assert!(v["metrics"]["hr"]["hr@10"].is_number(), "{text}");
        rcb_store_free(store);
        rcb_catalog_free(catalog);
        rcb_model_free(model);
    }
}

#[test]
fn failures_set_status_and_message() {
    let f = fixture();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(
            rcb_model_load(ptr::null(), f.path("vocab.txt").as_ptr(), 0, &mut model),
            RcbStatus::NullPointer
        );
        assert!(last_error().unwrap().contains("checkpoint_path"));
        assert!(model.is_null());

        assert_eq!(
            rcb_model_load(f.path("missing.rcbt").as_ptr(), f.path("vocab.txt").as_ptr(), 0, &mut model),
            RcbStatus::Io
        );
        assert_eq!(
            rcb_model_load(
                f.path("model.rcbt").as_ptr(),
                f.path("other_vocab.txt").as_ptr(),
                0,
                &mut model
            ),
            RcbStatus::Mismatch
        );

        let bad = [0xffu8, 0xfe, 0];
        let mut catalog = ptr::null_mut();
        assert_eq!(rcb_catalog_load(bad.as_ptr().cast(), &mut catalog), RcbStatus::InvalidUtf8);

        let (model, catalog, store) = load(&f, "model.rcbt");
        let lambdas = [1.0; 4];
        let mut ranking = ptr::null_mut();
        let unknown = CString::new("nope").unwrap();
        assert_eq!(
            rcb_rank(model, catalog, store, unknown.as_ptr(), lambdas.as_ptr(), &mut ranking),
            RcbStatus::NotFound
        );
        assert!(last_error().unwrap().contains("nope"));

        let nan = [f64::NAN, 1.0, 1.0, 1.0];
        let seed = CString::new("s0001").unwrap();
        assert_eq!(
            rcb_rank(model, catalog, store, seed.as_ptr(), nan.as_ptr(), &mut ranking),
            RcbStatus::InvalidArgument
        );

        // a store embedded by a different model is rejected
        let (other, other_catalog, other_store) = load(&f, "other.rcbt");
        assert_eq!(
            rcb_rank(model, catalog, other_store, seed.as_ptr(), lambdas.as_ptr(), &mut ranking),
            RcbStatus::Mismatch
        );

        assert_eq!(
            rcb_rank(model, catalog, store, seed.as_ptr(), lambdas.as_ptr(), &mut ranking),
            RcbStatus::Ok
        );
        assert!(last_error().is_none());
        let mut id: *const c_char = ptr::null();
        let mut score = 0.0;
        assert_eq!(rcb_ranking_get(ranking, 23, &mut id, &mut score), RcbStatus::InvalidArgument);
        assert_eq!(rcb_ranking_get(ranking, 0, ptr::null_mut(), &mut score), RcbStatus::NullPointer);
        assert_eq!(rcb_catalog_len(ptr::null(), &mut 0), RcbStatus::NullPointer);

        rcb_ranking_free(ranking);
        rcb_ranking_free(ptr::null_mut());
        rcb_string_free(ptr::null_mut());
        for (m, c, s) in [(model, catalog, store), (other, other_catalog, other_store)] {
            rcb_store_free(s);
            rcb_catalog_free(c);
            rcb_model_free(m);
        }
    }
}

const EXPORTS: &[&str] = &[
    "rcb_last_error",
    "rcb_model_load",
    "rcb_model_free",
    "rcb_model_hidden",
    "rcb_tdm_score",
    "rcb_catalog_load",
    "rcb_catalog_free",
    "rcb_catalog_len",
    "rcb_embed",
    "rcb_store_save",
    "rcb_store_load",
    "rcb_store_len",
    "rcb_store_free",
    "rcb_rank",
    "rcb_ranking_len",
    "rcb_ranking_get",
    "rcb_ranking_free",
    "rcb_evaluate_json",
    "rcb_string_free",
];

fn header_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/recobert.h")
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(header_path()).unwrap();
    for name in EXPORTS {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    for ty in ["typedef struct RcbModel RcbModel;", "RCB_STATUS_OK = 0", "RCB_STATUS_PANIC = 99"] {
        assert!(header.contains(ty), "{ty}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(out) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler, skipping");
        return;
    };
    assert!(out.status.success());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "recobert.h"
int run(const char *ckpt, const char *vocab, const char *cat) {
    RcbModel *m = NULL; RcbCatalog *c = NULL; RcbStore *s = NULL; RcbRanking *r = NULL;
    double lambdas[4] = {1, 1, 1, 1};
    if (rcb_model_load(ckpt, vocab, 0, &m) != RCB_STATUS_OK) return 1;
    if (rcb_catalog_load(cat, &c) != RCB_STATUS_OK) return 1;
    if (rcb_embed(m, c, &s) != RCB_STATUS_OK) return 1;
    if (rcb_rank(m, c, s, "s0000", lambdas, &r) != RCB_STATUS_OK) return (int)rcb_last_error()[0];
    const char *id; double score; size_t n;
    rcb_ranking_len(r, &n);
    rcb_ranking_get(r, 0, &id, &score);
    rcb_ranking_free(r); rcb_store_free(s); rcb_catalog_free(c); rcb_model_free(m);
    return 0;
}
"#,
    )
    .unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header_path().parent().unwrap())
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

use std::path::Path;

use captioner::data::{self, RawCaption, SynthConfig};
use captioner::eval::evaluate;
use captioner::model::checkpoint::{load_checkpoint, save_checkpoint, vocab_sidecar_path};
use captioner::model::{init_params, ModelConfig, Precision};
use captioner::text::{Token, Vocabulary};
use captioner::train::{grad_check, train, EpochRecord, GradCheckCase, TrainConfig, TrainPaths};
use captioner::Error;

fn small_model() -> ModelConfig {
    ModelConfig {
        d_embed: 8,
        hidden: 6,
        n: 6,
        ..ModelConfig::default()
    }
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        log_every: 0,
        ..TrainConfig::default()
    }
}

fn synth(dir: &Path, images: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    data::synth_dataset(&SynthConfig::new(images, 8, 6, 5, 2))
        .unwrap()
        .write(dir)
        .unwrap()
}

#[test]
fn synthetic_files_train_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let (emb, cap) = synth(dir.path(), 6);
    let ckpt = dir.path().join("m.cckp");
    let mut seen = Vec::new();
    let paths = TrainPaths {
        captions: &cap,
        embeddings: &emb,
        checkpoint_out: &ckpt,
    };
    let report = train(paths, small_model(), &quick(3), 1, |r: &EpochRecord| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, [1, 2, 3]);
    assert_eq!(report.pairs, 6);
    assert_eq!(report.samples_per_epoch, 6 * 6);
    assert_eq!(report.model.d_img, 8);
    assert_eq!(report.model.vocab_size, report.vocab.len());

    let lines: Vec<serde_json::Value> = report
        .to_jsonl()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2]["epoch"], 3);
    assert!(lines[0].get("seconds").is_none());

    let params = load_checkpoint(&ckpt).unwrap();
    assert_eq!(*params.config(), report.model);
    assert_eq!(Vocabulary::load(vocab_sidecar_path(&ckpt)).unwrap(), report.vocab);
}

#[test]
fn zero_epochs_still_writes_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (emb, cap) = synth(dir.path(), 3);
    let ckpt = dir.path().join("m.cckp");
    let paths = TrainPaths {
        captions: &cap,
        embeddings: &emb,
        checkpoint_out: &ckpt,
    };
    let report = train(paths, small_model(), &quick(0), 1, |_| {}).unwrap();
    assert!(report.epochs.is_empty());
    assert_eq!(report.final_loss(), None);
    let fresh = init_params::<f32>(report.model, 0).unwrap();
    match load_checkpoint(&ckpt).unwrap() {
        captioner::model::checkpoint::AnyParams::F32(p) => assert_eq!(p, fresh),
        other => panic!("unexpected precision {:?}", other.config().precision),
    }
}

#[test]
fn dangling_caption_id_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let (emb, _) = synth(dir.path(), 3);
    let cap = dir.path().join("dangling.tsv");
    data::save_captions(
        &[RawCaption {
            image_id: "ghost".into(),
            caption: "w1 w2".into(),
        }],
        &cap,
    )
    .unwrap();
    let ckpt = dir.path().join("m.cckp");
    let paths = TrainPaths {
        captions: &cap,
        embeddings: &emb,
        checkpoint_out: &ckpt,
    };
    let err = train(paths, small_model(), &quick(1), 1, |_| {}).unwrap_err();
    assert!(matches!(&err, Error::MissingEmbedding(id) if id == "ghost"), "{err}");
    assert!(!ckpt.exists());
}

/// Writes a model whose output bias makes `<unk>` the argmax everywhere.
fn silent_checkpoint(dir: &Path, d_img: usize) -> std::path::PathBuf {
    let vocab = Vocabulary::from_tokens(["w0", "w1", "w2", "w3", "w4", "w5"].map(|w| Token::new(w).unwrap())).unwrap();
    let cfg = ModelConfig {
        d_img,
        vocab_size: vocab.len(),
        precision: Precision::F64,
        ..small_model()
    };
    let mut p = init_params::<f64>(cfg, 1).unwrap();
    p.w_out.fill(0.0);
    p.b_out.fill(0.0);
    p.b_out[0] = 5.0;
    let ckpt = dir.join("silent.cckp");
    save_checkpoint(&p, &ckpt).unwrap();
    vocab.save(vocab_sidecar_path(&ckpt)).unwrap();
    ckpt
}

#[test]
fn empty_generations_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (emb, cap) = synth(dir.path(), 4);
    let ckpt = silent_checkpoint(dir.path(), 8);
    let out = dir.path().join("eval.json");
    let report = evaluate(&ckpt, None, &cap, &emb, Some(&out)).unwrap();
    assert_eq!(report.corpus_bleu, 0.0);
    assert_eq!(report.mean_sentence_bleu_x100, 0.0);
    assert_eq!(report.per_image.len(), 4);

    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let first = &json["per_image"][0];
    assert_eq!(first["id"], "img00000");
    assert_eq!(first["generated"], "");
    assert_eq!(first["sentence_bleu"], 0.0);
    let raw = data::load_captions(&cap).unwrap();
    assert_eq!(first["reference"], raw[0].caption.as_str());
    for key in ["corpus_bleu", "mean_sentence_bleu_x100"] {
        assert!(json[key].is_number(), "{key}");
    }
}

#[test]
fn evaluation_requires_every_embedding() {
    let dir = tempfile::tempdir().unwrap();
    let (emb, _) = synth(dir.path(), 2);
    let ckpt = silent_checkpoint(dir.path(), 8);
    let cap = dir.path().join("extra.tsv");
    std::fs::write(&cap, "img00000\tw1 w2\nimg09999\tw3 w4\n").unwrap();
    let err = evaluate(&ckpt, None, &cap, &emb, None).unwrap_err();
    assert!(matches!(&err, Error::MissingEmbedding(id) if id == "img09999"), "{err}");
}

#[test]
fn random_grad_check_cases_pass() {
    let tiny = ModelConfig {
        d_img: 5,
        d_embed: 6,
        hidden: 4,
        layers: 2,
        bidirectional: true,
        vocab_size: 12,
        n: 4,
        precision: Precision::F64,
    };
    for (seed, cfg) in [
        (0, tiny),
        (1, tiny),
        (2, ModelConfig { bidirectional: false, ..tiny }),
        (3, ModelConfig { n: 1, vocab_size: 3, ..tiny }),
    ] {
        let case = GradCheckCase::random(cfg, seed).unwrap();
        assert_eq!(case.prefix.len(), cfg.n);
        assert!(case.target < cfg.vocab_size);
        let report = grad_check(&case.params, case.input(), case.target, 1e-5, seed).unwrap();
        assert!(report.max_relative_error < 1e-4, "seed {seed}: {report:?}");
    }
}

//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every criterion prints exactly one PASS/FAIL line, even on success.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use captioner::data::{self, CaptionRecord, SynthConfig};
use captioner::decode::{caption_image, StopReason};
use captioner::eval::{evaluate, sentence_bleu};
use captioner::model::checkpoint::{load_checkpoint, read_checkpoint, vocab_sidecar_path};
use captioner::model::{init_params, softmax_cross_entropy, ModelConfig, Precision, SequenceInput};
use captioner::text::{EncodedCaption, Vocabulary};
use captioner::train::{grad_check, train, TrainConfig, TrainPaths};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, Check); 8] = [
        ("1 table_i_expansion", Duration::from_secs(1), table_i_expansion),
        ("2 gradient_check", Duration::from_secs(60), gradient_check),
        ("3 overfit_and_recover", Duration::from_secs(120), overfit_and_recover),
        ("4 bleu_oracle", Duration::from_secs(1), bleu_oracle),
        ("5 softmax_normalization", Duration::from_secs(5), softmax_normalization),
        ("6 truncation_artifact", Duration::from_secs(120), truncation_artifact),
        ("7 determinism", Duration::from_secs(240), determinism),
        ("8 format_round_trips", Duration::from_secs(5), format_round_trips),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|panic| Err(format!("panicked: {}", panic_message(&panic))));
        let elapsed = started.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; took {elapsed:.1?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({detail}; {elapsed:.2?})"),
            Err(why) => {
                failed += 1;
                println!("criterion {name}: FAIL ({why})");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn panic_message(panic: &Box<dyn std::any::Any + Send>) -> String {
    panic
        .downcast_ref::<String>()
        .cloned()
        .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn table_i_expansion() -> Result<String, String> {
    let (t1, t2, t3, t4, u) = (11, 12, 13, 14, 0);
    let record = CaptionRecord {
        image_id: "I".into(),
        encoded: EncodedCaption::from_ids(vec![t1, t2, t3, t4, u], 20).map_err(e)?,
    };
    let rows = data::expand_pair(&record, 5).map_err(e)?;
    let expected: [([usize; 5], usize); 5] = [
        ([u, u, u, u, u], t1),
        ([t1, u, u, u, u], t2),
        ([t1, t2, u, u, u], t3),
        ([t1, t2, t3, u, u], t4),
        ([t1, t2, t3, t4, u], u),
    ];
    ensure!(rows.len() == 5, "expected 5 rows, got {}", rows.len());
    for (k, (row, (prefix, target))) in rows.iter().zip(expected).enumerate() {
        ensure!(row.image_id == "I", "row {k} lost the image id");
        ensure!(row.prefix == prefix, "row {k} prefix {:?} != {:?}", row.prefix, prefix);
        ensure!(row.target == target, "row {k} target {} != {}", row.target, target);
    }
    Ok("5 rows exact".into())
}

fn gradient_check() -> Result<String, String> {
    let cfg = ModelConfig {
        d_img: 5,
        d_embed: 6,
        hidden: 4,
        layers: 2,
        bidirectional: true,
        vocab_size: 12,
        n: 4,
        precision: Precision::F64,
    };
    let params = init_params::<f64>(cfg, 42).map_err(e)?;
    let image = [0.9, -0.4, 0.3, -1.0, 0.55];
    let prefix = [3, 7, 0, 0];
    let report = grad_check(&params, SequenceInput { image: &image, prefix: &prefix }, 5, 1e-5, 0).map_err(e)?;
    ensure!(report.sampled_indices.is_none(), "expected every component to be checked");
    ensure!(
        report.max_relative_error < 1e-4,
        "max relative error {:.3e} at {:?}",
        report.max_relative_error,
        report.worst
    );
    Ok(format!(
        "max relative error {:.2e} over {} components",
        report.max_relative_error, report.checked
    ))
}

fn overfit_and_recover() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(e)?;
    let mut synth = SynthConfig::new(5, 16, 10, 6, 7);
    synth.min_caption_len = Some(4);
    let (emb, cap) = data::synth_dataset(&synth).map_err(e)?.write(dir.path()).map_err(e)?;
    let ckpt = dir.path().join("overfit.cckp");
    let model = ModelConfig {
        d_embed: 32,
        hidden: 32,
        n: 7,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        learning_rate: 0.1,
        epochs: 300,
        batch_size: 1,
        log_every: 0,
        ..TrainConfig::default()
    };
    let paths = TrainPaths {
        captions: &cap,
        embeddings: &emb,
        checkpoint_out: &ckpt,
    };
    let report = train(paths, model, &cfg, 1, |_| {}).map_err(e)?;
    let loss = report.final_loss().ok_or("no epochs ran")?;
    ensure!(loss < 0.1, "final mean loss {loss:.4} >= 0.1");

    let params = load_checkpoint(&ckpt).map_err(e)?;
    let vocab = Vocabulary::load(vocab_sidecar_path(&ckpt)).map_err(e)?;
    let table = data::load_embeddings(&emb).map_err(e)?;
    for raw in data::load_captions(&cap).map_err(e)? {
        let got = caption_image(&params, &vocab, table.vector(&raw.image_id).map_err(e)?).map_err(e)?;
        ensure!(
            got.text() == raw.caption,
            "{}: decoded `{}`, trained on `{}`",
            raw.image_id,
            got.text(),
            raw.caption
        );
    }
    let eval = evaluate(&ckpt, None, &cap, &emb, None).map_err(e)?;
    ensure!(eval.corpus_bleu == 1.0, "corpus BLEU {} on the training pairs", eval.corpus_bleu);
    ensure!(
        eval.mean_sentence_bleu_x100 > 95.0,
        "mean sentence BLEU x100 {:.2}",
        eval.mean_sentence_bleu_x100
    );
    Ok(format!(
        "loss {loss:.4}, 5/5 exact, BLEU x100 {:.1}",
        eval.mean_sentence_bleu_x100
    ))
}

fn bleu_oracle() -> Result<String, String> {
    fn s(t: &str) -> Vec<&str> {
        t.split(' ').collect()
    }
    let worked = sentence_bleu(&s("a b c d"), &[s("a b c d e")], 4, false).map_err(e)?.score;
    ensure!(
        (worked - (-0.25f64).exp()).abs() <= 1e-9,
        "worked example {worked} != exp(-0.25)"
    );
    let same = sentence_bleu(&s("a b c d e"), &[s("a b c d e")], 4, false).map_err(e)?.score;
    ensure!(same == 1.0, "identical sentence scored {same}");
    let none = sentence_bleu(&s("p q r s"), &[s("a b c d")], 4, false).map_err(e)?.score;
    ensure!(none == 0.0, "zero-overlap sentence scored {none}");
    Ok(format!("worked example {worked:.12}"))
}

fn softmax_normalization() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let len = rng.random_range(2..64);
        let scale = [1.0, 1e2, 1e3, 1e4][i % 4];
        let logits: Vec<f64> = (0..len).map(|_| rng.random_range(-scale..=scale)).collect();
        let logits = ndarray::Array1::from(logits);
        let (loss, probs) = softmax_cross_entropy(logits.view(), i % len).map_err(e)?;
        ensure!(loss.is_finite() && loss >= 0.0, "vector {i}: loss {loss}");
        ensure!(probs.iter().all(|p| (0.0..=1.0).contains(p)), "vector {i}: probability out of range");
        worst = worst.max((probs.sum() - 1.0).abs());
    }
    ensure!(worst <= 1e-9, "worst |sum - 1| = {worst:.3e}");
    Ok(format!("worst |sum - 1| = {worst:.1e}"))
}

fn truncation_artifact() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(e)?;
    let mut synth = SynthConfig::new(6, 12, 10, 9, 3);
    synth.min_caption_len = Some(7);
    let (emb, cap) = data::synth_dataset(&synth).map_err(e)?.write(dir.path()).map_err(e)?;
    let ckpt = dir.path().join("truncated.cckp");
    let model = ModelConfig {
        d_embed: 12,
        hidden: 12,
        n: 5,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 60,
        batch_size: 1,
        log_every: 0,
        ..TrainConfig::default()
    };
    let paths = TrainPaths {
        captions: &cap,
        embeddings: &emb,
        checkpoint_out: &ckpt,
    };
    train(paths, model, &cfg, 1, |_| {}).map_err(e)?;

    let params = load_checkpoint(&ckpt).map_err(e)?;
    let vocab = Vocabulary::load(vocab_sidecar_path(&ckpt)).map_err(e)?;
    let table = data::load_embeddings(&emb).map_err(e)?;
    let raw = data::load_captions(&cap).map_err(e)?;
    for r in &raw {
        ensure!(r.caption.split(' ').count() > 5, "{} is not longer than n", r.image_id);
        let got = caption_image(&params, &vocab, table.vector(&r.image_id).map_err(e)?).map_err(e)?;
        ensure!(
            got.stopped_by == StopReason::LengthLimit,
            "{} stopped by {:?} after `{}`",
            r.image_id,
            got.stopped_by,
            got.text()
        );
    }
    Ok(format!("{}/{} captions cut at n = 5", raw.len(), raw.len()))
}

fn pipeline_run(dir: &Path) -> Result<Vec<(&'static str, Vec<u8>)>, String> {
    let (emb, cap) = data::synth_dataset(&SynthConfig::new(12, 16, 12, 6, 11))
        .map_err(e)?
        .write(dir)
        .map_err(e)?;
    let ckpt = dir.join("model.cckp");
    let cfg = TrainConfig {
        epochs: 15,
        batch_size: 4,
        shuffle_seed: 9,
        init_seed: 4,
        log_every: 0,
        ..TrainConfig::default()
    };
    let model = ModelConfig {
        d_embed: 16,
        hidden: 12,
        n: 8,
        ..ModelConfig::default()
    };
    let paths = TrainPaths {
        captions: &cap,
        embeddings: &emb,
        checkpoint_out: &ckpt,
    };
    let report = train(paths, model, &cfg, 1, |_| {}).map_err(e)?;
    let eval_path = dir.join("eval.json");
    evaluate(&ckpt, None, &cap, &emb, Some(&eval_path)).map_err(e)?;
    let read = |p: &Path| std::fs::read(p).map_err(e);
    Ok(vec![
        ("embeddings", read(&emb)?),
        ("captions", read(&cap)?),
        ("checkpoint", read(&ckpt)?),
        ("vocabulary", read(&vocab_sidecar_path(&ckpt))?),
        ("training report", report.to_jsonl().into_bytes()),
        ("eval report", read(&eval_path)?),
    ])
}

fn determinism() -> Result<String, String> {
    let (a, b) = (tempfile::tempdir().map_err(e)?, tempfile::tempdir().map_err(e)?);
    let first = pipeline_run(a.path())?;
    let second = pipeline_run(b.path())?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        ensure!(x == y, "{name} differs between runs");
    }
    Ok(format!("{} artifacts byte-identical", first.len()))
}

fn format_round_trips() -> Result<String, String> {
    let table = data::synth_dataset(&SynthConfig::new(7, 9, 5, 4, 1)).map_err(e)?.embeddings;
    let bytes = table.to_bytes();
    let again = data::EmbeddingTable::read_from(bytes.as_slice()).map_err(e)?.to_bytes();
    ensure!(bytes == again, "CEMB bytes changed on rewrite");

    let mut checked = 0;
    for precision in [Precision::F32, Precision::F64] {
        for bidirectional in [true, false] {
            let cfg = ModelConfig {
                d_img: 6,
                d_embed: 5,
                hidden: 3,
                layers: 2,
                bidirectional,
                vocab_size: 9,
                n: 4,
                precision,
            };
            let mut first = Vec::new();
            match precision {
                Precision::F32 => captioner::model::checkpoint::write_checkpoint(&init_params::<f32>(cfg, 8).map_err(e)?, &mut first),
                Precision::F64 => captioner::model::checkpoint::write_checkpoint(&init_params::<f64>(cfg, 8).map_err(e)?, &mut first),
            }
            .map_err(e)?;
            let mut second = Vec::new();
            read_checkpoint(first.as_slice()).map_err(e)?.write_to(&mut second).map_err(e)?;
            ensure!(first == second, "CCKP bytes changed on rewrite ({precision:?}, bidirectional {bidirectional})");
            checked += 1;
        }
    }
    Ok(format!("CEMB and {checked} CCKP variants stable"))
}

//! BLEU scoring and checkpoint evaluation.
//!
//! `sentence_bleu` and `corpus_bleu` implement the usual definition: clipped
//! n-gram precisions for n = 1..=max_n with uniform weights, combined by a
//! geometric mean and multiplied by the brevity penalty `exp(1 − r/c)` when
//! the candidate is not longer than the effective reference length. The
//! effective reference length is the reference length closest to the
//! candidate's, shorter on ties. Unsmoothed scores are zero whenever any
//! precision has no matches.

use std::collections::HashMap;
use std::hash::Hash;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data;
use crate::decode::caption_image;
use crate::error::{Error, Result};
use crate::model::checkpoint::{load_checkpoint, vocab_sidecar_path};
use crate::text::{join_tokens, normalize_and_tokenize, Token, Vocabulary};

/// Multiset of contiguous `k`-token windows.
pub fn ngram_counts<T: Hash + Eq>(tokens: &[T], k: usize) -> HashMap<&[T], usize> {
    assert!(k >= 1, "n-gram order must be positive");
    let mut counts = HashMap::new();
    for window in tokens.windows(k) {
        *counts.entry(window).or_default() += 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct NgramMatch {
    pub matched: usize,
    pub total: usize,
}

impl NgramMatch {
    fn add(&mut self, other: NgramMatch) {
        self.matched += other.matched;
        self.total += other.total;
    }
}

/// Candidate `k`-grams matched against references, each count clipped to the
/// largest count found in any single reference.
pub fn clipped_precision<T: Hash + Eq, R: AsRef<[T]>>(candidate: &[T], references: &[R], k: usize) -> NgramMatch {
    let cand = ngram_counts(candidate, k);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for reference in references {
        for (gram, count) in ngram_counts(reference.as_ref(), k) {
            let slot = max_ref.entry(gram).or_default();
            *slot = (*slot).max(count);
        }
    }
    let matched = cand
        .iter()
        .map(|(gram, &count)| count.min(max_ref.get(gram).copied().unwrap_or(0)))
        .sum();
    NgramMatch {
        matched,
        total: (candidate.len() + 1).saturating_sub(k),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuBreakdown {
    /// Clipped counts for n = 1..=max_n (unsmoothed).
    pub precisions: Vec<NgramMatch>,
    pub brevity_penalty: f64,
    pub score: f64,
    pub candidate_len: usize,
    pub effective_ref_len: usize,
}

fn effective_ref_len(candidate_len: usize, reference_lens: impl IntoIterator<Item = usize>) -> usize {
    reference_lens
        .into_iter()
        .min_by_key(|&r| (r.abs_diff(candidate_len), r))
        .unwrap_or(0)
}

fn combine(precisions: Vec<NgramMatch>, c: usize, r: usize, smoothing: bool) -> BleuBreakdown {
    if c == 0 {
        return BleuBreakdown {
            precisions,
            brevity_penalty: 0.0,
            score: 0.0,
            candidate_len: 0,
            effective_ref_len: r,
        };
    }
    let brevity_penalty = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    let weight = 1.0 / precisions.len() as f64;
    let mut log_sum = 0.0;
    let mut zero = false;
    for (i, p) in precisions.iter().enumerate() {
        let (m, t) = if smoothing && i >= 1 {
            (p.matched + 1, p.total + 1)
        } else {
            (p.matched, p.total)
        };
        if m == 0 {
            zero = true;
            break;
        }
        log_sum += weight * (m as f64 / t as f64).ln();
    }
    let score = if zero { 0.0 } else { brevity_penalty * log_sum.exp() };
    BleuBreakdown {
        precisions,
        brevity_penalty,
        score,
        candidate_len: c,
        effective_ref_len: r,
    }
}

fn check_references<T, R: AsRef<[T]>>(references: &[R]) -> Result<()> {
    if references.iter().all(|r| r.as_ref().is_empty()) {
        return Err(Error::InvalidArgument(
            "BLEU needs at least one non-empty reference".into(),
        ));
    }
    Ok(())
}

/// Sentence-level BLEU. `smoothing` adds one to matched and total counts for
/// n ≥ 2. An empty candidate scores 0 with a brevity penalty of 0.
pub fn sentence_bleu<T: Hash + Eq, R: AsRef<[T]>>(
    candidate: &[T],
    references: &[R],
    max_n: usize,
    smoothing: bool,
) -> Result<BleuBreakdown> {
    if max_n == 0 {
        return Err(Error::InvalidArgument("max_n must be positive".into()));
    }
    check_references(references)?;
    let precisions = (1..=max_n)
        .map(|k| clipped_precision(candidate, references, k))
        .collect();
    let r = effective_ref_len(candidate.len(), references.iter().map(|r| r.as_ref().len()));
    Ok(combine(precisions, candidate.len(), r, smoothing))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusBleu {
    /// Counts and lengths pooled over the corpus before combining.
    pub pooled: BleuBreakdown,
    /// Unsmoothed sentence BLEU averaged over pairs, on a 0–100 scale.
    pub mean_sentence_bleu_x100: f64,
}

/// Corpus-level BLEU plus the mean sentence score.
pub fn corpus_bleu<T: Hash + Eq, R: AsRef<[T]>>(
    pairs: &[(Vec<T>, Vec<R>)],
    max_n: usize,
) -> Result<CorpusBleu> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("corpus BLEU needs at least one pair".into()));
    }
    let mut pooled = vec![NgramMatch::default(); max_n];
    let (mut c, mut r) = (0, 0);
    let mut sentence_sum = 0.0;
    for (candidate, references) in pairs {
        let s = sentence_bleu(candidate, references, max_n, false)?;
        for (acc, p) in pooled.iter_mut().zip(&s.precisions) {
            acc.add(*p);
        }
        c += s.candidate_len;
        r += s.effective_ref_len;
        sentence_sum += s.score;
    }
    Ok(CorpusBleu {
        pooled: combine(pooled, c, r, false),
        mean_sentence_bleu_x100: 100.0 * sentence_sum / pairs.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageResult {
    pub id: String,
    pub reference: String,
    pub generated: String,
    pub sentence_bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub corpus_bleu: f64,
    pub mean_sentence_bleu_x100: f64,
    pub per_image: Vec<ImageResult>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serialize report") + "\n"
    }
}

/// Greedy-decodes every captioned image and scores it against its single
/// reference. The vocabulary defaults to the checkpoint's `.vocab` sidecar.
pub fn evaluate(
    checkpoint: &Path,
    vocab: Option<&Path>,
    captions: &Path,
    embeddings: &Path,
    out_report: Option<&Path>,
) -> Result<EvalReport> {
    let params = load_checkpoint(checkpoint)?;
    let vocab = Vocabulary::load(vocab.map_or_else(|| vocab_sidecar_path(checkpoint), Path::to_path_buf))?;
    let raw = data::load_captions(captions)?;
    let table = data::load_embeddings(embeddings)?;
    if raw.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no captions to evaluate",
            captions.display()
        )));
    }
    let references: Vec<Vec<Token>> = raw.iter().map(|r| normalize_and_tokenize(&r.caption)).collect();
    for (r, tokens) in raw.iter().zip(&references) {
        table.vector(&r.image_id)?;
        if tokens.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "image `{}` has an empty reference caption",
                r.image_id
            )));
        }
    }
    let generated = raw
        .par_iter()
        .map(|r| caption_image(&params, &vocab, table.vector(&r.image_id)?))
        .collect::<Result<Vec<_>>>()?;

    let pairs: Vec<(Vec<Token>, Vec<Vec<Token>>)> = generated
        .iter()
        .zip(&references)
        .map(|(g, r)| (g.tokens.clone(), vec![r.clone()]))
        .collect();
    let corpus = corpus_bleu(&pairs, 4)?;
    let per_image = raw
        .iter()
        .zip(&pairs)
        .map(|(r, (cand, refs))| {
            Ok(ImageResult {
                id: r.image_id.clone(),
                reference: join_tokens(&refs[0]),
                generated: join_tokens(cand),
                sentence_bleu: sentence_bleu(cand, refs, 4, false)?.score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport {
        corpus_bleu: corpus.pooled.score,
        mean_sentence_bleu_x100: corpus.mean_sentence_bleu_x100,
        per_image,
    };
    if let Some(path) = out_report {
        std::fs::write(path, report.to_json()).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

//! Greedy caption generation.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::checkpoint::AnyParams;
use crate::model::{forward, ModelParams, Scalar, SequenceInput};
use crate::text::{Token, Vocabulary, UNK_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The model chose `<unk>`, which doubles as end-of-caption.
    UnkEmitted,
    /// All prefix positions were filled.
    LengthLimit,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedCaption {
    pub tokens: Vec<Token>,
    pub ids: Vec<usize>,
    pub stopped_by: StopReason,
}

impl GeneratedCaption {
    pub fn text(&self) -> String {
        crate::text::join_tokens(&self.tokens)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<F: PartialOrd + Copy>(values: impl IntoIterator<Item = F>) -> Option<usize> {
    let mut best: Option<(usize, F)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Generates up to `max_tokens` words for one image. Starting from an
/// all-`<unk>` prefix, each step writes the argmax token into the next prefix
/// slot; emitting `<unk>` ends the caption.
pub fn greedy_caption<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    image: &[F],
    max_tokens: usize,
) -> Result<GeneratedCaption> {
    let cfg = &params.config;
    if vocab.len() != cfg.vocab_size {
        return Err(Error::DimensionMismatch {
            what: "vocabulary size".into(),
            expected: cfg.vocab_size,
            actual: vocab.len(),
        });
    }
    if max_tokens > cfg.n {
        return Err(Error::InvalidArgument(format!(
            "cannot generate {max_tokens} tokens with a model of caption length {}",
            cfg.n
        )));
    }
    let mut prefix = vec![UNK_ID; cfg.n];
    let mut ids = Vec::with_capacity(max_tokens);
    for k in 0..max_tokens {
        let logits = forward(params, SequenceInput { image, prefix: &prefix })?;
        let next = argmax(logits.iter().copied()).expect("non-empty vocabulary");
        if next == UNK_ID {
            return Ok(finish(vocab, ids, StopReason::UnkEmitted));
        }
        prefix[k] = next;
        ids.push(next);
    }
    Ok(finish(vocab, ids, StopReason::LengthLimit))
}

fn finish(vocab: &Vocabulary, ids: Vec<usize>, stopped_by: StopReason) -> GeneratedCaption {
    let tokens = ids
        .iter()
        .map(|&id| vocab.token(id).expect("id below vocab size").clone())
        .collect();
    GeneratedCaption {
        tokens,
        ids,
        stopped_by,
    }
}

/// [`greedy_caption`] for a checkpoint of either precision, with a stored
/// `f32` image vector and the model's full caption length.
pub fn caption_image(params: &AnyParams, vocab: &Vocabulary, image: &[f32]) -> Result<GeneratedCaption> {
    match params {
        AnyParams::F32(p) => greedy_caption(p, vocab, image, p.config.n),
        AnyParams::F64(p) => {
            let image: Vec<f64> = image.iter().map(|&v| f64::from(v)).collect();
            greedy_caption(p, vocab, &image, p.config.n)
        }
    }
}

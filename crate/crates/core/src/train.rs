//! Backpropagation, finite-difference gradient checking, and SGD training.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};
use std::path::Path;
use std::time::Instant;

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array1, ArrayView1, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, EmbeddingTable, ExpandedSample};
use crate::error::{Error, Result};
use crate::model::checkpoint::{save_checkpoint, vocab_sidecar_path};
use crate::model::{
    forward_trace, init_params, softmax_cross_entropy, visit_order, ModelConfig, ModelParams,
    Precision, Scalar, SequenceInput,
};
use crate::text::Vocabulary;

/// Loss gradient with one tensor per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F>(pub ModelParams<F>);

impl<F> Deref for Gradients<F> {
    type Target = ModelParams<F>;

    fn deref(&self) -> &ModelParams<F> {
        &self.0
    }
}

impl<F> DerefMut for Gradients<F> {
    fn deref_mut(&mut self) -> &mut ModelParams<F> {
        &mut self.0
    }
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Ok(Gradients(ModelParams::zeros(config)?))
    }

    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for ((_, mut a), (_, b)) in self.0.named_tensors_mut().into_iter().zip(other.named_tensors()) {
            a.zip_mut_with(&b, |x, &y| *x += y);
        }
    }

    pub fn scale(&mut self, factor: F) {
        for (_, mut t) in self.0.named_tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> F {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(F::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }
}

/// `acc += column ⊗ row`
fn add_outer<F: Scalar>(acc: &mut ndarray::Array2<F>, column: ArrayView1<'_, F>, row: ArrayView1<'_, F>) {
    general_mat_mul(
        F::one(),
        &column.insert_axis(Axis(1)),
        &row.insert_axis(Axis(0)),
        F::one(),
        acc,
    );
}

/// Loss and exact gradients for one `(input, target)` sample.
pub fn backward<F: Scalar>(
    params: &ModelParams<F>,
    input: SequenceInput<'_, F>,
    target: usize,
) -> Result<(F, Gradients<F>)> {
    let cfg = params.config;
    let trace = forward_trace(params, input)?;
    let (loss, probs) = softmax_cross_entropy(trace.logits.view(), target)?;
    let mut grads = Gradients::zeros(cfg)?;

    let mut d_logits = probs;
    d_logits[target] -= F::one();
    add_outer(&mut grads.w_out, d_logits.view(), trace.h_last.view());
    grads.b_out.assign(&d_logits);

    let steps = cfg.steps();
    let h = cfg.hidden;
    // Gradient w.r.t. each step's output of the layer being processed.
    let mut d_out = vec![Array1::<F>::zeros(cfg.h_out()); steps];
    d_out[steps - 1] = params.w_out.t().dot(&d_logits);

    for layer in (0..cfg.layers).rev() {
        let xs = &trace.inputs[layer];
        let mut d_in = vec![Array1::<F>::zeros(cfg.layer_input_dim(layer)); steps];
        for (d, w) in params.lstm[layer].iter().enumerate() {
            let cells = &trace.cells[layer][d];
            let gw = &mut grads.lstm[layer][d];
            let mut dh_next = Array1::<F>::zeros(h);
            let mut dc_next = Array1::<F>::zeros(h);
            let order: Vec<usize> = visit_order(d, steps).collect();
            for &t in order.iter().rev() {
                let cell = &cells[t];
                let dh = &d_out[t].slice(s![d * h..(d + 1) * h]) + &dh_next;
                let d_o = &dh * &cell.tanh_c;
                let dc = &dc_next + &(&dh * &cell.o * &cell.tanh_c.mapv(|v| F::one() - v * v));
                let dz_i = &dc * &cell.g * &cell.i.mapv(|v| v * (F::one() - v));
                let dz_f = &dc * &cell.c_prev * &cell.f.mapv(|v| v * (F::one() - v));
                let dz_g = &dc * &cell.i * &cell.g.mapv(|v| F::one() - v * v);
                let dz_o = &d_o * &cell.o.mapv(|v| v * (F::one() - v));
                let dz = concatenate![Axis(0), dz_i, dz_f, dz_g, dz_o];
                dc_next = &dc * &cell.f;

                add_outer(&mut gw.w_x, dz.view(), xs[t].view());
                add_outer(&mut gw.w_h, dz.view(), cell.h_prev.view());
                gw.b += &dz;
                d_in[t] += &w.w_x.t().dot(&dz);
                dh_next = w.w_h.t().dot(&dz);
            }
        }
        d_out = d_in;
    }

    add_outer(&mut grads.w_img, d_out[0].view(), ArrayView1::from(input.image));
    grads.b_img.assign(&d_out[0]);
    for (t, &id) in input.prefix.iter().enumerate() {
        let mut row = grads.embed.row_mut(id);
        row += &d_out[t + 1];
    }
    Ok((loss, grads))
}

/// Plain SGD: `θ ← θ − lr·g`. Components with zero gradient are untouched.
pub fn sgd_step<F: Scalar>(params: &mut ModelParams<F>, grads: &Gradients<F>, learning_rate: F) {
    for ((_, mut p), (_, g)) in params.named_tensors_mut().into_iter().zip(grads.named_tensors()) {
        p.zip_mut_with(&g, |p, &g| {
            if g != F::zero() {
                *p -= learning_rate * g;
            }
        });
    }
}

/// Upper bound on components probed by [`grad_check`] before it samples.
pub const GRAD_CHECK_MAX_COMPONENTS: usize = 2_000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Tensor name and flat index of the worst component.
    pub worst: (String, usize),
    pub analytic_at_worst: f64,
    pub numerical_at_worst: f64,
    /// Number of components compared.
    pub checked: usize,
    /// Flat (canonical-order) indices compared when the model was too large
    /// to check every component; `None` when all were checked.
    pub sampled_indices: Option<Vec<usize>>,
}

/// Compares backpropagated gradients against central differences. Requires
/// `f64` parameters.
pub fn grad_check<F: Scalar>(
    params: &ModelParams<F>,
    input: SequenceInput<'_, F>,
    target: usize,
    eps: f64,
    sample_seed: u64,
) -> Result<GradCheckReport> {
    let (_, analytic) = backward(params, input, target)?;
    grad_check_against(params, input, target, &analytic, eps, sample_seed)
}

/// Like [`grad_check`], but against a caller-supplied analytic gradient.
pub fn grad_check_against<F: Scalar>(
    params: &ModelParams<F>,
    input: SequenceInput<'_, F>,
    target: usize,
    analytic: &Gradients<F>,
    eps: f64,
    sample_seed: u64,
) -> Result<GradCheckReport> {
    if F::PRECISION != Precision::F64 {
        return Err(Error::InvalidArgument(
            "gradient checking requires 64-bit precision".into(),
        ));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let logits_at = |p: &ModelParams<F>| -> Result<Vec<f64>> {
        Ok(crate::model::forward(p, input)?.iter().map(|v| v.to_f64_lossy()).collect())
    };

    // (tensor index, offset within tensor, global flat index)
    let mut components = Vec::new();
    for (ti, (_, t)) in params.named_tensors().iter().enumerate() {
        for k in 0..t.len() {
            components.push((ti, k, components.len()));
        }
    }
    let sampled_indices = (components.len() > GRAD_CHECK_MAX_COMPONENTS).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let mut picked = index::sample(&mut rng, components.len(), GRAD_CHECK_MAX_COMPONENTS).into_vec();
        picked.sort_unstable();
        picked
    });
    if let Some(picked) = &sampled_indices {
        components = picked.iter().map(|&i| components[i]).collect();
    }

    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let analytic_flat: Vec<Vec<f64>> = analytic
        .named_tensors()
        .iter()
        .map(|(_, t)| t.iter().map(|v| v.to_f64_lossy()).collect())
        .collect();

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (names[0].clone(), 0),
        analytic_at_worst: 0.0,
        numerical_at_worst: 0.0,
        checked: components.len(),
        sampled_indices,
    };
    let eps_f = F::lit(eps);
    for &(ti, k, _) in &components {
        let set = |p: &mut ModelParams<F>, v: F| {
            let mut tensors = p.named_tensors_mut();
            *tensors[ti].1.iter_mut().nth(k).expect("component") = v;
        };
        let original = *params.named_tensors()[ti].1.iter().nth(k).expect("component");
        set(&mut probe, original + eps_f);
        let plus = logits_at(&probe)?;
        set(&mut probe, original - eps_f);
        let minus = logits_at(&probe)?;
        set(&mut probe, original);

        let numerical = loss_difference(&plus, &minus, target) / (2.0 * eps);
        let a = analytic_flat[ti][k];
        let rel = (a - numerical).abs() / (a.abs() + numerical.abs()).max(1e-8);
        if rel > report.max_relative_error || !rel.is_finite() {
            report.max_relative_error = rel;
            report.worst = (names[ti].clone(), k);
            report.analytic_at_worst = a;
            report.numerical_at_worst = numerical;
        }
    }
    Ok(report)
}

/// `L(plus) − L(minus)` for cross-entropy losses at two logit vectors,
/// evaluated without subtracting two nearly equal losses:
/// `ln Σ_j q_j·exp(plus_j − minus_j) − (plus_t − minus_t)` with
/// `q = softmax(minus)`, written with `ln_1p`/`exp_m1`.
pub fn loss_difference(plus: &[f64], minus: &[f64], target: usize) -> f64 {
    let max = minus.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = minus.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let ratio_m1: f64 = weights
        .iter()
        .zip(plus.iter().zip(minus))
        .map(|(w, (p, m))| w / total * (p - m).exp_m1())
        .sum();
    ratio_m1.ln_1p() - (plus[target] - minus[target])
}

/// A seeded model and training sample for gradient checking.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckCase {
    pub params: ModelParams<f64>,
    pub image: Vec<f64>,
    pub prefix: Vec<usize>,
    pub target: usize,
}

impl GradCheckCase {
    /// Initializes parameters from `seed` and draws an image in `[-1, 1]`, a
    /// partially filled prefix and a target from the same generator.
    pub fn random(config: ModelConfig, seed: u64) -> Result<GradCheckCase> {
        let params = init_params::<f64>(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let image = (0..config.d_img).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let filled = rng.random_range(0..=config.n);
        let prefix = (0..config.n)
            .map(|k| {
                if k < filled && config.vocab_size > 1 {
                    rng.random_range(1..config.vocab_size)
                } else {
                    crate::text::UNK_ID
                }
            })
            .collect();
        let target = rng.random_range(0..config.vocab_size);
        Ok(GradCheckCase {
            params,
            image,
            prefix,
            target,
        })
    }

    pub fn input(&self) -> SequenceInput<'_, f64> {
        SequenceInput {
            image: &self.image,
            prefix: &self.prefix,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    /// Seed for parameter initialization.
    pub init_seed: u64,
    /// Report progress every this many epochs; 0 disables progress output.
    pub log_every: usize,
    /// Rescale each batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 50,
            batch_size: 16,
            shuffle_seed: 0,
            init_seed: 0,
            log_every: 1,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// One line of the training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub samples: usize,
    /// Wall-clock time; kept out of the serialized report so reruns compare equal.
    #[serde(skip)]
    pub seconds: f64,
}

/// Converts image vectors to the model's precision once, keyed by id.
pub fn images_as<F: Scalar>(table: &EmbeddingTable) -> HashMap<String, Vec<F>> {
    table
        .iter()
        .map(|e| {
            let v = e.vector.iter().map(|&x| F::from_f32(x).expect("f32 to float")).collect();
            (e.image_id.clone(), v)
        })
        .collect()
}

/// Runs the epoch loop in place. Batches are drawn from a per-run shuffle;
/// per-sample gradients are computed in parallel and summed in sample order.
pub fn train_samples<F: Scalar>(
    params: &mut ModelParams<F>,
    samples: &[ExpandedSample],
    images: &HashMap<String, Vec<F>>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    for s in samples {
        if !images.contains_key(&s.image_id) {
            return Err(Error::MissingEmbedding(s.image_id.clone()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let lr = F::lit(config.learning_rate);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<Result<(F, Gradients<F>)>> = batch
                .par_iter()
                .map(|&i| {
                    let s = &samples[i];
                    let input = SequenceInput {
                        image: &images[&s.image_id],
                        prefix: &s.prefix,
                    };
                    backward(params, input, s.target)
                })
                .collect();
            let mut total = Gradients::zeros(params.config)?;
            for r in results {
                let (loss, g) = r?;
                loss_sum += loss.to_f64_lossy();
                total.add_assign(&g);
            }
            total.scale(F::one() / F::lit(batch.len() as f64));
            if let Some(max_norm) = config.clip_norm {
                let norm = total.global_norm();
                let max_norm = F::lit(max_norm);
                if norm > max_norm {
                    total.scale(max_norm / norm);
                }
            }
            sgd_step(params, &total, lr);
        }
        let record = EpochRecord {
            epoch,
            mean_loss: if samples.is_empty() { 0.0 } else { loss_sum / samples.len() as f64 },
            samples: samples.len(),
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    pub samples_per_epoch: usize,
    pub pairs: usize,
    pub model: ModelConfig,
    pub vocab: Vocabulary,
}

impl TrainingReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    /// One JSON object per epoch, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("serialize epoch") + "\n")
            .collect()
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// File locations for [`train`].
#[derive(Clone, Copy, Debug)]
pub struct TrainPaths<'a> {
    pub captions: &'a Path,
    pub embeddings: &'a Path,
    pub checkpoint_out: &'a Path,
}

/// Trains from a caption TSV and a CEMB file and writes the checkpoint plus
/// its vocabulary sidecar. `model.d_img` and `model.vocab_size` are replaced
/// by the values found in the data.
pub fn train(
    paths: TrainPaths<'_>,
    mut model: ModelConfig,
    config: &TrainConfig,
    min_count: usize,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainingReport> {
    config.validate()?;
    let raw = data::load_captions(paths.captions)?;
    let embeddings = data::load_embeddings(paths.embeddings)?;
    for r in &raw {
        embeddings.vector(&r.image_id)?;
    }
    let (vocab, records) = data::prepare_corpus(&raw, None, min_count, model.n)?;
    model.d_img = embeddings.dim();
    model.vocab_size = vocab.len();
    model.validate()?;
    let samples = data::expand_all(&records, model.n)?;

    let epochs = match model.precision {
        Precision::F32 => run_typed::<f32>(model, config, &samples, &embeddings, paths.checkpoint_out, on_epoch)?,
        Precision::F64 => run_typed::<f64>(model, config, &samples, &embeddings, paths.checkpoint_out, on_epoch)?,
    };
    vocab.save(vocab_sidecar_path(paths.checkpoint_out))?;
    Ok(TrainingReport {
        epochs,
        samples_per_epoch: samples.len(),
        pairs: records.len(),
        model,
        vocab,
    })
}

fn run_typed<F: Scalar>(
    model: ModelConfig,
    config: &TrainConfig,
    samples: &[ExpandedSample],
    embeddings: &EmbeddingTable,
    checkpoint_out: &Path,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    let mut params = init_params::<F>(model, config.init_seed)?;
    let images = images_as::<F>(embeddings);
    let history = train_samples(&mut params, samples, &images, config, on_epoch)?;
    save_checkpoint(&params, checkpoint_out)?;
    Ok(history)
}

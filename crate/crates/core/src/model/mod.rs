//! The captioning network.
//!
//! The image vector is projected to the word-embedding width and placed in
//! front of the `n` embedded prefix tokens, giving an `n + 1` step sequence.
//! Two stacked LSTM layers (bidirectional by default) run over that sequence
//! and the top layer's output at the last step is mapped to vocabulary logits.
//!
//! LSTM gate blocks are stacked in the order input, forget, cell candidate,
//! output (`i, f, g, o`) in every weight matrix and bias vector.

pub mod checkpoint;

use std::fmt::{Debug, Display};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point width used for parameters and arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bits(self) -> u8 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Precision> {
        match bits {
            32 => Some(Precision::F32),
            64 => Some(Precision::F64),
            _ => None,
        }
    }
}

/// Element type of a model: `f32` or `f64`.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + LinalgScalar + ScalarOperand + Default + Debug + Display + Send + Sync
{
    const PRECISION: Precision;

    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("finite literal")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float to f64")
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;
}

pub const NUM_LAYERS: usize = 2;
pub const INIT_RANGE: f64 = 0.08;
pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_img: usize,
    pub d_embed: usize,
    /// LSTM hidden size per direction.
    pub hidden: usize,
    pub layers: usize,
    pub bidirectional: bool,
    pub vocab_size: usize,
    /// Maximum caption length; the LSTM sees `n + 1` steps.
    pub n: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_img: 4096,
            d_embed: 512,
            hidden: 256,
            layers: NUM_LAYERS,
            bidirectional: true,
            vocab_size: 1,
            n: 10,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_img", self.d_img),
            ("d_embed", self.d_embed),
            ("hidden", self.hidden),
            ("vocab_size", self.vocab_size),
            ("n", self.n),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.layers != NUM_LAYERS {
            return Err(Error::Config(format!(
                "layers must be {NUM_LAYERS}, got {}",
                self.layers
            )));
        }
        Ok(())
    }

    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    /// Width of a layer's per-step output (directions concatenated).
    pub fn h_out(&self) -> usize {
        self.hidden * self.directions()
    }

    pub fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.d_embed
        } else {
            self.h_out()
        }
    }

    pub fn steps(&self) -> usize {
        self.n + 1
    }
}

/// Weights of one LSTM direction: `w_x` is `4h × input`, `w_h` is `4h × h`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmWeights<F> {
    pub w_x: Array2<F>,
    pub w_h: Array2<F>,
    pub b: Array1<F>,
}

impl<F: Scalar> LstmWeights<F> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmWeights {
            w_x: Array2::zeros((4 * hidden, input)),
            w_h: Array2::zeros((4 * hidden, hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.ncols()
    }
}

/// Every trainable tensor of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    /// Word embeddings, `V × d_embed`.
    pub embed: Array2<F>,
    /// Image projection, `d_embed × d_img`.
    pub w_img: Array2<F>,
    pub b_img: Array1<F>,
    /// Indexed `[layer][direction]`, direction 0 running left to right.
    pub lstm: Vec<Vec<LstmWeights<F>>>,
    /// Output map, `V × h_out`.
    pub w_out: Array2<F>,
    pub b_out: Array1<F>,
}

impl<F: Scalar> ModelParams<F> {
    /// All-zero parameters shaped for `config`.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.precision != F::PRECISION {
            return Err(Error::Config(format!(
                "config asks for {:?} but parameters are {:?}",
                config.precision,
                F::PRECISION
            )));
        }
        let lstm = (0..config.layers)
            .map(|l| {
                (0..config.directions())
                    .map(|_| LstmWeights::zeros(config.layer_input_dim(l), config.hidden))
                    .collect()
            })
            .collect();
        Ok(ModelParams {
            config,
            embed: Array2::zeros((config.vocab_size, config.d_embed)),
            w_img: Array2::zeros((config.d_embed, config.d_img)),
            b_img: Array1::zeros(config.d_embed),
            lstm,
            w_out: Array2::zeros((config.vocab_size, config.h_out())),
            b_out: Array1::zeros(config.vocab_size),
        })
    }

    /// Tensors in canonical checkpoint order, with their checkpoint names.
    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = vec![
            ("E".to_string(), self.embed.view().into_dyn()),
            ("W_img".to_string(), self.w_img.view().into_dyn()),
            ("b_img".to_string(), self.b_img.view().into_dyn()),
        ];
        for (l, dirs) in self.lstm.iter().enumerate() {
            for (d, w) in dirs.iter().enumerate() {
                let prefix = lstm_prefix(l, d);
                out.push((format!("{prefix}.W_x"), w.w_x.view().into_dyn()));
                out.push((format!("{prefix}.W_h"), w.w_h.view().into_dyn()));
                out.push((format!("{prefix}.b"), w.b.view().into_dyn()));
            }
        }
        out.push(("W_out".to_string(), self.w_out.view().into_dyn()));
        out.push(("b_out".to_string(), self.b_out.view().into_dyn()));
        out
    }

    /// Mutable counterpart of [`named_tensors`](Self::named_tensors), same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = vec![
            ("E".to_string(), self.embed.view_mut().into_dyn()),
            ("W_img".to_string(), self.w_img.view_mut().into_dyn()),
            ("b_img".to_string(), self.b_img.view_mut().into_dyn()),
        ];
        for (l, dirs) in self.lstm.iter_mut().enumerate() {
            for (d, w) in dirs.iter_mut().enumerate() {
                let prefix = lstm_prefix(l, d);
                out.push((format!("{prefix}.W_x"), w.w_x.view_mut().into_dyn()));
                out.push((format!("{prefix}.W_h"), w.w_h.view_mut().into_dyn()));
                out.push((format!("{prefix}.b"), w.b.view_mut().into_dyn()));
            }
        }
        out.push(("W_out".to_string(), self.w_out.view_mut().into_dyn()));
        out.push(("b_out".to_string(), self.b_out.view_mut().into_dyn()));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Flattened copy of every component, in canonical order.
    pub fn to_flat(&self) -> Vec<F> {
        self.named_tensors()
            .into_iter()
            .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

fn lstm_prefix(layer: usize, direction: usize) -> String {
    format!("lstm{}.{}", layer + 1, if direction == 0 { "fwd" } else { "bwd" })
}

/// Seeded initialization: weights uniform on `[-0.08, 0.08]`, biases zero,
/// LSTM forget-gate biases one.
pub fn init_params<F: Scalar>(config: ModelConfig, seed: u64) -> Result<ModelParams<F>> {
    let mut params = ModelParams::<F>::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |a: &mut Array2<F>| {
        a.mapv_inplace(|_| F::lit(rng.random_range(-INIT_RANGE..=INIT_RANGE)));
    };
    fill(&mut params.embed);
    fill(&mut params.w_img);
    for dirs in params.lstm.iter_mut() {
        for w in dirs.iter_mut() {
            fill(&mut w.w_x);
            fill(&mut w.w_h);
            let h = w.hidden();
            w.b.slice_mut(s![h..2 * h]).fill(F::lit(FORGET_BIAS_INIT));
        }
    }
    fill(&mut params.w_out);
    Ok(params)
}

/// The two network inputs: an image vector and `n` prefix token ids.
#[derive(Clone, Copy, Debug)]
pub struct SequenceInput<'a, F> {
    pub image: &'a [F],
    pub prefix: &'a [usize],
}

/// Builds the `n + 1` step input sequence: the projected image, then one
/// embedding row per prefix id.
pub fn embed_sequence<F: Scalar>(
    params: &ModelParams<F>,
    input: SequenceInput<'_, F>,
) -> Result<Vec<Array1<F>>> {
    let cfg = &params.config;
    if input.image.len() != cfg.d_img {
        return Err(Error::DimensionMismatch {
            what: "image vector".into(),
            expected: cfg.d_img,
            actual: input.image.len(),
        });
    }
    if input.prefix.len() != cfg.n {
        return Err(Error::DimensionMismatch {
            what: "prefix".into(),
            expected: cfg.n,
            actual: input.prefix.len(),
        });
    }
    let mut seq = Vec::with_capacity(cfg.steps());
    seq.push(params.w_img.dot(&ArrayView1::from(input.image)) + &params.b_img);
    for &id in input.prefix {
        if id >= cfg.vocab_size {
            return Err(Error::IdOutOfRange {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        seq.push(params.embed.row(id).to_owned());
    }
    Ok(seq)
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Intermediate values of one LSTM step, kept for backpropagation.
#[derive(Clone, Debug)]
pub(crate) struct CellCache<F> {
    pub h_prev: Array1<F>,
    pub c_prev: Array1<F>,
    pub i: Array1<F>,
    pub f: Array1<F>,
    pub g: Array1<F>,
    pub o: Array1<F>,
    pub tanh_c: Array1<F>,
    pub h: Array1<F>,
    pub c: Array1<F>,
}

pub(crate) fn lstm_step<F: Scalar>(
    x: ArrayView1<'_, F>,
    h_prev: &Array1<F>,
    c_prev: &Array1<F>,
    w: &LstmWeights<F>,
) -> CellCache<F> {
    let h = w.hidden();
    let z = w.w_x.dot(&x) + w.w_h.dot(h_prev) + &w.b;
    let i = z.slice(s![..h]).mapv(sigmoid);
    let f = z.slice(s![h..2 * h]).mapv(sigmoid);
    let g = z.slice(s![2 * h..3 * h]).mapv(F::tanh);
    let o = z.slice(s![3 * h..]).mapv(sigmoid);
    let c = &f * c_prev + &i * &g;
    let tanh_c = c.mapv(F::tanh);
    let h_t = &o * &tanh_c;
    CellCache {
        h_prev: h_prev.clone(),
        c_prev: c_prev.clone(),
        i,
        f,
        g,
        o,
        tanh_c,
        h: h_t,
        c,
    }
}

/// One LSTM step: returns `(h_t, c_t)`.
pub fn lstm_cell<F: Scalar>(
    x: ArrayView1<'_, F>,
    h_prev: &Array1<F>,
    c_prev: &Array1<F>,
    weights: &LstmWeights<F>,
) -> (Array1<F>, Array1<F>) {
    let cache = lstm_step(x, h_prev, c_prev, weights);
    (cache.h, cache.c)
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub(crate) struct Trace<F> {
    /// Input sequence of each layer; `inputs[0]` is the embedded sequence.
    pub inputs: Vec<Vec<Array1<F>>>,
    /// `cells[layer][direction][t]`, indexed by time step, not visit order.
    pub cells: Vec<Vec<Vec<CellCache<F>>>>,
    /// Top-layer output at the last step.
    pub h_last: Array1<F>,
    pub logits: Array1<F>,
}

/// Time steps in the order a direction visits them.
pub(crate) fn visit_order(direction: usize, steps: usize) -> Box<dyn Iterator<Item = usize>> {
    if direction == 0 {
        Box::new(0..steps)
    } else {
        Box::new((0..steps).rev())
    }
}

pub(crate) fn forward_trace<F: Scalar>(
    params: &ModelParams<F>,
    input: SequenceInput<'_, F>,
) -> Result<Trace<F>> {
    let cfg = &params.config;
    let steps = cfg.steps();
    let hidden = cfg.hidden;
    let mut inputs = vec![embed_sequence(params, input)?];
    let mut cells = Vec::with_capacity(cfg.layers);
    for layer in &params.lstm {
        let xs = inputs.last().expect("layer input");
        let mut layer_cells = Vec::with_capacity(layer.len());
        for (d, w) in layer.iter().enumerate() {
            let mut dir_cells: Vec<Option<CellCache<F>>> = vec![None; steps];
            let mut h = Array1::zeros(hidden);
            let mut c = Array1::zeros(hidden);
            for t in visit_order(d, steps) {
                let cache = lstm_step(xs[t].view(), &h, &c, w);
                h = cache.h.clone();
                c = cache.c.clone();
                dir_cells[t] = Some(cache);
            }
            layer_cells.push(dir_cells.into_iter().map(Option::unwrap).collect::<Vec<_>>());
        }
        let outputs = (0..steps)
            .map(|t| concat_directions(layer_cells.iter().map(|dir: &Vec<CellCache<F>>| &dir[t].h)))
            .collect();
        cells.push(layer_cells);
        inputs.push(outputs);
    }
    let h_last = inputs.pop().expect("top output").pop().expect("last step");
    let logits = params.w_out.dot(&h_last) + &params.b_out;
    Ok(Trace {
        inputs,
        cells,
        h_last,
        logits,
    })
}

fn concat_directions<'a, F: Scalar>(parts: impl Iterator<Item = &'a Array1<F>>) -> Array1<F> {
    parts.flat_map(|p| p.iter().copied()).collect()
}

/// Next-token logits for one input.
pub fn forward<F: Scalar>(params: &ModelParams<F>, input: SequenceInput<'_, F>) -> Result<Array1<F>> {
    Ok(forward_trace(params, input)?.logits)
}

/// Max-shifted softmax and the negative log-probability of `target`.
pub fn softmax_cross_entropy<F: Scalar>(logits: ArrayView1<'_, F>, target: usize) -> Result<(F, Array1<F>)> {
    if target >= logits.len() {
        return Err(Error::IdOutOfRange {
            id: target,
            vocab_size: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let shifted = logits.mapv(|l| l - max);
    let exps = shifted.mapv(F::exp);
    let sum = exps.sum();
    let probs = exps / sum;
    // -ln p_t = ln Σ exp(l - max) - (l_t - max)
    let loss = (sum.ln() - shifted[target]).max(F::zero());
    Ok((loss, probs))
}

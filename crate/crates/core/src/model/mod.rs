//! The three-branch backchannel predictor.
//!
//! Lexical grid and acoustic frames each go through a bank of full-height
//! convolutions (ReLU, max pooling over time); the listener id selects an
//! embedding row that passes through a small ReLU stack. The three vectors
//! are concatenated in that order, dropped out, and mapped to three logits.

pub mod checkpoint;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::BcCategory;
use crate::dsp::{frame_count, FeatureKind, FrameSpec};
use crate::nn::{
    conv_full_height, conv_full_height_backward, dense_backward, dense_pre_activation, dropout_mask,
    fan_balanced_uniform, max_pool_time_argmax, relu, softmax_xent, Activation, DenseLayer, Differentiable, Mode,
    NnError, Scalar, Tensor,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("listener id {id} out of range (registry holds {count} listeners plus UNK)")]
    ListenerOutOfRange { id: usize, count: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LexicalConfig {
    pub n_words: usize,
    pub word_dim: usize,
    pub filter_widths: Vec<usize>,
    pub filters_per_width: usize,
    pub pool: usize,
}

impl Default for LexicalConfig {
    fn default() -> Self {
        Self { n_words: 5, word_dim: 300, filter_widths: vec![3, 4, 5], filters_per_width: 16, pool: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcousticConfig {
    pub window_ms: u64,
    pub frame: FrameSpec,
    pub feature_kind: FeatureKind,
    pub filter_widths: Vec<usize>,
    pub filters_per_width: usize,
    pub pool: usize,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        Self {
            window_ms: 1500,
            frame: FrameSpec::default(),
            feature_kind: FeatureKind::Mfcc13,
            filter_widths: vec![11, 12],
            filters_per_width: 16,
            pool: 18,
        }
    }
}

impl AcousticConfig {
    pub fn frames(&self) -> Result<usize> {
        frame_count(self.window_ms, &self.frame).map_err(|e| ModelError::InvalidConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ListenerConfig {
    /// Number of known listeners; the embedding has one extra UNK row.
    pub count: usize,
    pub embed_dim: usize,
    pub ffn_dims: Vec<usize>,
}

impl Default for ListenerConfig {
    fn default() -> Self {
        Self { count: 0, embed_dim: 5, ffn_dims: vec![16, 16] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lexical: LexicalConfig,
    pub acoustic: AcousticConfig,
    pub listener: ListenerConfig,
    pub dropout: f64,
    pub use_lexical: bool,
    pub use_acoustic: bool,
    pub use_listener: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lexical: LexicalConfig::default(),
            acoustic: AcousticConfig::default(),
            listener: ListenerConfig::default(),
            dropout: 0.5,
            use_lexical: true,
            use_acoustic: true,
            use_listener: true,
        }
    }
}

fn pooled_width(len: usize, widths: &[usize], filters: usize, pool: usize) -> usize {
    widths.iter().map(|&w| filters * (len + 1 - w).div_ceil(pool)).sum()
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if !self.use_lexical && !self.use_acoustic {
            return bad("at least one of the lexical and acoustic branches must be enabled".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.use_lexical {
            let l = &self.lexical;
            if l.n_words == 0 || l.word_dim == 0 || l.filters_per_width == 0 || l.pool == 0 || l.filter_widths.is_empty() {
                return bad("lexical sizes must be positive and widths non-empty".into());
            }
            if let Some(&w) = l.filter_widths.iter().find(|&&w| w == 0 || w > l.n_words) {
                return Err(NnError::FilterWiderThanInput { width: w, len: l.n_words }.into());
            }
        }
        if self.use_acoustic {
            let a = &self.acoustic;
            let frames = a.frames()?;
            if a.filters_per_width == 0 || a.pool == 0 || a.filter_widths.is_empty() {
                return bad("acoustic sizes must be positive and widths non-empty".into());
            }
            if let Some(&w) = a.filter_widths.iter().find(|&&w| w == 0 || w > frames) {
                return Err(NnError::FilterWiderThanInput { width: w, len: frames }.into());
            }
        }
        if self.use_listener {
            if self.listener.embed_dim == 0 {
                return bad("listener embed_dim must be at least 1".into());
            }
            if self.listener.ffn_dims.is_empty() || self.listener.ffn_dims.contains(&0) {
                return bad("listener ffn_dims must be non-empty and positive".into());
            }
        }
        Ok(())
    }

    pub fn lexical_width(&self) -> usize {
        if !self.use_lexical {
            return 0;
        }
        let l = &self.lexical;
        pooled_width(l.n_words, &l.filter_widths, l.filters_per_width, l.pool)
    }

    pub fn acoustic_width(&self) -> Result<usize> {
        if !self.use_acoustic {
            return Ok(0);
        }
        let a = &self.acoustic;
        Ok(pooled_width(a.frames()?, &a.filter_widths, a.filters_per_width, a.pool))
    }

    pub fn listener_width(&self) -> usize {
        if self.use_listener {
            *self.listener.ffn_dims.last().unwrap_or(&0)
        } else {
            0
        }
    }

    pub fn concat_width(&self) -> Result<usize> {
        Ok(self.lexical_width() + self.acoustic_width()? + self.listener_width())
    }
}

/// Filters of one width: weight shape `[filters, width, height]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBank<T> {
    pub width: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvBank<T> {
    fn filters(&self) -> usize {
        self.weight.shape()[0]
    }

    fn filter(&self, k: usize) -> &[T] {
        let span = self.weight.len() / self.filters();
        &self.weight.data()[k * span..(k + 1) * span]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBranch<T> {
    /// Rows of the input (time steps / words).
    pub len: usize,
    /// Columns of the input (feature / embedding dimension).
    pub height: usize,
    pub pool: usize,
    pub banks: Vec<ConvBank<T>>,
}

#[derive(Debug, Clone, Default)]
struct BranchTrace<T> {
    /// Conv outputs before ReLU, one vector per (bank, filter).
    pre: Vec<Vec<T>>,
    argmax: Vec<Vec<usize>>,
}

impl<T: Scalar> ConvBranch<T> {
    fn init<R: Rng>(len: usize, height: usize, widths: &[usize], filters: usize, pool: usize, rng: &mut R) -> Self {
        let banks = widths
            .iter()
            .map(|&w| ConvBank {
                width: w,
                weight: fan_balanced_uniform(&[filters, w, height], w * height, filters * w * height, rng),
                bias: Tensor::zeros(&[filters]),
            })
            .collect();
        Self { len, height, pool, banks }
    }

    fn zeros_like(&self) -> Self {
        Self {
            len: self.len,
            height: self.height,
            pool: self.pool,
            banks: self
                .banks
                .iter()
                .map(|b| ConvBank { width: b.width, weight: b.weight.zeros_like(), bias: b.bias.zeros_like() })
                .collect(),
        }
    }

    pub fn output_width(&self) -> usize {
        self.banks.iter().map(|b| b.filters() * (self.len + 1 - b.width).div_ceil(self.pool)).sum()
    }

    fn forward(&self, input: &[T], out: &mut Vec<T>) -> Result<BranchTrace<T>> {
        if input.len() != self.len * self.height {
            return Err(ModelError::ShapeMismatch(format!(
                "branch expects {}×{} input, got {} values",
                self.len,
                self.height,
                input.len()
            )));
        }
        let mut trace = BranchTrace::default();
        for bank in &self.banks {
            for k in 0..bank.filters() {
                let pre = conv_full_height(input, self.height, bank.filter(k), bank.bias.data()[k])?;
                let act: Vec<T> = pre.iter().map(|&v| relu(v)).collect();
                let argmax = max_pool_time_argmax(&act, self.pool);
                out.extend(argmax.iter().map(|&i| act[i]));
                trace.pre.push(pre);
                trace.argmax.push(argmax);
            }
        }
        Ok(trace)
    }

    fn backward(
        &self,
        input: &[T],
        trace: &BranchTrace<T>,
        d_out: &[T],
        grad: &mut ConvBranch<T>,
        mut d_input: Option<&mut [T]>,
    ) {
        let mut offset = 0;
        let mut slot = 0;
        for (bank, gbank) in self.banks.iter().zip(grad.banks.iter_mut()) {
            let span = bank.width * self.height;
            for k in 0..bank.filters() {
                let pre = &trace.pre[slot];
                let argmax = &trace.argmax[slot];
                let mut d_pre = vec![T::zero(); pre.len()];
                for (j, &i) in argmax.iter().enumerate() {
                    if pre[i] > T::zero() {
                        d_pre[i] = d_pre[i] + d_out[offset + j];
                    }
                }
                offset += argmax.len();
                slot += 1;
                let d_filter = &mut gbank.weight.data_mut()[k * span..(k + 1) * span];
                let mut d_bias = gbank.bias.data()[k];
                conv_full_height_backward(input, self.height, bank.filter(k), &d_pre, d_filter, &mut d_bias, d_input.as_deref_mut());
                gbank.bias.data_mut()[k] = d_bias;
            }
        }
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for b in &self.banks {
            out.push((format!("{prefix}.w{}.weight", b.width), &b.weight));
            out.push((format!("{prefix}.w{}.bias", b.width), &b.bias));
        }
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        for b in &mut self.banks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ListenerBranch<T> {
    /// `(count + 1) × embed_dim`; the last row is UNK.
    pub embedding: Tensor<T>,
    pub layers: Vec<DenseLayer<T>>,
}

#[derive(Debug, Clone, Default)]
struct ListenerTrace<T> {
    inputs: Vec<Vec<T>>,
    pres: Vec<Vec<T>>,
}

impl<T: Scalar> ListenerBranch<T> {
    fn init<R: Rng>(cfg: &ListenerConfig, rng: &mut R) -> Self {
        let e = cfg.embed_dim;
        let embedding = fan_balanced_uniform(&[cfg.count + 1, e], e, e, rng);
        let mut layers = Vec::new();
        let mut input = e;
        for &out in &cfg.ffn_dims {
            layers.push(DenseLayer {
                weight: fan_balanced_uniform(&[out, input], input, out, rng),
                bias: Tensor::zeros(&[out]),
                activation: Activation::ReLU,
            });
            input = out;
        }
        Self { embedding, layers }
    }

    fn rows(&self) -> usize {
        self.embedding.shape()[0]
    }

    fn embed_dim(&self) -> usize {
        self.embedding.shape()[1]
    }

    fn forward(&self, id: usize, masks: Option<&[Vec<T>]>, out: &mut Vec<T>) -> Result<ListenerTrace<T>> {
        if id >= self.rows() {
            return Err(ModelError::ListenerOutOfRange { id, count: self.rows() - 1 });
        }
        let e = self.embed_dim();
        let mut x = self.embedding.data()[id * e..(id + 1) * e].to_vec();
        let mut trace = ListenerTrace::default();
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = dense_pre_activation(&x, layer)?;
            let mut h: Vec<T> = pre.iter().map(|&v| relu(v)).collect();
            if i + 1 < self.layers.len() {
                if let Some(m) = masks {
                    h.iter_mut().zip(&m[i]).for_each(|(v, &k)| *v = *v * k);
                }
            }
            trace.inputs.push(std::mem::replace(&mut x, h));
            trace.pres.push(pre);
        }
        out.extend_from_slice(&x);
        Ok(trace)
    }

    fn backward(&self, id: usize, trace: &ListenerTrace<T>, masks: Option<&[Vec<T>]>, d_out: &[T], grad: &mut ListenerBranch<T>) {
        let mut d = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let d_x = dense_backward(&trace.inputs[i], &trace.pres[i], &d, &self.layers[i], &mut grad.layers[i]);
            d = match (i, masks) {
                (0, _) => d_x,
                (_, Some(m)) => d_x.iter().zip(&m[i - 1]).map(|(&g, &k)| g * k).collect(),
                (_, None) => d_x,
            };
        }
        let e = self.embed_dim();
        let row = &mut grad.embedding.data_mut()[id * e..(id + 1) * e];
        row.iter_mut().zip(&d).for_each(|(g, &v)| *g = *g + v);
    }
}

/// Dropout multipliers for one sample, drawn up front so a forward pass can
/// be replayed exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks<T> {
    pub listener: Vec<Vec<T>>,
    pub concat: Vec<T>,
}

/// Borrowed model input. Slices are row-major matrices.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a, T> {
    /// `n_words × word_dim`
    pub grid: &'a [T],
    /// `frames × feature_dim`
    pub acoustic: &'a [T],
    pub listener: usize,
}

#[derive(Debug, Clone)]
pub struct Trace<T> {
    lexical: Option<BranchTrace<T>>,
    acoustic: Option<BranchTrace<T>>,
    listener: Option<ListenerTrace<T>>,
    dropped: Vec<T>,
    pub logits: Vec<T>,
    pub probs: Vec<T>,
}

/// Gradients w.r.t. the model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrads<T> {
    pub grid: Vec<T>,
    pub acoustic: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub lexical: Option<ConvBranch<T>>,
    pub acoustic: Option<ConvBranch<T>>,
    pub listener: Option<ListenerBranch<T>>,
    pub output: DenseLayer<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let lexical = config.use_lexical.then(|| {
            let l = &config.lexical;
            ConvBranch::init(l.n_words, l.word_dim, &l.filter_widths, l.filters_per_width, l.pool, rng)
        });
        let acoustic = if config.use_acoustic {
            let a = &config.acoustic;
            Some(ConvBranch::init(a.frames()?, a.feature_kind.dim(), &a.filter_widths, a.filters_per_width, a.pool, rng))
        } else {
            None
        };
        let listener = config.use_listener.then(|| ListenerBranch::init(&config.listener, rng));
        let width = config.concat_width()?;
        let output = DenseLayer {
            weight: fan_balanced_uniform(&[NUM_CLASSES, width], width, NUM_CLASSES, rng),
            bias: Tensor::zeros(&[NUM_CLASSES]),
            activation: Activation::Identity,
        };
        Ok(Self { config: config.clone(), lexical, acoustic, listener, output })
    }

    /// Same structure, every tensor zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            lexical: self.lexical.as_ref().map(ConvBranch::zeros_like),
            acoustic: self.acoustic.as_ref().map(ConvBranch::zeros_like),
            listener: self.listener.as_ref().map(|l| ListenerBranch {
                embedding: l.embedding.zeros_like(),
                layers: l.layers.iter().map(|d| DenseLayer::zeros(d.input_dim(), d.output_dim(), d.activation)).collect(),
            }),
            output: DenseLayer::zeros(self.output.input_dim(), NUM_CLASSES, Activation::Identity),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |b: &ConvBranch<T>| ConvBranch {
            len: b.len,
            height: b.height,
            pool: b.pool,
            banks: b
                .banks
                .iter()
                .map(|k| ConvBank { width: k.width, weight: k.weight.cast(), bias: k.bias.cast() })
                .collect(),
        };
        let dense = |d: &DenseLayer<T>| DenseLayer { weight: d.weight.cast(), bias: d.bias.cast(), activation: d.activation };
        Model {
            config: self.config.clone(),
            lexical: self.lexical.as_ref().map(conv),
            acoustic: self.acoustic.as_ref().map(conv),
            listener: self.listener.as_ref().map(|l| ListenerBranch {
                embedding: l.embedding.cast(),
                layers: l.layers.iter().map(dense).collect(),
            }),
            output: dense(&self.output),
        }
    }

    /// Named parameter tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(b) = &self.lexical {
            b.tensors("lexical", &mut out);
        }
        if let Some(b) = &self.acoustic {
            b.tensors("acoustic", &mut out);
        }
        if let Some(l) = &self.listener {
            out.push(("listener.embedding".into(), &l.embedding));
            for (i, d) in l.layers.iter().enumerate() {
                out.push((format!("listener.ffn{i}.weight"), &d.weight));
                out.push((format!("listener.ffn{i}.bias"), &d.bias));
            }
        }
        out.push(("output.weight".into(), &self.output.weight));
        out.push(("output.bias".into(), &self.output.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        if let Some(b) = &mut self.lexical {
            b.tensors_mut(&mut out);
        }
        if let Some(b) = &mut self.acoustic {
            b.tensors_mut(&mut out);
        }
        if let Some(l) = &mut self.listener {
            out.push(&mut l.embedding);
            for d in &mut l.layers {
                out.push(&mut d.weight);
                out.push(&mut d.bias);
            }
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Model<T>) {
        let theirs: Vec<&Tensor<T>> = other.tensors().into_iter().map(|(_, t)| t).collect();
        for (mine, t) in self.tensors_mut().into_iter().zip(theirs) {
            mine.add_assign(t);
        }
    }

    pub fn scale(&mut self, s: T) {
        self.tensors_mut().into_iter().for_each(|t| t.scale(s));
    }

    /// Samples the dropout masks a training-mode forward pass will use.
    pub fn sample_masks<R: Rng>(&self, rng: &mut R) -> DropoutMasks<T> {
        let rate = self.config.dropout;
        let listener = match &self.listener {
            Some(l) => l.layers[..l.layers.len() - 1]
                .iter()
                .map(|d| dropout_mask(d.output_dim(), rate, rng))
                .collect(),
            None => Vec::new(),
        };
        let concat = dropout_mask(self.output.input_dim(), rate, rng);
        DropoutMasks { listener, concat }
    }

    /// Forward pass keeping everything backprop needs. `masks = None` is eval mode.
    pub fn forward_trace(&self, ex: &Example<T>, masks: Option<&DropoutMasks<T>>) -> Result<Trace<T>> {
        let mut concat = Vec::with_capacity(self.output.input_dim());
        let lexical = match &self.lexical {
            Some(b) => Some(b.forward(ex.grid, &mut concat)?),
            None => None,
        };
        let acoustic = match &self.acoustic {
            Some(b) => Some(b.forward(ex.acoustic, &mut concat)?),
            None => None,
        };
        let listener = match &self.listener {
            Some(l) => Some(l.forward(ex.listener, masks.map(|m| m.listener.as_slice()), &mut concat)?),
            None => None,
        };
        if let Some(m) = masks {
            concat.iter_mut().zip(&m.concat).for_each(|(v, &k)| *v = *v * k);
        }
        let logits = dense_pre_activation(&concat, &self.output)?;
        let probs = crate::nn::softmax(&logits);
        Ok(Trace { lexical, acoustic, listener, dropped: concat, logits, probs })
    }

    /// Class probabilities. Train mode draws fresh dropout masks from `rng`.
    pub fn forward<R: Rng>(&self, ex: &Example<T>, mode: Mode, rng: &mut R) -> Result<Vec<T>> {
        let masks = match mode {
            Mode::Train => Some(self.sample_masks(rng)),
            Mode::Eval => None,
        };
        Ok(self.forward_trace(ex, masks.as_ref())?.probs)
    }

    /// Eval-mode class probabilities.
    pub fn predict_proba(&self, ex: &Example<T>) -> Result<Vec<T>> {
        Ok(self.forward_trace(ex, None)?.probs)
    }

    /// Accumulates gradients of `-ln p[target]` into `grad`.
    pub fn backward(
        &self,
        ex: &Example<T>,
        trace: &Trace<T>,
        masks: Option<&DropoutMasks<T>>,
        target: usize,
        grad: &mut Model<T>,
        mut inputs: Option<&mut InputGrads<T>>,
    ) {
        let d_logits: Vec<T> = trace
            .probs
            .iter()
            .enumerate()
            .map(|(k, &p)| if k == target { p - T::one() } else { p })
            .collect();
        let mut d_concat = dense_backward(&trace.dropped, &trace.logits, &d_logits, &self.output, &mut grad.output);
        if let Some(m) = masks {
            d_concat.iter_mut().zip(&m.concat).for_each(|(g, &k)| *g = *g * k);
        }
        let mut offset = 0;
        if let (Some(b), Some(t), Some(g)) = (&self.lexical, &trace.lexical, &mut grad.lexical) {
            let w = b.output_width();
            let d_in = inputs.as_deref_mut().map(|i| i.grid.as_mut_slice());
            b.backward(ex.grid, t, &d_concat[offset..offset + w], g, d_in);
            offset += w;
        }
        if let (Some(b), Some(t), Some(g)) = (&self.acoustic, &trace.acoustic, &mut grad.acoustic) {
            let w = b.output_width();
            let d_in = inputs.map(|i| i.acoustic.as_mut_slice());
            b.backward(ex.acoustic, t, &d_concat[offset..offset + w], g, d_in);
            offset += w;
        }
        if let (Some(l), Some(t), Some(g)) = (&self.listener, &trace.listener, &mut grad.listener) {
            l.backward(ex.listener, t, masks.map(|m| m.listener.as_slice()), &d_concat[offset..], g);
        }
    }

    /// Loss and gradients for a single sample.
    pub fn sample_grads(&self, ex: &Example<T>, target: usize, masks: Option<&DropoutMasks<T>>) -> Result<(T, Model<T>, Vec<T>)> {
        let trace = self.forward_trace(ex, masks)?;
        let loss = softmax_xent(&trace.logits, target).1;
        let mut grad = self.zeros_like();
        self.backward(ex, &trace, masks, target, &mut grad, None);
        Ok((loss, grad, trace.probs))
    }

    /// Gradients w.r.t. the lexical grid and acoustic matrix.
    pub fn input_grads(&self, ex: &Example<T>, target: usize) -> Result<InputGrads<T>> {
        let trace = self.forward_trace(ex, None)?;
        let mut grad = self.zeros_like();
        let mut inputs = InputGrads { grid: vec![T::zero(); ex.grid.len()], acoustic: vec![T::zero(); ex.acoustic.len()] };
        self.backward(ex, &trace, None, target, &mut grad, Some(&mut inputs));
        Ok(inputs)
    }

    /// Mean loss and mean gradients over a minibatch. Samples run in
    /// parallel; the reduction is sequential in batch order so the result
    /// does not depend on the worker count.
    pub fn batch_grads(
        &self,
        batch: &[(Example<T>, usize)],
        masks: &[Option<DropoutMasks<T>>],
    ) -> Result<(T, Model<T>, Vec<Vec<T>>)> {
        assert_eq!(batch.len(), masks.len());
        let per_sample: Vec<Result<(T, Model<T>, Vec<T>)>> = batch
            .par_iter()
            .zip(masks.par_iter())
            .map(|((ex, target), m)| self.sample_grads(ex, *target, m.as_ref()))
            .collect();
        let mut total = self.zeros_like();
        let mut loss = T::zero();
        let mut probs = Vec::with_capacity(batch.len());
        for r in per_sample {
            let (l, g, p) = r?;
            loss = loss + l;
            total.add_assign(&g);
            probs.push(p);
        }
        let inv = T::one() / T::of(batch.len().max(1) as f64);
        total.scale(inv);
        Ok((loss * inv, total, probs))
    }

    /// ReLU states and pooling choices, for kink detection.
    pub fn kink_signature(&self, ex: &Example<T>, masks: Option<&DropoutMasks<T>>) -> Vec<u32> {
        let Ok(trace) = self.forward_trace(ex, masks) else {
            return Vec::new();
        };
        let sign = |v: &T| {
            if *v > T::zero() {
                2
            } else if *v < T::zero() {
                0
            } else {
                1
            }
        };
        let mut sig = Vec::new();
        for t in [&trace.lexical, &trace.acoustic].into_iter().flatten() {
            for pre in &t.pre {
                sig.extend(pre.iter().map(sign));
            }
            for a in &t.argmax {
                sig.extend(a.iter().map(|&i| i as u32));
            }
        }
        if let Some(l) = &trace.listener {
            for pre in &l.pres {
                sig.extend(pre.iter().map(sign));
            }
        }
        sig
    }
}

/// Argmax with ties going to the lowest class index.
pub fn predict<T: Scalar>(probs: &[T]) -> BcCategory {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().take(NUM_CLASSES) {
        if p > probs[best] {
            best = i;
        }
    }
    BcCategory::from_index(best).expect("three classes")
}

/// Owned single-sample input for gradient checking.
#[derive(Debug, Clone)]
pub struct CheckSample<T> {
    pub grid: Vec<T>,
    pub acoustic: Vec<T>,
    pub listener: usize,
    pub target: usize,
    pub masks: Option<DropoutMasks<T>>,
}

impl<T> CheckSample<T> {
    pub fn example(&self) -> Example<'_, T> {
        Example { grid: &self.grid, acoustic: &self.acoustic, listener: self.listener }
    }
}

impl<T: Scalar> Differentiable<T> for Model<T> {
    type Sample = CheckSample<T>;

    fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        self.tensors()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.tensors_mut()
    }

    fn loss(&self, s: &CheckSample<T>) -> T {
        let trace = self.forward_trace(&s.example(), s.masks.as_ref()).expect("valid sample");
        softmax_xent(&trace.logits, s.target).1
    }

    fn loss_and_grads(&self, s: &CheckSample<T>) -> (T, Vec<Tensor<T>>) {
        let (loss, grad, _) = self.sample_grads(&s.example(), s.target, s.masks.as_ref()).expect("valid sample");
        (loss, grad.tensors().into_iter().map(|(_, t)| t.clone()).collect())
    }

    fn kink_signature(&self, s: &CheckSample<T>) -> Vec<u32> {
        Model::kink_signature(self, &s.example(), s.masks.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// d=4, n=3 words, 10 frames of 13 MFCCs, 2 listeners.
    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            lexical: LexicalConfig { n_words: 3, word_dim: 4, filter_widths: vec![2, 3], filters_per_width: 3, pool: 50 },
            acoustic: AcousticConfig {
                window_ms: 115,
                filter_widths: vec![3, 4],
                filters_per_width: 3,
                pool: 3,
                ..AcousticConfig::default()
            },
            listener: ListenerConfig { count: 2, embed_dim: 5, ffn_dims: vec![6, 4] },
            ..ModelConfig::default()
        }
    }

    fn random_sample<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> CheckSample<f64> {
        let frames = cfg.acoustic.frames().unwrap();
        CheckSample {
            grid: (0..cfg.lexical.n_words * cfg.lexical.word_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            acoustic: (0..frames * 13).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            listener: 1,
            target: 2,
            masks: None,
        }
    }

    #[test]
    fn default_branch_widths() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.lexical_width(), 48);
        assert_eq!(cfg.acoustic_width().unwrap(), 256);
        assert_eq!(cfg.listener_width(), 16);
        assert_eq!(cfg.concat_width().unwrap(), 320);
    }

    #[test]
    fn toy_has_ten_frames() {
        assert_eq!(toy_config().acoustic.frames().unwrap(), 10);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig { use_lexical: false, use_acoustic: false, ..ModelConfig::default() };
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig(_))));
        cfg.use_lexical = true;
        cfg.lexical.filter_widths = vec![6];
        assert!(matches!(cfg.validate(), Err(ModelError::Nn(NnError::FilterWiderThanInput { width: 6, len: 5 }))));
        let cfg = ModelConfig { listener: ListenerConfig { embed_dim: 0, ..Default::default() }, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { dropout: 1.0, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn predict_tie_rule() {
        assert_eq!(predict(&[0.2, 0.5, 0.3]), BcCategory::Continuer);
        assert_eq!(predict(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]), BcCategory::NoBc);
        assert_eq!(predict(&[0.0, 0.0, 1.0]), BcCategory::Assessment);
        assert_eq!(predict(&[0.1, 0.45, 0.45]), BcCategory::Continuer);
    }

    #[test]
    fn forward_is_distribution_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = toy_config();
        let model: Model<f64> = Model::init(&cfg, &mut rng).unwrap();
        let s = random_sample(&cfg, &mut rng);
        let p = model.predict_proba(&s.example()).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p, model.predict_proba(&s.example()).unwrap());
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = toy_config();
        let model: Model<f64> = Model::init(&cfg, &mut rng).unwrap();
        let mut s = random_sample(&cfg, &mut rng);
        s.grid.pop();
        assert!(matches!(model.predict_proba(&s.example()), Err(ModelError::ShapeMismatch(_))));
        let mut s = random_sample(&cfg, &mut rng);
        s.listener = 2;
        assert!(model.predict_proba(&s.example()).is_ok(), "UNK row is valid");
        s.listener = 3;
        assert!(matches!(model.predict_proba(&s.example()), Err(ModelError::ListenerOutOfRange { id: 3, count: 2 })));
    }

    #[test]
    fn ablation_removes_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ModelConfig { use_listener: false, ..toy_config() };
        let model: Model<f64> = Model::init(&cfg, &mut rng).unwrap();
        assert!(model.listener.is_none());
        assert_eq!(model.output.input_dim(), cfg.lexical_width() + cfg.acoustic_width().unwrap());
        let mut s = random_sample(&cfg, &mut rng);
        let a = model.predict_proba(&s.example()).unwrap();
        s.listener = 999;
        assert_eq!(a, model.predict_proba(&s.example()).unwrap());
        assert!(model.tensors().iter().all(|(n, _)| !n.starts_with("listener")));

        let cfg = ModelConfig { use_lexical: false, ..toy_config() };
        let model: Model<f64> = Model::init(&cfg, &mut rng).unwrap();
        assert!(model.lexical.is_none());
        let s = CheckSample { grid: vec![], ..random_sample(&cfg, &mut rng) };
        assert!(model.predict_proba(&s.example()).is_ok());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = toy_config();
        let mut model: Model<f64> = Model::init(&cfg, &mut rng).unwrap();
        let sample = random_sample(&cfg, &mut rng);
        let report = grad_check(&mut model, &sample, 1e-4);
        assert!(report.max_rel_error() < 1e-4, "{report:#?}");
        assert!(report.checked() > report.skipped());
    }

    #[test]
    fn gradients_with_dropout_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = toy_config();
        let mut model: Model<f64> = Model::init(&cfg, &mut rng).unwrap();
        let mut sample = random_sample(&cfg, &mut rng);
        sample.masks = Some(model.sample_masks(&mut rng));
        let report = grad_check(&mut model, &sample, 1e-4);
        assert!(report.max_rel_error() < 1e-4, "{report:#?}");
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = toy_config();
        let model: Model<f64> = Model::init(&cfg, &mut rng).unwrap();
        let sample = random_sample(&cfg, &mut rng);
        let g = model.input_grads(&sample.example(), sample.target).unwrap();
        let base_sig = model.kink_signature(&sample.example(), None);
        let h = 1e-5;
        let mut checked = 0;
        for which in 0..2 {
            let len = if which == 0 { sample.grid.len() } else { sample.acoustic.len() };
            for k in 0..len {
                let mut up = sample.clone();
                let mut down = sample.clone();
                let (u, d) = if which == 0 { (&mut up.grid, &mut down.grid) } else { (&mut up.acoustic, &mut down.acoustic) };
                u[k] += h;
                d[k] -= h;
                if model.kink_signature(&up.example(), None) != base_sig || model.kink_signature(&down.example(), None) != base_sig {
                    continue;
                }
                let fd = (model.loss(&up) - model.loss(&down)) / (2.0 * h);
                let exact = if which == 0 { g.grid[k] } else { g.acoustic[k] };
                let rel = (fd - exact).abs() / fd.abs().max(exact.abs()).max(1e-8);
                assert!(rel < 1e-4, "input {which}/{k}: {exact} vs {fd}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn batch_order_only_permutes_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = toy_config();
        let model: Model<f64> = Model::init(&cfg, &mut rng).unwrap();
        let samples: Vec<CheckSample<f64>> = (0..5).map(|_| random_sample(&cfg, &mut rng)).collect();
        let batch: Vec<(Example<f64>, usize)> = samples.iter().map(|s| (s.example(), s.target)).collect();
        let (_, _, probs) = model.batch_grads(&batch, &vec![None; 5]).unwrap();
        let reversed: Vec<(Example<f64>, usize)> = batch.iter().rev().copied().collect();
        let (_, _, rprobs) = model.batch_grads(&reversed, &vec![None; 5]).unwrap();
        for i in 0..5 {
            assert_eq!(probs[i], rprobs[4 - i]);
        }
    }
}

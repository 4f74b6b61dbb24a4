//! A small post-LN transformer encoder for pair classification.
//!
//! Positions come from soft positions and attention is gated by the visible
//! matrix, so the same network consumes template sequences (hard positions,
//! all-ones matrix) and constrained-tuning sequences.

mod checkpoint;
mod model;
mod optim;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constrained::{InjectedSequence, VisibleMatrix};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, PAD};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use model::{
    attention_weights, embed, embed_example, forward, gradients, loss, masked_attention, Loss,
    MASK_VALUE,
};
pub use optim::{train_step, Adam};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_position: usize,
    pub dropout_rate: f64,
    /// When false the segment table is never added and stays untrained.
    pub use_segments: bool,
    pub seed: u64,
}

impl EncoderConfig {
    /// Desk-scale defaults: d_model 64, 4 heads, 2 layers, d_ff 128.
    pub fn desk(vocab_size: usize, max_position: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            max_position,
            dropout_rate: 0.1,
            use_segments: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Domain(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_position == 0 || self.d_ff == 0 {
            return Err(Error::Domain("vocab_size, max_position and d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Domain(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
}

/// Applies `$m` to every tensor of a layer, in checkpoint order.
macro_rules! layer_tensors {
    ($l:expr, $m:ident) => {
        [
            ("wq", $l.wq.$m()),
            ("bq", $l.bq.$m()),
            ("wk", $l.wk.$m()),
            ("bk", $l.bk.$m()),
            ("wv", $l.wv.$m()),
            ("bv", $l.bv.$m()),
            ("wo", $l.wo.$m()),
            ("bo", $l.bo.$m()),
            ("ln1_g", $l.ln1_g.$m()),
            ("ln1_b", $l.ln1_b.$m()),
            ("w1", $l.w1.$m()),
            ("b1", $l.b1.$m()),
            ("w2", $l.w2.$m()),
            ("b2", $l.b2.$m()),
            ("ln2_g", $l.ln2_g.$m()),
            ("ln2_b", $l.ln2_b.$m()),
        ]
    };
}

/// All trainable weights. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub seg_emb: Array2<f64>,
    pub emb_ln_g: Array1<f64>,
    pub emb_ln_b: Array1<f64>,
    pub layers: Vec<LayerParams>,
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    uniform(rng, fan_in, fan_out, (6.0 / (fan_in + fan_out) as f64).sqrt())
}

impl EncoderParams {
    /// Seeded initialization: Xavier-uniform projections, small uniform
    /// embeddings, unit layer-norm gains and zero biases.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let emb = 0.1;
        let tok_emb = uniform(&mut rng, config.vocab_size, d, emb);
        let pos_emb = uniform(&mut rng, config.max_position, d, emb);
        let seg_emb = uniform(&mut rng, 2, d, emb);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                wq: xavier(&mut rng, d, d),
                bq: Array1::zeros(d),
                wk: xavier(&mut rng, d, d),
                bk: Array1::zeros(d),
                wv: xavier(&mut rng, d, d),
                bv: Array1::zeros(d),
                wo: xavier(&mut rng, d, d),
                bo: Array1::zeros(d),
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                w1: xavier(&mut rng, d, config.d_ff),
                b1: Array1::zeros(config.d_ff),
                w2: xavier(&mut rng, config.d_ff, d),
                b2: Array1::zeros(d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
            })
            .collect();
        let cls_w = xavier(&mut rng, d, 2);
        Ok(EncoderParams {
            config: config.clone(),
            tok_emb,
            pos_emb,
            seg_emb,
            emb_ln_g: Array1::ones(d),
            emb_ln_b: Array1::zeros(d),
            layers,
            cls_w,
            cls_b: Array1::zeros(2),
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Named flat views in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("tok_emb".into(), slice(self.tok_emb.as_slice())),
            ("pos_emb".into(), slice(self.pos_emb.as_slice())),
            ("seg_emb".into(), slice(self.seg_emb.as_slice())),
            ("emb_ln_g".into(), slice(self.emb_ln_g.as_slice())),
            ("emb_ln_b".into(), slice(self.emb_ln_b.as_slice())),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(
                layer_tensors!(l, as_slice)
                    .into_iter()
                    .map(|(n, t)| (format!("layer{i}.{n}"), slice(t))),
            );
        }
        out.push(("cls_w".into(), slice(self.cls_w.as_slice())));
        out.push(("cls_b".into(), slice(self.cls_b.as_slice())));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("tok_emb".into(), slice_mut(self.tok_emb.as_slice_mut())),
            ("pos_emb".into(), slice_mut(self.pos_emb.as_slice_mut())),
            ("seg_emb".into(), slice_mut(self.seg_emb.as_slice_mut())),
            ("emb_ln_g".into(), slice_mut(self.emb_ln_g.as_slice_mut())),
            ("emb_ln_b".into(), slice_mut(self.emb_ln_b.as_slice_mut())),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer_tensors!(l, as_slice_mut)
                    .into_iter()
                    .map(|(n, t)| (format!("layer{i}.{n}"), slice_mut(t))),
            );
        }
        out.push(("cls_w".into(), slice_mut(self.cls_w.as_slice_mut())));
        out.push(("cls_b".into(), slice_mut(self.cls_b.as_slice_mut())));
        out
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.shape().to_vec()),
            ("pos_emb".to_string(), self.pos_emb.shape().to_vec()),
            ("seg_emb".to_string(), self.seg_emb.shape().to_vec()),
            ("emb_ln_g".to_string(), self.emb_ln_g.shape().to_vec()),
            ("emb_ln_b".to_string(), self.emb_ln_b.shape().to_vec()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(
                layer_tensors!(l, shape)
                    .into_iter()
                    .map(|(n, s)| (format!("layer{i}.{n}"), s.to_vec())),
            );
        }
        out.push(("cls_w".to_string(), self.cls_w.shape().to_vec()));
        out.push(("cls_b".to_string(), self.cls_b.shape().to_vec()));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

fn slice(s: Option<&[f64]>) -> &[f64] {
    s.expect("parameters are kept in standard layout")
}

fn slice_mut(s: Option<&mut [f64]>) -> &mut [f64] {
    s.expect("parameters are kept in standard layout")
}

/// Padded encoder batch. Rows past `lengths[b]` are `[PAD]` and invisible.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Array2<TokenId>,
    pub soft_positions: Array2<usize>,
    pub segments: Array2<u8>,
    pub visible: Vec<VisibleMatrix>,
    pub lengths: Vec<usize>,
    pub labels: Vec<u8>,
}

impl Batch {
    /// Pads labeled sequences to the longest one.
    pub fn from_sequences(seqs: &[&InjectedSequence]) -> Result<Self> {
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let b = seqs.len();
        let mut ids = Array2::from_elem((b, width), PAD);
        let mut soft_positions = Array2::zeros((b, width));
        let mut segments = Array2::zeros((b, width));
        let mut visible = Vec::with_capacity(b);
        let mut labels = Vec::with_capacity(b);
        for (i, s) in seqs.iter().enumerate() {
            if s.soft_positions.len() != s.len() || s.segments.len() != s.len() || s.visible.len() != s.len() {
                return Err(Error::Domain(format!("sequence {i} has inconsistent field lengths")));
            }
            for j in 0..s.len() {
                ids[[i, j]] = s.tokens[j];
                soft_positions[[i, j]] = s.soft_positions[j];
                segments[[i, j]] = s.segments[j];
            }
            visible.push(s.visible.padded(width));
            labels.push(s.label.ok_or_else(|| Error::Domain(format!("sequence {i} has no label")))?);
        }
        Ok(Batch {
            ids,
            soft_positions,
            segments,
            visible,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn width(&self) -> usize {
        self.ids.ncols()
    }

    pub(crate) fn example(&self, b: usize) -> Example<'_> {
        let n = self.lengths[b];
        Example {
            ids: prefix(&self.ids, b, n),
            soft_positions: prefix(&self.soft_positions, b, n),
            segments: prefix(&self.segments, b, n),
            visible: &self.visible[b],
            label: self.labels[b],
        }
    }
}

fn prefix<T: Clone>(a: &Array2<T>, row: usize, n: usize) -> Vec<T> {
    a.row(row).iter().take(n).cloned().collect()
}

/// One unpadded example borrowed from a batch.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub ids: Vec<TokenId>,
    pub soft_positions: Vec<usize>,
    pub segments: Vec<u8>,
    pub visible: &'a VisibleMatrix,
    pub label: u8,
}

impl<'a> Example<'a> {
    pub fn from_sequence(seq: &'a InjectedSequence) -> Self {
        Example {
            ids: seq.tokens.clone(),
            soft_positions: seq.soft_positions.clone(),
            segments: seq.segments.clone(),
            visible: &seq.visible,
            label: seq.label.unwrap_or(0),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

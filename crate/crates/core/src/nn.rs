//! Fully connected translator network.
//!
//! Hidden layers are ReLU followed by inverted dropout; the output layer is
//! linear. Parameters are stored as `f32`, every activation and gradient is
//! `f64`. Batched kernels split work over output rows or input columns only,
//! so reductions run in one fixed order whatever the [`Exec`] strategy.

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use wide::f64x8;

use crate::exec::Exec;
use crate::format::{self, FormatError, Reader, Writer};
use crate::numerics::{axpy, dot, dot4, EmbeddingVector, Matrix, Scalar};
use crate::rng::{self, Purpose};

pub const DEFAULT_INPUT_DIM: usize = 768;
pub const DEFAULT_OUTPUT_DIM: usize = 1536;
pub const DEFAULT_HIDDEN: [usize; 3] = [1536, 1536, 1536];
pub const DEFAULT_DROPOUT: f32 = 0.2;

pub const MODEL_MAGIC: &[u8; 4] = b"V2VM";
pub const MODEL_VERSION: u32 = 1;
const HEADER_BYTES: u64 = 12;
const LAYER_SPEC_BYTES: u64 = 13;

/// Rows handled per task in the batched kernels.
const ROW_BLOCK: usize = 16;
const COL_BLOCK: usize = 128;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("bad architecture: {0}")]
    BadArchitecture(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Linear => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Linear),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub dropout_rate: f32,
}

impl LayerSpec {
    pub fn hidden(in_dim: usize, out_dim: usize, dropout_rate: f32) -> Self {
        Self { in_dim, out_dim, activation: Activation::Relu, dropout_rate }
    }

    pub fn output(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, activation: Activation::Linear, dropout_rate: 0.0 }
    }

    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

/// `input -> hidden[0] -> ... -> output`, ReLU + dropout on every hidden layer.
pub fn architecture(input_dim: usize, hidden: &[usize], output_dim: usize, dropout: f32) -> Vec<LayerSpec> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input_dim);
    dims.extend_from_slice(hidden);
    dims.push(output_dim);
    let last = dims.len() - 2;
    (0..=last)
        .map(|i| {
            if i == last {
                LayerSpec::output(dims[i], dims[i + 1])
            } else {
                LayerSpec::hidden(dims[i], dims[i + 1], dropout)
            }
        })
        .collect()
}

pub fn default_architecture() -> Vec<LayerSpec> {
    architecture(DEFAULT_INPUT_DIM, &DEFAULT_HIDDEN, DEFAULT_OUTPUT_DIM, DEFAULT_DROPOUT)
}

pub fn validate_architecture(arch: &[LayerSpec]) -> Result<()> {
    let bad = |m: String| Err(NnError::BadArchitecture(m));
    if arch.is_empty() {
        return bad("no layers".into());
    }
    for (i, l) in arch.iter().enumerate() {
        if l.in_dim == 0 || l.out_dim == 0 {
            return bad(format!("layer {i} has a zero dimension"));
        }
        if l.in_dim > u32::MAX as usize || l.out_dim > u32::MAX as usize {
            return bad(format!("layer {i} dimension exceeds u32"));
        }
        if !(0.0..1.0).contains(&l.dropout_rate) {
            return bad(format!("layer {i} dropout rate {} outside [0, 1)", l.dropout_rate));
        }
        let is_last = i + 1 == arch.len();
        match (is_last, l.activation) {
            (true, Activation::Relu) => return bad("output layer must be linear".into()),
            (false, Activation::Linear) => return bad(format!("hidden layer {i} must be relu")),
            _ => {}
        }
        if is_last && l.dropout_rate != 0.0 {
            return bad("output layer cannot use dropout".into());
        }
        if let Some(next) = arch.get(i + 1) {
            if next.in_dim != l.out_dim {
                return bad(format!("layer {i} emits {} but layer {} expects {}", l.out_dim, i + 1, next.in_dim));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    spec: LayerSpec,
    weights: Matrix,
    biases: Vec<f32>,
}

impl Layer {
    pub fn new(spec: LayerSpec, weights: Matrix, biases: Vec<f32>) -> Result<Self> {
        if weights.rows() != spec.out_dim || weights.cols() != spec.in_dim {
            return Err(NnError::ShapeMismatch(format!(
                "weights are {}x{}, layer is {}x{}",
                weights.rows(),
                weights.cols(),
                spec.out_dim,
                spec.in_dim
            )));
        }
        if biases.len() != spec.out_dim {
            return Err(NnError::DimensionMismatch { expected: spec.out_dim, got: biases.len() });
        }
        Ok(Self { spec, weights, biases })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn biases(&self) -> &[f32] {
        &self.biases
    }

    pub fn params_mut(&mut self) -> (&mut [f32], &mut [f32]) {
        (self.weights.entries_mut(), &mut self.biases)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout masks for example `j` of a batch are keyed by
    /// `(seed, step + j, layer, unit)`.
    Train {
        seed: u64,
        step: u64,
    },
    Infer,
}

/// Cached activations of one (batched) forward pass, row-major per example.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub batch: usize,
    pub input: Vec<f64>,
    pub layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
    /// Entries are 0 or `1/(1-p)`; all 1 in inference or when `p = 0`.
    pub mask: Vec<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        &self.layers.last().expect("trace has layers").post
    }

    pub fn output_row(&self, b: usize) -> &[f64] {
        let out = self.output();
        let d = out.len() / self.batch;
        &out[b * d..(b + 1) * d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.spec.out_dim * l.spec.in_dim],
                    biases: vec![0.0; l.spec.out_dim],
                })
                .collect(),
        }
    }

    /// Flat views in parameter order: layer 0 weights, layer 0 biases, ...
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weights.as_slice(), l.biases.as_slice()]).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Inverted-dropout mask entry for one unit.
#[inline]
pub fn dropout_mask(p: f32, seed: u64, step: u64, layer: usize, unit: usize) -> f64 {
    if p == 0.0 {
        return 1.0;
    }
    let u = rng::counter_uniform(&[seed, Purpose::Dropout as u64, step, layer as u64, unit as u64]);
    if u < p as f64 {
        0.0
    } else {
        1.0 / (1.0 - p as f64)
    }
}

impl MlpModel {
    /// Glorot-uniform weights, zero biases, deterministic in `seed`.
    pub fn init(arch: &[LayerSpec], seed: u64) -> Result<Self> {
        validate_architecture(arch)?;
        let layers = arch
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let limit = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                let mut r = rng::stream(seed, Purpose::Init, i as u64);
                let entries = (0..spec.in_dim * spec.out_dim)
                    .map(|_| {
                        let w = dist.sample(&mut r) as f32;
                        if (w as f64).abs() > limit {
                            // rounding to f32 stepped outside the interval
                            if w > 0.0 {
                                w.next_down()
                            } else {
                                w.next_up()
                            }
                        } else {
                            w
                        }
                    })
                    .collect();
                let weights = Matrix::new(spec.out_dim, spec.in_dim, entries).expect("finite weights");
                Layer { spec: *spec, weights, biases: vec![0.0; spec.out_dim] }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let arch: Vec<_> = layers.iter().map(|l| l.spec).collect();
        validate_architecture(&arch)?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn architecture(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().spec.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    /// Mutable parameter tensors in the same order as [`Gradients::tensors`].
    pub fn param_tensors_mut(&mut self) -> Vec<&mut [f32]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let (w, b) = l.params_mut();
                [w, b]
            })
            .collect()
    }

    pub fn param_tensors(&self) -> Vec<&[f32]> {
        self.layers.iter().flat_map(|l| [l.weights.entries(), l.biases.as_slice()]).collect()
    }

    pub fn set_dropout(&mut self, p: f32) {
        let last = self.layers.len() - 1;
        for l in &mut self.layers[..last] {
            l.spec.dropout_rate = p;
        }
    }

    pub fn forward(&self, x: &EmbeddingVector, mode: Mode) -> Result<(EmbeddingVector, ForwardTrace)> {
        let trace = self.forward_batch(x.as_slice(), 1, mode, Exec::Sequential)?;
        let out = EmbeddingVector::new(trace.output().to_vec())
            .map_err(|e| NnError::ShapeMismatch(format!("non-finite output: {e}")))?;
        Ok((out, trace))
    }

    /// Inference on one input, no trace kept.
    pub fn predict(&self, x: &[f64], exec: Exec) -> Result<Vec<f64>> {
        let mut t = self.forward_batch(x, 1, Mode::Infer, exec)?;
        Ok(t.layers.pop().unwrap().post)
    }

    /// Inference on `batch` row-major inputs.
    pub fn predict_batch(&self, inputs: &[f64], batch: usize, exec: Exec) -> Result<Vec<f64>> {
        let mut t = self.forward_batch(inputs, batch, Mode::Infer, exec)?;
        Ok(t.layers.pop().unwrap().post)
    }

    /// Forward pass over `batch` row-major inputs.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize, mode: Mode, exec: Exec) -> Result<ForwardTrace> {
        let d_in = self.input_dim();
        if batch == 0 {
            return Err(NnError::ShapeMismatch("empty batch".into()));
        }
        if inputs.len() != batch * d_in {
            return Err(NnError::DimensionMismatch { expected: batch * d_in, got: inputs.len() / batch });
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let x = if li == 0 { inputs } else { &layers.last().map(|t: &LayerTrace| &t.post).unwrap()[..] };
            let pre = affine_batch(layer, x, batch, exec);
            let d = layer.spec.out_dim;
            let mask: Vec<f64> = match (mode, layer.spec.activation) {
                (Mode::Train { seed, step }, Activation::Relu) if layer.spec.dropout_rate > 0.0 => (0..batch * d)
                    .map(|k| dropout_mask(layer.spec.dropout_rate, seed, step + (k / d) as u64, li, k % d))
                    .collect(),
                _ => vec![1.0; batch * d],
            };
            let post = match layer.spec.activation {
                Activation::Relu => pre.iter().zip(&mask).map(|(&z, &m)| if z > 0.0 { z * m } else { 0.0 }).collect(),
                Activation::Linear => pre.clone(),
            };
            layers.push(LayerTrace { pre, post, mask });
        }
        Ok(ForwardTrace { batch, input: inputs.to_vec(), layers })
    }

    pub fn backward(&self, trace: &ForwardTrace, grad_out: &EmbeddingVector) -> Result<Gradients> {
        if trace.batch != 1 {
            return Err(NnError::ShapeMismatch(format!("trace holds {} examples", trace.batch)));
        }
        let mut g = Gradients::zeros_like(self);
        self.backward_batch_into(trace, grad_out.as_slice(), Exec::Sequential, &mut g)?;
        Ok(g)
    }

    /// Gradients summed over the batch for the upstream gradient `grad_out`
    /// (row-major, one row per example). Overwrites `grads`.
    pub fn backward_batch_into(
        &self,
        trace: &ForwardTrace,
        grad_out: &[f64],
        exec: Exec,
        grads: &mut Gradients,
    ) -> Result<()> {
        let batch = trace.batch;
        self.check_trace(trace)?;
        if grad_out.len() != batch * self.output_dim() {
            return Err(NnError::ShapeMismatch(format!(
                "upstream gradient has {} entries, expected {}",
                grad_out.len(),
                batch * self.output_dim()
            )));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(NnError::ShapeMismatch("gradient buffer does not match model".into()));
        }
        let mut delta = grad_out.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let lt = &trace.layers[li];
            if layer.spec.activation == Activation::Relu {
                for ((d, &z), &m) in delta.iter_mut().zip(&lt.pre).zip(&lt.mask) {
                    *d = if z > 0.0 { *d * m } else { 0.0 };
                }
            }
            let x = if li == 0 { &trace.input } else { &trace.layers[li - 1].post };
            let g = &mut grads.layers[li];
            param_grads_batch(layer, &delta, x, batch, exec, g);
            if li > 0 {
                delta = input_grad_batch(layer, &delta, batch, exec);
            }
        }
        Ok(())
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        let b = trace.batch;
        let ok = trace.layers.len() == self.layers.len()
            && trace.input.len() == b * self.input_dim()
            && self.layers.iter().zip(&trace.layers).all(|(l, t)| {
                let n = b * l.spec.out_dim;
                t.pre.len() == n && t.post.len() == n && t.mask.len() == n
            });
        if ok {
            Ok(())
        } else {
            Err(NnError::ShapeMismatch("trace does not match model".into()))
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(self.size_bytes() as usize);
        w.bytes(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            w.u32(l.spec.in_dim as u32);
            w.u32(l.spec.out_dim as u32);
            w.u8(l.spec.activation.code());
            w.f32(l.spec.dropout_rate);
        }
        for l in &self.layers {
            w.f32s(l.weights.entries());
            w.f32s(&l.biases);
        }
        w.finish()
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        format::check_magic(bytes, MODEL_MAGIC)?;
        let mut r = Reader::new(bytes);
        r.take(4)?;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(FormatError::VersionUnsupported(version).into());
        }
        let n_layers = r.u32()? as u64;
        let mut specs = Vec::new();
        let mut expected = HEADER_BYTES + 8;
        for _ in 0..n_layers {
            let in_dim = r.u32()? as usize;
            let out_dim = r.u32()? as usize;
            let act = r.u8()?;
            let dropout_rate = r.f32()?;
            let activation = Activation::from_code(act)
                .ok_or_else(|| FormatError::Malformed(format!("unknown activation code {act}")))?;
            specs.push(LayerSpec { in_dim, out_dim, activation, dropout_rate });
            expected += LAYER_SPEC_BYTES + 4 * (in_dim as u64 * out_dim as u64 + out_dim as u64);
        }
        format::check_length(bytes, expected)?;
        let body = format::verify_trailer(bytes)?;
        validate_architecture(&specs)?;
        let mut r = Reader::new(body);
        r.take((HEADER_BYTES + LAYER_SPEC_BYTES * n_layers) as usize)?;
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let mut w = Vec::with_capacity(spec.in_dim * spec.out_dim);
            r.f32s_into(&mut w, spec.in_dim * spec.out_dim)?;
            let mut b = Vec::with_capacity(spec.out_dim);
            r.f32s_into(&mut b, spec.out_dim)?;
            let weights = Matrix::new(spec.out_dim, spec.in_dim, w)
                .map_err(|e| FormatError::Malformed(format!("weights: {e}")))?;
            if b.iter().any(|v| !v.is_finite()) {
                return Err(FormatError::Malformed("non-finite bias".into()).into());
            }
            layers.push(Layer { spec, weights, biases: b });
        }
        debug_assert_eq!(r.remaining(), 0);
        Ok(Self { layers })
    }

    /// Exact length of [`Self::serialize`] output.
    pub fn size_bytes(&self) -> u64 {
        model_file_size(&self.architecture())
    }
}

pub fn model_file_size(arch: &[LayerSpec]) -> u64 {
    HEADER_BYTES + arch.iter().map(|l| LAYER_SPEC_BYTES + 4 * l.param_count() as u64).sum::<u64>() + 8
}

/// `Z[b] = W X[b] + bias` for every example, parallel over output rows.
fn affine_batch(layer: &Layer, x: &[f64], batch: usize, exec: Exec) -> Vec<f64> {
    let (d_in, d_out) = (layer.spec.in_dim, layer.spec.out_dim);
    let xr = |b: usize| &x[b * d_in..(b + 1) * d_in];
    // feature-major scratch so each task owns contiguous rows
    let mut zt = vec![0.0; d_out * batch];
    exec.for_each_chunk(&mut zt, ROW_BLOCK * batch, |blk, chunk| {
        // example groups outermost so the current inputs stay cache-resident
        let mut b = 0;
        while b + 4 <= batch {
            let xs = [xr(b), xr(b + 1), xr(b + 2), xr(b + 3)];
            for (r, out) in chunk.chunks_mut(batch).enumerate() {
                let o = blk * ROW_BLOCK + r;
                let bias = layer.biases[o] as f64;
                let z = dot4(layer.weights.row(o), xs);
                for k in 0..4 {
                    out[b + k] = z[k] + bias;
                }
            }
            b += 4;
        }
        for (r, out) in chunk.chunks_mut(batch).enumerate() {
            let o = blk * ROW_BLOCK + r;
            let bias = layer.biases[o] as f64;
            for (bb, z) in out.iter_mut().enumerate().skip(b) {
                *z = dot(layer.weights.row(o), xr(bb)) + bias;
            }
        }
    });
    transpose(&zt, d_out, batch)
}

const GRAD_TILE: usize = 32;
const IG_ROWS: usize = 8;
const IG_BATCH: usize = 4;

/// Weight and bias gradients from pre-activation deltas `delta` (batch x out).
fn param_grads_batch(layer: &Layer, delta: &[f64], x: &[f64], batch: usize, exec: Exec, g: &mut LayerGrad) {
    let (d_in, d_out) = (layer.spec.in_dim, layer.spec.out_dim);
    let dt = transpose(delta, batch, d_out);
    exec.for_each_chunk2(&mut g.weights, ROW_BLOCK * d_in, &mut g.biases, ROW_BLOCK, |blk, wchunk, bchunk| {
        let o0 = blk * ROW_BLOCK;
        let rows = bchunk.len();
        for (r, gb) in bchunk.iter_mut().enumerate() {
            *gb = dt[(o0 + r) * batch..(o0 + r + 1) * batch].iter().sum();
        }
        // rows in groups of four; an example is skipped when all four deltas vanish
        let mut nz: Vec<(usize, [f64; 4])> = Vec::with_capacity(batch);
        for r0 in (0..rows).step_by(4) {
            let g_rows = 4.min(rows - r0);
            nz.clear();
            for b in 0..batch {
                let d: [f64; 4] = std::array::from_fn(|k| if k < g_rows { dt[(o0 + r0 + k) * batch + b] } else { 0.0 });
                if d.iter().any(|v| *v != 0.0) {
                    nz.push((b * d_in, d));
                }
            }
            let grows = &mut wchunk[r0 * d_in..(r0 + g_rows) * d_in];
            let mut i = 0;
            while i + GRAD_TILE <= d_in {
                let mut acc = [[f64x8::ZERO; GRAD_TILE / 8]; 4];
                for &(off, d) in &nz {
                    let xs: [f64x8; GRAD_TILE / 8] = std::array::from_fn(|t| load8(&x[off + i + 8 * t..]));
                    for k in 0..4 {
                        let dv = f64x8::splat(d[k]);
                        for t in 0..GRAD_TILE / 8 {
                            acc[k][t] += dv * xs[t];
                        }
                    }
                }
                for (k, row) in acc.iter().take(g_rows).enumerate() {
                    for (t, v) in row.iter().enumerate() {
                        let at = k * d_in + i + 8 * t;
                        grows[at..at + 8].copy_from_slice(&v.to_array());
                    }
                }
                i += GRAD_TILE;
            }
            for k in 0..g_rows {
                for j in i..d_in {
                    grows[k * d_in + j] = nz.iter().fold(0.0, |s, &(off, d)| s + d[k] * x[off + j]);
                }
            }
        }
    });
}

/// `W^T delta[b]` for every example, parallel over input columns.
fn input_grad_batch(layer: &Layer, delta: &[f64], batch: usize, exec: Exec) -> Vec<f64> {
    let (d_in, d_out) = (layer.spec.in_dim, layer.spec.out_dim);
    // column-block-major scratch: block c holds batch x width(c)
    let n_blocks = d_in.div_ceil(COL_BLOCK);
    let mut scratch = vec![0.0; batch * d_in];
    let blocks: Vec<&mut [f64]> = {
        let mut rest = scratch.as_mut_slice();
        let mut v = Vec::with_capacity(n_blocks);
        for c in 0..n_blocks {
            let width = COL_BLOCK.min(d_in - c * COL_BLOCK);
            let (head, tail) = rest.split_at_mut(batch * width);
            v.push(head);
            rest = tail;
        }
        v
    };
    let mut blocks = blocks;
    exec.for_each_chunk(&mut blocks, 1, |c, blk| {
        let acc = &mut *blk[0];
        let c0 = c * COL_BLOCK;
        let width = acc.len() / batch;
        let body = width - width % 8;
        let mut wv = vec![f64x8::ZERO; IG_ROWS * body / 8];
        let mut o = 0;
        while o + IG_ROWS <= d_out {
            let w: [&[f32]; IG_ROWS] = std::array::from_fn(|k| &layer.weights.row(o + k)[c0..c0 + width]);
            for k in 0..IG_ROWS {
                for t in 0..body / 8 {
                    wv[t * IG_ROWS + k] = load8(&w[k][8 * t..]);
                }
            }
            for b0 in (0..batch).step_by(IG_BATCH) {
                let nb = IG_BATCH.min(batch - b0);
                let d: [&[f64]; IG_BATCH] = std::array::from_fn(|j| {
                    let b = b0 + j.min(nb - 1);
                    &delta[b * d_out + o..b * d_out + o + IG_ROWS]
                });
                if d[..nb].iter().all(|r| r.iter().all(|v| *v == 0.0)) {
                    continue;
                }
                let dv: [[f64x8; IG_ROWS]; IG_BATCH] =
                    std::array::from_fn(|j| std::array::from_fn(|k| f64x8::splat(d[j][k])));
                let grp = &mut acc[b0 * width..(b0 + nb) * width];
                if nb == IG_BATCH {
                    let (a01, a23) = grp.split_at_mut(2 * width);
                    let (a0, a1) = a01.split_at_mut(width);
                    let (a2, a3) = a23.split_at_mut(width);
                    let rows: [&mut [f64]; IG_BATCH] = [a0, a1, a2, a3];
                    for t in 0..body / 8 {
                        let ws = &wv[t * IG_ROWS..(t + 1) * IG_ROWS];
                        let mut v: [f64x8; IG_BATCH] = std::array::from_fn(|j| load8(&rows[j][8 * t..]));
                        for k in 0..IG_ROWS {
                            for j in 0..IG_BATCH {
                                v[j] += dv[j][k] * ws[k];
                            }
                        }
                        for j in 0..IG_BATCH {
                            rows[j][8 * t..8 * t + 8].copy_from_slice(&v[j].to_array());
                        }
                    }
                } else {
                    for (j, a) in grp.chunks_mut(width).enumerate() {
                        for t in 0..body / 8 {
                            let ws = &wv[t * IG_ROWS..(t + 1) * IG_ROWS];
                            let mut v = load8(&a[8 * t..]);
                            for k in 0..IG_ROWS {
                                v += dv[j][k] * ws[k];
                            }
                            a[8 * t..8 * t + 8].copy_from_slice(&v.to_array());
                        }
                    }
                }
                for (j, a) in grp.chunks_mut(width).enumerate() {
                    for i in body..width {
                        let mut v = a[i];
                        for k in 0..IG_ROWS {
                            v += d[j][k] * w[k][i] as f64;
                        }
                        a[i] = v;
                    }
                }
            }
            o += IG_ROWS;
        }
        for o in o..d_out {
            let w = &layer.weights.row(o)[c0..c0 + width];
            for b in 0..batch {
                let d = delta[b * d_out + o];
                if d != 0.0 {
                    axpy(&mut acc[b * width..(b + 1) * width], d, w);
                }
            }
        }
    });
    let mut out = vec![0.0; batch * d_in];
    let mut offset = 0;
    for c in 0..n_blocks {
        let c0 = c * COL_BLOCK;
        let width = COL_BLOCK.min(d_in - c0);
        for b in 0..batch {
            out[b * d_in + c0..b * d_in + c0 + width]
                .copy_from_slice(&scratch[offset + b * width..offset + (b + 1) * width]);
        }
        offset += batch * width;
    }
    out
}

#[inline(always)]
fn load8<T: Scalar>(x: &[T]) -> f64x8 {
    f64x8::new(std::array::from_fn(|l| x[l].to_f64()))
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

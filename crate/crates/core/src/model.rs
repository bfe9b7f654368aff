//! Multilayer perceptron parameters, the embedding/decision split, and the
//! supervised loss.
//!
//! Parameters live in one flat vector. Layer `l` occupies a contiguous block
//! holding its weight matrix (row-major, `fan_out x fan_in`) followed by its
//! `fan_out` biases. Hidden layers use a rectifier; the output layer feeds a
//! softmax cross-entropy loss. Because layers are stored in order, the
//! embedding sub-model (layers before `split_layer`) is a prefix of the vector
//! and the decision sub-model is the matching suffix.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::LabeledSet;
use crate::error::{Error, Result};

/// Layer widths plus the embedding/decision boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelArch {
    layer_sizes: Vec<usize>,
    split_layer: usize,
}

impl ModelArch {
    /// `layer_sizes` is `[input, hidden..., classes]`; weight layers with index
    /// below `split_layer` form the embedding.
    pub fn new(layer_sizes: Vec<usize>, split_layer: usize) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::input("layer_sizes needs at least input and output widths"));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::input("layer widths must be positive"));
        }
        let layers = layer_sizes.len() - 1;
        if split_layer < 1 || split_layer >= layers {
            return Err(Error::input(format!(
                "split_layer must lie in [1, {layers}) so both sub-models are non-empty, got {split_layer}"
            )));
        }
        Ok(Self {
            layer_sizes,
            split_layer,
        })
    }

    /// Splits before the final weight layer, so the decision sub-model is the
    /// output layer.
    pub fn with_head_split(layer_sizes: Vec<usize>) -> Result<Self> {
        let split = layer_sizes.len().saturating_sub(2);
        Self::new(layer_sizes, split)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn split_layer(&self) -> usize {
        self.split_layer
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn layer_len(&self, l: usize) -> usize {
        (self.layer_sizes[l] + 1) * self.layer_sizes[l + 1]
    }

    /// Offset of layer `l` in the flat vector.
    fn layer_offset(&self, l: usize) -> usize {
        (0..l).map(|k| self.layer_len(k)).sum()
    }

    pub fn total_dim(&self) -> usize {
        (0..self.num_layers()).map(|l| self.layer_len(l)).sum()
    }

    /// Length of the embedding prefix.
    pub fn phi_dim(&self) -> usize {
        self.layer_offset(self.split_layer)
    }

    pub fn h_dim(&self) -> usize {
        self.total_dim() - self.phi_dim()
    }
}

/// Flat model parameters tied to an architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec {
    arch: Arc<ModelArch>,
    values: Vec<f64>,
}

/// Borrowed embedding (`phi`) and decision (`h`) blocks of a [`ParamVec`].
#[derive(Debug, Clone, Copy)]
pub struct SplitView<'a> {
    pub phi: &'a [f64],
    pub h: &'a [f64],
}

impl ParamVec {
    pub fn from_values(arch: Arc<ModelArch>, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.total_dim() {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected: arch.total_dim(),
                found: values.len(),
            });
        }
        Ok(Self { arch, values })
    }

    pub fn zeros(arch: Arc<ModelArch>) -> Self {
        let values = vec![0.0; arch.total_dim()];
        Self { arch, values }
    }

    /// Reassembles a model from an embedding and a decision block.
    pub fn from_parts(arch: Arc<ModelArch>, phi: &[f64], h: &[f64]) -> Result<Self> {
        let mut values = Vec::with_capacity(phi.len() + h.len());
        values.extend_from_slice(phi);
        values.extend_from_slice(h);
        Self::from_values(arch, values)
    }

    pub fn arch(&self) -> &Arc<ModelArch> {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn phi(&self) -> &[f64] {
        &self.values[..self.arch.phi_dim()]
    }

    pub fn phi_mut(&mut self) -> &mut [f64] {
        let d = self.arch.phi_dim();
        &mut self.values[..d]
    }

    pub fn h(&self) -> &[f64] {
        &self.values[self.arch.phi_dim()..]
    }

    pub fn same_arch(&self, other: &ParamVec) -> bool {
        Arc::ptr_eq(&self.arch, &other.arch) || *self.arch == *other.arch
    }
}

/// Fan-scaled uniform weights and zero biases, deterministic in `seed`.
pub fn init_model(arch: &Arc<ModelArch>, seed: u64) -> ParamVec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(arch.total_dim());
    for l in 0..arch.num_layers() {
        let fan_in = arch.layer_sizes[l];
        let fan_out = arch.layer_sizes[l + 1];
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVec {
        arch: Arc::clone(arch),
        values,
    }
}

pub fn split_params(p: &ParamVec) -> SplitView<'_> {
    let (phi, h) = p.values.split_at(p.arch.phi_dim());
    SplitView { phi, h }
}

fn check_input(arch: &ModelArch, data: &LabeledSet) -> Result<()> {
    if data.input_dim() != arch.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "batch features vs model input",
            expected: arch.input_dim(),
            found: data.input_dim(),
        });
    }
    if data.num_classes() > arch.num_classes() {
        return Err(Error::DimensionMismatch {
            context: "label classes vs model outputs",
            expected: arch.num_classes(),
            found: data.num_classes(),
        });
    }
    Ok(())
}

/// Per-layer pre-activations and activations for one example.
struct Trace {
    /// `acts[0]` is the input; `acts[l + 1]` is the output of layer `l`
    /// (post-rectifier for hidden layers, raw logits for the last).
    acts: Vec<Vec<f64>>,
}

fn forward(arch: &ModelArch, params: &[f64], x: &[f64]) -> Trace {
    let layers = arch.num_layers();
    let mut acts = Vec::with_capacity(layers + 1);
    acts.push(x.to_vec());
    let mut offset = 0;
    for l in 0..layers {
        let fan_in = arch.layer_sizes[l];
        let fan_out = arch.layer_sizes[l + 1];
        let w = &params[offset..offset + fan_in * fan_out];
        let b = &params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
        let input = &acts[l];
        let mut out: Vec<f64> = (0..fan_out)
            .map(|o| {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                b[o] + row.iter().zip(input).map(|(wi, xi)| wi * xi).sum::<f64>()
            })
            .collect();
        if l + 1 < layers {
            out.iter_mut().for_each(|z| *z = z.max(0.0));
        }
        acts.push(out);
        offset += (fan_in + 1) * fan_out;
    }
    Trace { acts }
}

/// Numerically stable `-log softmax(logits)[label]`, plus the softmax.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let probs = exps.into_iter().map(|e| e / sum).collect();
    (loss.max(0.0), probs)
}

/// Logits for a single input row.
pub fn predict_logits(p: &ParamVec, x: &[f64]) -> Vec<f64> {
    forward(&p.arch, &p.values, x).acts.pop().unwrap()
}

/// Mean softmax cross-entropy over `rows` of `data` and its gradient.
pub fn loss_and_grad(p: &ParamVec, data: &LabeledSet, rows: &[usize]) -> Result<(f64, ParamVec)> {
    let arch = &*p.arch;
    check_input(arch, data)?;
    if rows.is_empty() {
        return Err(Error::input("batch must be non-empty"));
    }
    let layers = arch.num_layers();
    let mut grad = vec![0.0; arch.total_dim()];
    let mut total = 0.0;
    for &r in rows {
        let trace = forward(arch, &p.values, data.row(r));
        let (loss, probs) = cross_entropy(&trace.acts[layers], data.label(r));
        total += loss;

        let mut delta = probs;
        delta[data.label(r)] -= 1.0;
        for l in (0..layers).rev() {
            let fan_in = arch.layer_sizes[l];
            let fan_out = arch.layer_sizes[l + 1];
            let offset = arch.layer_offset(l);
            let input = &trace.acts[l];
            let (gw, gb) = grad[offset..offset + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                    *g += d * xi;
                }
            }
            if l > 0 {
                let w = &p.values[offset..offset + fan_in * fan_out];
                let mut prev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    for (pv, wi) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *pv += wi * d;
                    }
                }
                // rectifier derivative, zero at the kink
                for (pv, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *pv = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }
    let n = rows.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((
        total / n,
        ParamVec {
            arch: Arc::clone(&p.arch),
            values: grad,
        },
    ))
}

/// Mean loss only, without the backward pass.
pub fn mean_loss(p: &ParamVec, data: &LabeledSet, rows: &[usize]) -> Result<f64> {
    check_input(&p.arch, data)?;
    if rows.is_empty() {
        return Err(Error::input("batch must be non-empty"));
    }
    let total: f64 = rows
        .iter()
        .map(|&r| cross_entropy(&predict_logits(p, data.row(r)), data.label(r)).0)
        .sum();
    Ok(total / rows.len() as f64)
}

/// Top-1 accuracy and mean loss; logit ties go to the lowest class index.
pub fn evaluate(p: &ParamVec, testset: &LabeledSet) -> Result<(f64, f64)> {
    check_input(&p.arch, testset)?;
    if testset.is_empty() {
        return Err(Error::input("test set must be non-empty"));
    }
    let mut correct = 0usize;
    let mut total_loss = 0.0;
    for i in 0..testset.len() {
        let logits = predict_logits(p, testset.row(i));
        if crate::vecops::argmax(&logits) == testset.label(i) {
            correct += 1;
        }
        total_loss += cross_entropy(&logits, testset.label(i)).0;
    }
    let n = testset.len() as f64;
    Ok((correct as f64 / n, total_loss / n))
}

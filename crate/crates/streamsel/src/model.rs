//! Tiny differentiable classifiers: linear softmax and a 2-layer ReLU MLP,
//! with exact analytic per-sample gradients (full model or last layer only).

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StreamselError};
use crate::vecmath::{dot, norm, softmax};

/// One labeled point of the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropySoftmax,
}

/// Which parameter block a per-sample gradient covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    /// Final affine layer only (weights and bias).
    LastLayer,
    /// Every layer, flattened in layer order.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Row-major `rows x cols` weight matrix.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Layer {
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
            rows,
            cols,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| dot(&self.weights[r * self.cols..(r + 1) * self.cols], x) + self.bias[r])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.rows * self.cols + self.rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelSpec {
    Linear { input: usize, classes: usize },
    Mlp { input: usize, hidden: usize, classes: usize },
}

impl ModelSpec {
    pub fn input_dim(&self) -> usize {
        match *self {
            ModelSpec::Linear { input, .. } | ModelSpec::Mlp { input, .. } => input,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            ModelSpec::Linear { classes, .. } | ModelSpec::Mlp { classes, .. } => classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
    /// Number of leading layers whose (post-ReLU) output serves as the
    /// filter feature. 0 means raw input.
    pub feature_block: usize,
}

impl ModelParams {
    pub fn init(spec: ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims: Vec<(usize, usize)> = match spec {
            ModelSpec::Linear { input, classes } => vec![(classes, input)],
            ModelSpec::Mlp {
                input,
                hidden,
                classes,
            } => vec![(hidden, input), (classes, hidden)],
        };
        let layers = dims
            .into_iter()
            .map(|(rows, cols)| {
                let dist = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).unwrap();
                Layer {
                    weights: (0..rows * cols).map(|_| dist.sample(&mut rng)).collect(),
                    bias: vec![0.0; rows],
                    rows,
                    cols,
                }
            })
            .collect();
        let feature_block = match spec {
            ModelSpec::Linear { .. } => 0,
            ModelSpec::Mlp { .. } => 1,
        };
        ModelParams {
            layers,
            feature_block,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().rows
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(StreamselError::Shape {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Pre-softmax logits.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut act = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            act = layer.apply(&act);
            if i < last {
                for v in act.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
        Ok(act)
    }

    /// Input to the final affine layer (post-ReLU hidden for the MLP,
    /// the raw input for the linear model).
    pub fn last_layer_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut act = x.to_vec();
        for layer in &self.layers[..self.layers.len() - 1] {
            act = layer.apply(&act);
            for v in act.iter_mut() {
                *v = v.max(0.0);
            }
        }
        Ok(act)
    }

    /// Activations after the designated feature block, used by the
    /// coarse-grained filter.
    pub fn extract_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let block = self.feature_block.min(self.layers.len() - 1);
        let mut act = x.to_vec();
        for layer in &self.layers[..block] {
            act = layer.apply(&act);
            for v in act.iter_mut() {
                *v = v.max(0.0);
            }
        }
        Ok(act)
    }

    pub fn loss(&self, sample: &Sample) -> Result<f64> {
        let probs = softmax(&self.forward(&sample.features)?);
        if sample.label >= probs.len() {
            return Err(StreamselError::Label {
                label: sample.label,
                classes: probs.len(),
            });
        }
        Ok(-probs[sample.label].max(f64::MIN_POSITIVE).ln())
    }

    pub fn param_count(&self, scope: GradScope) -> usize {
        match scope {
            GradScope::LastLayer => self.layers.last().unwrap().param_count(),
            GradScope::Full => self.layers.iter().map(Layer::param_count).sum(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count(GradScope::Full));
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count(GradScope::Full) {
            return Err(StreamselError::Shape {
                expected: self.param_count(GradScope::Full),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for layer in &mut self.layers {
            let w = layer.rows * layer.cols;
            layer.weights.copy_from_slice(&flat[off..off + w]);
            off += w;
            layer.bias.copy_from_slice(&flat[off..off + layer.rows]);
            off += layer.rows;
        }
        Ok(())
    }

    /// w -= lr * flat_grad, over the full parameter vector.
    pub fn apply_update(&mut self, flat_grad: &[f64], lr: f64) -> Result<()> {
        if flat_grad.len() != self.param_count(GradScope::Full) {
            return Err(StreamselError::Shape {
                expected: self.param_count(GradScope::Full),
                got: flat_grad.len(),
            });
        }
        let mut off = 0;
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut() {
                *w -= lr * flat_grad[off];
                off += 1;
            }
            for b in layer.bias.iter_mut() {
                *b -= lr * flat_grad[off];
                off += 1;
            }
        }
        Ok(())
    }

    /// Snapshot format: one JSON header line with layer shapes, then the
    /// flat parameter vector as little-endian f64 bytes.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ShapeHeader {
            layers: self
                .layers
                .iter()
                .map(|l| (l.rows, l.cols))
                .collect(),
            feature_block: self.feature_block,
        };
        let mut file = std::fs::File::create(path)?;
        serde_json::to_writer(&mut file, &header)?;
        file.write_all(b"\n")?;
        for v in self.flatten() {
            file.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path)?;
        let nl = data
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| StreamselError::Config("missing snapshot header".into()))?;
        let header: ShapeHeader = serde_json::from_slice(&data[..nl])?;
        let mut params = ModelParams {
            layers: header
                .layers
                .iter()
                .map(|&(r, c)| Layer::zeros(r, c))
                .collect(),
            feature_block: header.feature_block,
        };
        let mut body = &data[nl + 1..];
        let expected = params.param_count(GradScope::Full) * 8;
        if body.len() != expected {
            return Err(StreamselError::Config(format!(
                "snapshot body has {} bytes, expected {expected}",
                body.len()
            )));
        }
        let mut flat = Vec::with_capacity(expected / 8);
        let mut buf = [0u8; 8];
        while body.read_exact(&mut buf).is_ok() {
            flat.push(f64::from_le_bytes(buf));
        }
        params.assign_flat(&flat)?;
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct ShapeHeader {
    layers: Vec<(usize, usize)>,
    feature_block: usize,
}

/// Flattened gradient of the cross-entropy loss for one sample, over the
/// requested parameter scope, together with its Euclidean norm.
#[derive(Debug, Clone)]
pub struct PerSampleGradient {
    pub sample_id: usize,
    pub grad: Vec<f64>,
    pub norm: f64,
}

/// Exact analytic gradient: softmax(logits) - onehot(y) back through the
/// affine layers, with ReLU masking for the hidden layer.
pub fn per_sample_gradient(
    params: &ModelParams,
    sample: &Sample,
    scope: GradScope,
) -> Result<PerSampleGradient> {
    let classes = params.num_classes();
    if sample.label >= classes {
        return Err(StreamselError::Label {
            label: sample.label,
            classes,
        });
    }
    let hidden = params.last_layer_input(&sample.features)?;
    let last = params.layers.last().unwrap();
    let logits = last.apply(&hidden);
    let mut delta = softmax(&logits);
    delta[sample.label] -= 1.0;

    let mut grad = Vec::with_capacity(params.param_count(scope));
    if scope == GradScope::Full && params.layers.len() == 2 {
        // Backprop to the hidden layer: delta1 = (W2^T delta) .* relu'(z1)
        let first = &params.layers[0];
        let pre: Vec<f64> = first.apply(&sample.features);
        let mut delta1 = vec![0.0; first.rows];
        for (j, d1) in delta1.iter_mut().enumerate() {
            if pre[j] > 0.0 {
                let mut acc = 0.0;
                for (r, d) in delta.iter().enumerate() {
                    acc += last.weights[r * last.cols + j] * d;
                }
                *d1 = acc;
            }
        }
        for d1 in &delta1 {
            for x in &sample.features {
                grad.push(d1 * x);
            }
        }
        grad.extend_from_slice(&delta1);
    }
    for d in &delta {
        for h in &hidden {
            grad.push(d * h);
        }
    }
    grad.extend_from_slice(&delta);

    let n = norm(&grad);
    Ok(PerSampleGradient {
        sample_id: sample.id,
        grad,
        norm: n,
    })
}

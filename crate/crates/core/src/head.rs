//! Trainable classifier heads.
//!
//! Two architectures sit on top of the frozen embeddings:
//!
//! * [`Architecture::Whisper`]: dense(X→hidden), average pool over time,
//!   dense(hidden→2), softmax. The score is the fake-class probability.
//! * [`Architecture::Wav2Vec`]: softmax-weighted sum of the hidden layers,
//!   average pool over time, dense(Y→1024), ReLU, dense(1024→128), ReLU,
//!   dense(128→1), sigmoid.
//!
//! Every operation before the first nonlinearity is affine, so the temporal
//! mean is taken first and the dense layers run once per utterance instead of
//! once per frame. The result is the same function.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::embedding::{softmax, softmax_backward, Embedding, LayerWeights};
use crate::fsutil;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPF1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Hidden width of the Whisper head.
pub const WHISPER_HIDDEN: usize = 512;
/// Output widths of the three dense layers of the Wav2Vec head.
pub const WAV2VEC_WIDTHS: [usize; 3] = [1024, 128, 1];

/// Feature widths of the five Whisper encoder sizes (tiny … large).
pub const WHISPER_DIMS: [usize; 5] = [384, 512, 768, 1024, 1280];
/// Feature widths of Wav2Vec 2.0 base, large and xls-r.
pub const WAV2VEC_DIMS: [usize; 3] = [768, 1024, 1024];

/// Upper bound on any architecture dimension accepted from a checkpoint.
const MAX_DIM: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("input has {got} features, head expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("input has {got} layers, head expects {expected}")]
    LayerMismatch { expected: usize, got: usize },
    #[error("backward called with a trace that does not belong to this model")]
    TraceMismatch,
    #[error("upstream gradient has {got} entries, expected {expected}")]
    GradientShape { expected: usize, got: usize },
    #[error("checkpoint version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Whisper { input_dim: usize, hidden: usize },
    Wav2Vec { input_dim: usize, num_layers: usize },
}

impl Architecture {
    pub fn whisper(input_dim: usize) -> Self {
        Architecture::Whisper {
            input_dim,
            hidden: WHISPER_HIDDEN,
        }
    }

    pub fn wav2vec(input_dim: usize, num_layers: usize) -> Self {
        Architecture::Wav2Vec {
            input_dim,
            num_layers,
        }
    }

    pub fn input_dim(&self) -> usize {
        match *self {
            Architecture::Whisper { input_dim, .. } | Architecture::Wav2Vec { input_dim, .. } => {
                input_dim
            }
        }
    }

    pub fn num_layers(&self) -> usize {
        match *self {
            Architecture::Whisper { .. } => 1,
            Architecture::Wav2Vec { num_layers, .. } => num_layers,
        }
    }

    /// Number of raw logits: two for the softmax head, one for the sigmoid head.
    pub fn num_logits(&self) -> usize {
        match self {
            Architecture::Whisper { .. } => 2,
            Architecture::Wav2Vec { .. } => 1,
        }
    }

    fn dense_shapes(&self) -> Vec<(usize, usize)> {
        match *self {
            Architecture::Whisper { input_dim, hidden } => vec![(input_dim, hidden), (hidden, 2)],
            Architecture::Wav2Vec { input_dim, .. } => {
                let mut fan_in = input_dim;
                WAV2VEC_WIDTHS
                    .iter()
                    .map(|&out| {
                        let shape = (fan_in, out);
                        fan_in = out;
                        shape
                    })
                    .collect()
            }
        }
    }

    fn relu_after(&self, layer: usize, n_layers: usize) -> bool {
        matches!(self, Architecture::Wav2Vec { .. }) && layer + 1 < n_layers
    }
}

/// Fully connected layer, `y = W x + b` with `W` stored row-major (out × in).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.bias
            .iter()
            .enumerate()
            .map(|(o, b)| {
                let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
                b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    pub architecture: Architecture,
    pub layers: Vec<DenseLayer>,
    /// Empty for the Whisper head.
    pub layer_weights: LayerWeights,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Probability that the clip is fake.
    pub score: f64,
    pub logits: Vec<f64>,
}

/// Intermediate values of one forward pass, consumed by [`HeadModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    architecture: Architecture,
    pooled: Vec<Vec<f64>>,
    /// Input to each dense layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each dense layer.
    pre_acts: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients mirroring the parameters of a [`HeadModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseGrad>,
    pub layer_weights: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &HeadModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| DenseGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            layer_weights: vec![0.0; model.layer_weights.len()],
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.1.iter_mut().zip(b.1).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Named tensors in parameter declaration order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("dense{i}.weight"), l.weights.as_slice()));
            out.push((format!("dense{i}.bias"), l.bias.as_slice()));
        }
        if !self.layer_weights.is_empty() {
            out.push(("layer_weights".to_string(), self.layer_weights.as_slice()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("dense{i}.weight"), l.weights.as_mut_slice()));
            out.push((format!("dense{i}.bias"), l.bias.as_mut_slice()));
        }
        if !self.layer_weights.is_empty() {
            out.push(("layer_weights".to_string(), self.layer_weights.as_mut_slice()));
        }
        out
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl HeadModel {
    /// Glorot-uniform weights (±sqrt(6 / (fan_in + fan_out))), zero biases,
    /// uniform layer weights. Same seed, same parameters.
    pub fn init(architecture: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = HeadModel::zeros(architecture, seed);
        for layer in &mut model.layers {
            let limit = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            layer
                .weights
                .iter_mut()
                .for_each(|w| *w = dist.sample(&mut rng));
        }
        model
    }

    fn zeros(architecture: Architecture, seed: u64) -> Self {
        HeadModel {
            architecture,
            layers: architecture
                .dense_shapes()
                .into_iter()
                .map(|(fan_in, fan_out)| DenseLayer::zeros(fan_in, fan_out))
                .collect(),
            layer_weights: match architecture {
                Architecture::Whisper { .. } => LayerWeights { raw: Vec::new() },
                Architecture::Wav2Vec { num_layers, .. } => LayerWeights::uniform(num_layers),
            },
            seed,
        }
    }

    /// Named parameter tensors in declaration order (the checkpoint order).
    pub fn params(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("dense{i}.weight"), l.weights.as_slice()));
            out.push((format!("dense{i}.bias"), l.bias.as_slice()));
        }
        if !self.layer_weights.is_empty() {
            out.push(("layer_weights".to_string(), self.layer_weights.raw.as_slice()));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("dense{i}.weight"), l.weights.as_mut_slice()));
            out.push((format!("dense{i}.bias"), l.bias.as_mut_slice()));
        }
        if !self.layer_weights.is_empty() {
            out.push((
                "layer_weights".to_string(),
                self.layer_weights.raw.as_mut_slice(),
            ));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_input(&self, pooled: &[Vec<f64>]) -> Result<(), HeadError> {
        let expected_layers = self.architecture.num_layers();
        if pooled.len() != expected_layers {
            return Err(HeadError::LayerMismatch {
                expected: expected_layers,
                got: pooled.len(),
            });
        }
        let expected = self.architecture.input_dim();
        match pooled.iter().find(|p| p.len() != expected) {
            Some(p) => Err(HeadError::DimensionMismatch {
                expected,
                got: p.len(),
            }),
            None => Ok(()),
        }
    }

    pub fn forward(&self, e: &Embedding) -> Result<Prediction, HeadError> {
        self.forward_pooled(&e.pooled_layers())
    }

    /// Forward pass on time-averaged features (`L × D`, see [`Embedding::pooled_layers`]).
    pub fn forward_pooled(&self, pooled: &[Vec<f64>]) -> Result<Prediction, HeadError> {
        self.forward_traced(pooled).map(|(p, _)| p)
    }

    pub fn forward_traced(
        &self,
        pooled: &[Vec<f64>],
    ) -> Result<(Prediction, ForwardTrace), HeadError> {
        self.check_input(pooled)?;
        let mut x = match self.architecture {
            Architecture::Whisper { .. } => pooled[0].clone(),
            Architecture::Wav2Vec { input_dim, .. } => {
                let w = self.layer_weights.effective();
                let mut agg = vec![0.0; input_dim];
                for (layer, wl) in pooled.iter().zip(&w) {
                    agg.iter_mut().zip(layer).for_each(|(a, v)| *a += wl * v);
                }
                agg
            }
        };

        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre_acts = Vec::with_capacity(n);
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&x);
            inputs.push(x);
            x = if self.architecture.relu_after(i, n) {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            pre_acts.push(z);
        }

        let logits = x;
        let score = match self.architecture {
            Architecture::Whisper { .. } => softmax(&logits)[1],
            Architecture::Wav2Vec { .. } => sigmoid(logits[0]),
        };
        let trace = ForwardTrace {
            architecture: self.architecture,
            pooled: pooled.to_vec(),
            inputs,
            pre_acts,
        };
        Ok((Prediction { score, logits }, trace))
    }

    /// Backpropagates `grad_logits` (dL/dlogits) through the trace of a
    /// forward pass of this model.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_logits: &[f64],
    ) -> Result<Gradients, HeadError> {
        if trace.architecture != self.architecture || trace.inputs.len() != self.layers.len() {
            return Err(HeadError::TraceMismatch);
        }
        let expected = self.architecture.num_logits();
        if grad_logits.len() != expected {
            return Err(HeadError::GradientShape {
                expected,
                got: grad_logits.len(),
            });
        }

        let n = self.layers.len();
        let mut grads = Gradients::zeros_like(self);
        let mut upstream = grad_logits.to_vec();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let input = &trace.inputs[i];
            let dz: Vec<f64> = if self.architecture.relu_after(i, n) {
                upstream
                    .iter()
                    .zip(&trace.pre_acts[i])
                    .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
                    .collect()
            } else {
                upstream
            };
            let g = &mut grads.layers[i];
            let mut down = vec![0.0; layer.in_dim];
            for (o, &d) in dz.iter().enumerate() {
                g.bias[o] = d;
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                let grow = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for k in 0..layer.in_dim {
                    grow[k] = d * input[k];
                    down[k] += d * row[k];
                }
            }
            upstream = down;
        }

        if let Architecture::Wav2Vec { .. } = self.architecture {
            let per_layer: Vec<f64> = trace
                .pooled
                .iter()
                .map(|p| p.iter().zip(&upstream).map(|(v, g)| v * g).sum())
                .collect();
            grads.layer_weights = softmax_backward(&self.layer_weights.effective(), &per_layer);
        }
        Ok(grads)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let (tag, a, b) = match self.architecture {
            Architecture::Whisper { input_dim, hidden } => (0u8, input_dim, hidden),
            Architecture::Wav2Vec {
                input_dim,
                num_layers,
            } => (1u8, input_dim, num_layers),
        };
        w.write_all(&[tag])?;
        w.write_all(&(a as u32).to_le_bytes())?;
        w.write_all(&(b as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for (_, tensor) in self.params() {
            for v in tensor {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, HeadError> {
        let corrupt = |what: &str| HeadError::Corrupt(what.to_string());
        let mut header = [0u8; 4 + 4 + 1 + 4 + 4 + 8];
        r.read_exact(&mut header).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => corrupt("truncated header"),
            _ => HeadError::Io(e),
        })?;
        if &header[0..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != CHECKPOINT_VERSION {
            return Err(HeadError::Version { found: version });
        }
        let a = u32_at(9) as usize;
        let b = u32_at(13) as usize;
        let seed = u64::from_le_bytes(header[17..25].try_into().unwrap());
        if a == 0 || b == 0 {
            return Err(corrupt("zero dimension in architecture"));
        }
        if a > MAX_DIM || b > MAX_DIM {
            return Err(HeadError::Corrupt(format!("implausible dimensions {a} x {b}")));
        }
        let architecture = match header[8] {
            0 => Architecture::Whisper {
                input_dim: a,
                hidden: b,
            },
            1 => Architecture::Wav2Vec {
                input_dim: a,
                num_layers: b,
            },
            t => return Err(HeadError::Corrupt(format!("unknown architecture tag {t}"))),
        };

        let mut model = HeadModel::zeros(architecture, seed);
        let mut buf = [0u8; 8];
        for (name, tensor) in model.params_mut() {
            for v in tensor.iter_mut() {
                r.read_exact(&mut buf).map_err(|e| match e.kind() {
                    io::ErrorKind::UnexpectedEof => {
                        HeadError::Corrupt(format!("truncated payload in {name}"))
                    }
                    _ => HeadError::Io(e),
                })?;
                *v = f64::from_le_bytes(buf);
                if !v.is_finite() {
                    return Err(HeadError::Corrupt(format!("non-finite value in {name}")));
                }
            }
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(corrupt("trailing bytes"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), HeadError> {
        fsutil::write_atomic(path, |f| {
            let mut w = BufWriter::new(f);
            self.write_to(&mut w)?;
            w.flush()?;
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self, HeadError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

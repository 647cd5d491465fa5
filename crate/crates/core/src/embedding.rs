//! Embedding matrices, layer stacks and the providers that produce them.
//!
//! Extractors are frozen: nothing in this module exposes a gradient except
//! the layer-aggregation weights, which belong to the classifier head.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::audio::{self, AudioError, LogMelConfig};
use crate::data::Utterance;
use crate::fsutil;

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const EMBS_MAGIC: &[u8; 4] = b"EMBS";

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated payload")]
    Truncated,
    #[error("rows*cols overflow ({rows} x {cols})")]
    Overflow { rows: u32, cols: u32 },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("extractor tag is not valid UTF-8")]
    BadTag,
    #[error("trailing bytes after payload")]
    TrailingData,
    #[error("value count {actual} does not match shape {rows}x{cols}")]
    LengthMismatch { rows: usize, cols: usize, actual: usize },
    #[error("shape mismatch for tag '{tag}': expected ({exp_rows}, {exp_cols}), got ({rows}, {cols})")]
    ShapeMismatch {
        tag: String,
        exp_rows: usize,
        exp_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("extractor tag mismatch: expected '{expected}', file declares '{found}'")]
    TagMismatch { expected: String, found: String },
    #[error("unknown extractor tag '{0}'")]
    UnknownTag(String),
    #[error("layer stack blocks disagree on shape or tag")]
    InconsistentStack,
    #[error("layer stack must have at least one layer")]
    EmptyStack,
    #[error("layer count mismatch: stack has {stack}, weights have {weights}")]
    LayerCountMismatch { stack: usize, weights: usize },
    #[error("missing embedding file {0}")]
    MissingFile(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

fn check_finite(values: &[f64]) -> Result<(), EmbeddingError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(EmbeddingError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Time × feature matrix `e = E(x)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    tag: String,
}

impl EmbeddingMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        tag: impl Into<String>,
    ) -> Result<Self, EmbeddingError> {
        if rows.checked_mul(cols) != Some(values.len()) {
            return Err(EmbeddingError::LengthMismatch {
                rows,
                cols,
                actual: values.len(),
            });
        }
        check_finite(&values)?;
        Ok(EmbeddingMatrix {
            rows,
            cols,
            values,
            tag: tag.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, t: usize, d: usize) -> f64 {
        self.values[t * self.cols + d]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.cols..(t + 1) * self.cols]
    }

    /// Column means: average over the time axis.
    pub fn mean_over_time(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.cols];
        for t in 0..self.rows {
            for (a, v) in acc.iter_mut().zip(self.row(t)) {
                *a += v;
            }
        }
        let n = self.rows.max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Per-hidden-layer outputs `L × T × D`, before aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    layers: Vec<EmbeddingMatrix>,
}

impl LayerStack {
    pub fn new(layers: Vec<EmbeddingMatrix>) -> Result<Self, EmbeddingError> {
        let first = layers.first().ok_or(EmbeddingError::EmptyStack)?;
        let consistent = layers
            .iter()
            .all(|l| l.rows == first.rows && l.cols == first.cols && l.tag == first.tag);
        if !consistent {
            return Err(EmbeddingError::InconsistentStack);
        }
        Ok(LayerStack { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn rows(&self) -> usize {
        self.layers[0].rows
    }

    pub fn cols(&self) -> usize {
        self.layers[0].cols
    }

    pub fn tag(&self) -> &str {
        &self.layers[0].tag
    }

    pub fn layers(&self) -> &[EmbeddingMatrix] {
        &self.layers
    }

    pub fn get(&self, l: usize, t: usize, d: usize) -> f64 {
        self.layers[l].get(t, d)
    }
}

/// Trainable raw weights of the layer-weighted sum. The effective weights
/// are `softmax(raw)`, so zero initialization means a uniform average.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub raw: Vec<f64>,
}

impl LayerWeights {
    pub fn uniform(num_layers: usize) -> Self {
        LayerWeights {
            raw: vec![0.0; num_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn effective(&self) -> Vec<f64> {
        softmax(&self.raw)
    }
}

pub(crate) fn softmax(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|r| (r - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Pulls a gradient on the effective weights back through the softmax.
///
/// `per_layer[l]` is dL/d(weight_l); returns dL/d(raw_l).
pub(crate) fn softmax_backward(weights: &[f64], per_layer: &[f64]) -> Vec<f64> {
    let dot: f64 = weights.iter().zip(per_layer).map(|(w, g)| w * g).sum();
    weights
        .iter()
        .zip(per_layer)
        .map(|(w, g)| w * (g - dot))
        .collect()
}

/// Weighted sum over layers: `out[t,d] = Σ_l softmax(raw)[l] · s[l,t,d]`.
pub fn aggregate_layers(
    stack: &LayerStack,
    weights: &LayerWeights,
) -> Result<EmbeddingMatrix, EmbeddingError> {
    if stack.num_layers() != weights.len() {
        return Err(EmbeddingError::LayerCountMismatch {
            stack: stack.num_layers(),
            weights: weights.len(),
        });
    }
    let w = weights.effective();
    let mut out = vec![0.0; stack.rows() * stack.cols()];
    for (layer, wl) in stack.layers.iter().zip(&w) {
        for (o, v) in out.iter_mut().zip(&layer.values) {
            *o += wl * v;
        }
    }
    EmbeddingMatrix::new(stack.rows(), stack.cols(), out, stack.tag())
}

/// Gradient of a scalar loss with respect to the raw layer weights, given
/// the upstream gradient `grad_out` (T×D, row-major) on the aggregated matrix.
pub fn aggregate_layers_backward(
    stack: &LayerStack,
    weights: &LayerWeights,
    grad_out: &[f64],
) -> Result<Vec<f64>, EmbeddingError> {
    if stack.num_layers() != weights.len() {
        return Err(EmbeddingError::LayerCountMismatch {
            stack: stack.num_layers(),
            weights: weights.len(),
        });
    }
    if grad_out.len() != stack.rows() * stack.cols() {
        return Err(EmbeddingError::LengthMismatch {
            rows: stack.rows(),
            cols: stack.cols(),
            actual: grad_out.len(),
        });
    }
    let per_layer: Vec<f64> = stack
        .layers
        .iter()
        .map(|l| l.values.iter().zip(grad_out).map(|(v, g)| v * g).sum())
        .collect();
    Ok(softmax_backward(&weights.effective(), &per_layer))
}

/// Either a single matrix or a per-layer stack, depending on the extractor.
#[derive(Debug, Clone, PartialEq)]
pub enum Embedding {
    Matrix(EmbeddingMatrix),
    Stack(LayerStack),
}

impl Embedding {
    pub fn rows(&self) -> usize {
        match self {
            Embedding::Matrix(m) => m.rows(),
            Embedding::Stack(s) => s.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Embedding::Matrix(m) => m.cols(),
            Embedding::Stack(s) => s.cols(),
        }
    }

    pub fn num_layers(&self) -> usize {
        match self {
            Embedding::Matrix(_) => 1,
            Embedding::Stack(s) => s.num_layers(),
        }
    }

    pub fn tag(&self) -> &str {
        match self {
            Embedding::Matrix(m) => m.tag(),
            Embedding::Stack(s) => s.tag(),
        }
    }

    /// Time-averaged features per layer (`L × D`). A plain matrix is one layer.
    pub fn pooled_layers(&self) -> Vec<Vec<f64>> {
        match self {
            Embedding::Matrix(m) => vec![m.mean_over_time()],
            Embedding::Stack(s) => s.layers.iter().map(|l| l.mean_over_time()).collect(),
        }
    }
}

/// Declared (rows, cols) for a known extractor.
///
/// Tags may carry a revision suffix after `@` (`whisper-base@v2`), which is
/// ignored for the shape lookup.
pub fn declared_shape(tag: &str) -> Option<(usize, usize)> {
    let family = tag_family(tag);
    let shape = match family {
        "whisper-tiny" => (1500, 384),
        "whisper-base" => (1500, 512),
        "whisper-small" => (1500, 768),
        "whisper-medium" => (1500, 1024),
        "whisper-large" => (1500, 1280),
        "wav2vec2-base" => (249, 768),
        "wav2vec2-large" => (249, 1024),
        "wav2vec2-xls-r" => (249, 1024),
        audio::LOGMEL_TAG => (249, 80),
        _ => return None,
    };
    Some(shape)
}

pub fn tag_family(tag: &str) -> &str {
    tag.split('@').next().unwrap_or(tag)
}

/// What a provider promises to return for every utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeContract {
    pub tag: String,
    pub rows: usize,
    pub cols: usize,
}

impl ShapeContract {
    pub fn for_tag(tag: &str) -> Result<Self, EmbeddingError> {
        let (rows, cols) =
            declared_shape(tag).ok_or_else(|| EmbeddingError::UnknownTag(tag.to_string()))?;
        Ok(ShapeContract {
            tag: tag.to_string(),
            rows,
            cols,
        })
    }

    pub fn check(&self, e: &Embedding) -> Result<(), EmbeddingError> {
        if tag_family(e.tag()) != tag_family(&self.tag) {
            return Err(EmbeddingError::TagMismatch {
                expected: self.tag.clone(),
                found: e.tag().to_string(),
            });
        }
        if (e.rows(), e.cols()) != (self.rows, self.cols) {
            return Err(EmbeddingError::ShapeMismatch {
                tag: e.tag().to_string(),
                exp_rows: self.rows,
                exp_cols: self.cols,
                rows: e.rows(),
                cols: e.cols(),
            });
        }
        Ok(())
    }
}

/// Source of frozen embeddings.
pub trait EmbeddingProvider: Sync {
    fn contract(&self) -> &ShapeContract;
    fn provide(&self, utterance: &Utterance) -> Result<Embedding, EmbeddingError>;
}

/// Reads precomputed EMB1 / EMBS files referenced by the manifest path.
#[derive(Debug, Clone)]
pub struct FileProvider {
    contract: ShapeContract,
}

impl FileProvider {
    pub fn new(contract: ShapeContract) -> Self {
        FileProvider { contract }
    }

    pub fn for_tag(tag: &str) -> Result<Self, EmbeddingError> {
        Ok(FileProvider::new(ShapeContract::for_tag(tag)?))
    }
}

impl EmbeddingProvider for FileProvider {
    fn contract(&self) -> &ShapeContract {
        &self.contract
    }

    fn provide(&self, utterance: &Utterance) -> Result<Embedding, EmbeddingError> {
        if !utterance.path.exists() {
            return Err(EmbeddingError::MissingFile(
                utterance.path.display().to_string(),
            ));
        }
        let e = read_embedding(&utterance.path)?;
        self.contract.check(&e)?;
        Ok(e)
    }
}

/// Log-mel features computed on the fly from WAV files.
#[derive(Debug, Clone)]
pub struct ToyProvider {
    contract: ShapeContract,
    config: LogMelConfig,
}

impl Default for ToyProvider {
    fn default() -> Self {
        let config = LogMelConfig::default();
        ToyProvider {
            contract: ShapeContract {
                tag: audio::LOGMEL_TAG.to_string(),
                rows: config.num_frames(audio::CLIP_SAMPLES),
                cols: config.n_mels,
            },
            config,
        }
    }
}

impl ToyProvider {
    pub fn extract(&self, w: &audio::Waveform) -> Result<EmbeddingMatrix, EmbeddingError> {
        let clip = audio::standardize(&audio::resample(w, audio::SAMPLE_RATE)?)?;
        Ok(audio::logmel(&clip, self.config)?)
    }
}

impl EmbeddingProvider for ToyProvider {
    fn contract(&self) -> &ShapeContract {
        &self.contract
    }

    fn provide(&self, utterance: &Utterance) -> Result<Embedding, EmbeddingError> {
        let w = audio::load_wav(&utterance.path)?;
        let e = Embedding::Matrix(self.extract(&w)?);
        self.contract.check(&e)?;
        Ok(e)
    }
}

pub fn write_emb1_to<W: Write>(m: &EmbeddingMatrix, out: &mut W) -> Result<(), EmbeddingError> {
    let rows = u32::try_from(m.rows).map_err(|_| EmbeddingError::Overflow {
        rows: u32::MAX,
        cols: m.cols as u32,
    })?;
    let cols = u32::try_from(m.cols).map_err(|_| EmbeddingError::Overflow {
        rows,
        cols: u32::MAX,
    })?;
    out.write_all(EMB1_MAGIC)?;
    out.write_all(&rows.to_le_bytes())?;
    out.write_all(&cols.to_le_bytes())?;
    out.write_all(&(m.tag.len() as u32).to_le_bytes())?;
    out.write_all(m.tag.as_bytes())?;
    for &v in &m.values {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), EmbeddingError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => EmbeddingError::Truncated,
        _ => EmbeddingError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, EmbeddingError> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_emb1_body<R: Read>(r: &mut R) -> Result<EmbeddingMatrix, EmbeddingError> {
    let rows = read_u32(r)?;
    let cols = read_u32(r)?;
    let count = (rows as usize)
        .checked_mul(cols as usize)
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or(EmbeddingError::Overflow { rows, cols })?;
    let tag_len = read_u32(r)? as usize;
    let mut tag = Vec::new();
    r.by_ref().take(tag_len as u64).read_to_end(&mut tag)?;
    if tag.len() != tag_len {
        return Err(EmbeddingError::Truncated);
    }
    let tag = String::from_utf8(tag).map_err(|_| EmbeddingError::BadTag)?;

    let mut payload = Vec::new();
    r.by_ref()
        .take((count * 4) as u64)
        .read_to_end(&mut payload)?;
    if payload.len() != count * 4 {
        return Err(EmbeddingError::Truncated);
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    EmbeddingMatrix::new(rows as usize, cols as usize, values, tag)
}

/// Reads one EMB1 block from a stream (magic included).
pub fn read_emb1_from<R: Read>(r: &mut R) -> Result<EmbeddingMatrix, EmbeddingError> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic)?;
    if &magic != EMB1_MAGIC {
        return Err(EmbeddingError::BadMagic(magic));
    }
    read_emb1_body(r)
}

fn ensure_eof<R: Read>(r: &mut R) -> Result<(), EmbeddingError> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(EmbeddingError::TrailingData),
    }
}

/// Writes an EMB1 file. Values are stored as 32-bit floats.
pub fn write_emb1(m: &EmbeddingMatrix, path: &Path) -> Result<(), EmbeddingError> {
    fsutil::write_atomic(path, |w| {
        let mut w = BufWriter::new(w);
        write_emb1_to(m, &mut w)?;
        w.flush()?;
        Ok(())
    })
}

pub fn read_emb1(path: &Path) -> Result<EmbeddingMatrix, EmbeddingError> {
    let mut r = BufReader::new(File::open(path)?);
    let m = read_emb1_from(&mut r)?;
    ensure_eof(&mut r)?;
    Ok(m)
}

/// Writes an EMBS file: magic, u32 layer count, then one EMB1 block per layer.
pub fn write_embs(stack: &LayerStack, path: &Path) -> Result<(), EmbeddingError> {
    fsutil::write_atomic(path, |w| {
        let mut w = BufWriter::new(w);
        w.write_all(EMBS_MAGIC)?;
        w.write_all(&(stack.num_layers() as u32).to_le_bytes())?;
        for layer in &stack.layers {
            write_emb1_to(layer, &mut w)?;
        }
        w.flush()?;
        Ok(())
    })
}

/// Reads either format, dispatching on the magic bytes.
pub fn read_embedding(path: &Path) -> Result<Embedding, EmbeddingError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic)?;
    let e = match &magic {
        m if m == EMB1_MAGIC => Embedding::Matrix(read_emb1_body(&mut r)?),
        m if m == EMBS_MAGIC => {
            let n = read_u32(&mut r)?;
            if n == 0 {
                return Err(EmbeddingError::EmptyStack);
            }
            let layers = (0..n)
                .map(|_| read_emb1_from(&mut r))
                .collect::<Result<Vec<_>, _>>()?;
            Embedding::Stack(LayerStack::new(layers)?)
        }
        _ => return Err(EmbeddingError::BadMagic(magic)),
    };
    ensure_eof(&mut r)?;
    Ok(e)
}

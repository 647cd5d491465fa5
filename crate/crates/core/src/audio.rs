//! Waveform loading and preprocessing.
//!
//! Every clip fed to an extractor goes through the same chain:
//! [`load_wav`] → [`resample`] to 16 kHz → [`standardize`] to exactly five
//! seconds. [`logmel`] is the deterministic toy extractor used when no
//! pretrained model embeddings are available.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::embedding::EmbeddingMatrix;

/// Processing sample rate in Hz.
pub const SAMPLE_RATE: u32 = 16_000;
/// Fixed clip duration in seconds.
pub const CLIP_SECONDS: u32 = 5;
/// Fixed clip length in samples.
pub const CLIP_SAMPLES: usize = (SAMPLE_RATE * CLIP_SECONDS) as usize;

/// Added to mel energies before the logarithm so silence stays finite.
pub const LOG_EPSILON: f64 = 1e-10;

/// Kaiser window shape parameter of the resampling filter.
pub const KAISER_BETA: f64 = 8.0;
/// Resampling filter half-width, counted in samples at the lower of the two rates.
pub const SINC_HALF_WIDTH: f64 = 32.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("unreadable file {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("unsupported encoding in {path}: {reason}")]
    UnsupportedEncoding { path: String, reason: String },
    #[error("zero-length audio in {path}")]
    ZeroLength { path: String },
    #[error("empty waveform")]
    Empty,
    #[error("expected sample rate {expected} Hz, got {actual} Hz")]
    WrongRate { expected: u32, actual: u32 },
    #[error("invalid sample rate {0}")]
    InvalidRate(u32),
    #[error("invalid log-mel configuration: {0}")]
    InvalidConfig(String),
    #[error("failed to write {path}: {reason}")]
    Write { path: String, reason: String },
}

/// Mono audio clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_id: String,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32, source_id: impl Into<String>) -> Self {
        Waveform {
            samples,
            sample_rate,
            source_id: source_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Writes the clip as mono 32-bit float WAV, which reloads bit-exactly.
    pub fn write_wav(&self, path: &Path) -> Result<(), AudioError> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let write_err = |e: hound::Error| AudioError::Write {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(write_err)?;
        for &s in &self.samples {
            writer.write_sample(s).map_err(write_err)?;
        }
        writer.finalize().map_err(write_err)
    }
}

/// Reads a PCM WAV file, averaging channels to mono and scaling integer
/// samples to [-1, 1]. The file's own sample rate is kept.
pub fn load_wav(path: &Path) -> Result<Waveform, AudioError> {
    let display = path.display().to_string();
    let reader = hound::WavReader::open(path).map_err(|e| classify_hound(&display, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(AudioError::UnsupportedEncoding {
            path: display,
            reason: "zero channels".into(),
        });
    }

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(|e| classify_hound(&display, e))?,
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(|e| classify_hound(&display, e))?
        }
        (format, bits) => {
            return Err(AudioError::UnsupportedEncoding {
                path: display,
                reason: format!("{format:?} with {bits} bits per sample"),
            })
        }
    };

    let frames = interleaved.len() / channels;
    if frames == 0 {
        return Err(AudioError::ZeroLength { path: display });
    }
    let samples = interleaved
        .chunks_exact(channels)
        .map(|frame| (frame.iter().sum::<f64>() / channels as f64) as f32)
        .collect();

    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Waveform::new(samples, spec.sample_rate, source_id))
}

fn classify_hound(path: &str, err: hound::Error) -> AudioError {
    match err {
        hound::Error::Unsupported => AudioError::UnsupportedEncoding {
            path: path.to_string(),
            reason: "unsupported WAV feature".into(),
        },
        other => AudioError::Unreadable {
            path: path.to_string(),
            reason: other.to_string(),
        },
    }
}

/// Band-limited resampling with a Kaiser-windowed sinc kernel.
///
/// The cutoff sits at the Nyquist frequency of the lower rate and the kernel
/// spans [`SINC_HALF_WIDTH`] samples of that rate on each side. Equal rates
/// return the input unchanged.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform, AudioError> {
    if w.sample_rate == 0 {
        return Err(AudioError::InvalidRate(w.sample_rate));
    }
    if target_rate == 0 {
        return Err(AudioError::InvalidRate(target_rate));
    }
    if w.sample_rate == target_rate {
        return Ok(w.clone());
    }

    let src = w.sample_rate as f64;
    let dst = target_rate as f64;
    let n_in = w.samples.len();
    let n_out = ((n_in as u64 * target_rate as u64 + w.sample_rate as u64 / 2)
        / w.sample_rate as u64) as usize;

    // Kernel expressed in input-sample units.
    let cutoff = (dst / src).min(1.0);
    let half_width = SINC_HALF_WIDTH / cutoff;
    let i0_beta = bessel_i0(KAISER_BETA);
    let step = src / dst;

    let samples = (0..n_out)
        .map(|j| {
            let t = j as f64 * step;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(n_in.saturating_sub(1));
            let mut acc = 0.0;
            for i in lo..=hi {
                let x = i as f64 - t;
                let u = x / half_width;
                if u.abs() > 1.0 {
                    continue;
                }
                let window = bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / i0_beta;
                acc += w.samples[i] as f64 * cutoff * sinc(cutoff * x) * window;
            }
            acc.clamp(-1.0, 1.0) as f32
        })
        .collect();

    Ok(Waveform::new(samples, target_rate, w.source_id.clone()))
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let half_sq = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= half_sq / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Fixes the clip to exactly [`CLIP_SAMPLES`]: short clips are tiled
/// (`out[i] = in[i % n]`), long clips keep their first five seconds.
pub fn standardize(w: &Waveform) -> Result<Waveform, AudioError> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(AudioError::WrongRate {
            expected: SAMPLE_RATE,
            actual: w.sample_rate,
        });
    }
    if w.samples.is_empty() {
        return Err(AudioError::Empty);
    }
    let samples = w.samples.iter().copied().cycle().take(CLIP_SAMPLES).collect();
    Ok(Waveform::new(samples, SAMPLE_RATE, w.source_id.clone()))
}

/// Full preprocessing chain for a file on disk.
pub fn load_standardized(path: &Path) -> Result<Waveform, AudioError> {
    let raw = load_wav(path)?;
    standardize(&resample(&raw, SAMPLE_RATE)?)
}

/// Log-mel configuration of the toy extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogMelConfig {
    pub n_mels: usize,
    pub frame_len: usize,
    pub hop: usize,
}

impl Default for LogMelConfig {
    /// 80 mels, 25 ms frames, 20 ms hop: 249 frames per five-second clip.
    fn default() -> Self {
        LogMelConfig {
            n_mels: 80,
            frame_len: 400,
            hop: 320,
        }
    }
}

impl LogMelConfig {
    pub fn num_frames(&self, len: usize) -> usize {
        (len - self.frame_len) / self.hop + 1
    }

    pub fn fft_len(&self) -> usize {
        self.frame_len.next_power_of_two()
    }
}

/// Tag attached to matrices produced by [`logmel`].
pub const LOGMEL_TAG: &str = "toy-logmel";

/// Log mel-band energies, one row per frame.
///
/// Frames are Hann-windowed, zero-padded to the next power of two and
/// transformed; the power spectrum is projected on triangular HTK-scale
/// filters spanning 0 Hz to Nyquist. No padding at the clip edges.
pub fn logmel(w: &Waveform, cfg: LogMelConfig) -> Result<EmbeddingMatrix, AudioError> {
    let LogMelConfig {
        n_mels,
        frame_len,
        hop,
    } = cfg;
    if n_mels == 0 {
        return Err(AudioError::InvalidConfig("n_mels must be at least 1".into()));
    }
    if hop == 0 || hop > frame_len {
        return Err(AudioError::InvalidConfig(format!(
            "need 0 < hop <= frame_len, got hop={hop} frame_len={frame_len}"
        )));
    }
    if frame_len > w.samples.len() {
        return Err(AudioError::InvalidConfig(format!(
            "frame_len {frame_len} exceeds waveform length {}",
            w.samples.len()
        )));
    }
    if w.sample_rate == 0 {
        return Err(AudioError::InvalidRate(0));
    }

    let n_fft = cfg.fft_len();
    let n_bins = n_fft / 2 + 1;
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(n_fft);
    let window = hann(frame_len);
    let filters = mel_filterbank(n_mels, n_fft, w.sample_rate as f64);

    let n_frames = cfg.num_frames(w.samples.len());
    let mut values = Vec::with_capacity(n_frames * n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0f64; n_bins];
    for f in 0..n_frames {
        let start = f * hop;
        for (k, slot) in buf.iter_mut().enumerate() {
            let re = if k < frame_len {
                w.samples[start + k] as f64 * window[k]
            } else {
                0.0
            };
            *slot = Complex::new(re, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for filter in &filters {
            let energy: f64 = filter
                .weights
                .iter()
                .zip(&power[filter.first_bin..])
                .map(|(wt, p)| wt * p)
                .sum();
            values.push((energy + LOG_EPSILON).ln());
        }
    }

    EmbeddingMatrix::new(n_frames, n_mels, values, LOGMEL_TAG)
        .map_err(|e| AudioError::InvalidConfig(e.to_string()))
}

fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

pub(crate) fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub(crate) fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

struct MelFilter {
    first_bin: usize,
    weights: Vec<f64>,
}

fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64) -> Vec<MelFilter> {
    let n_bins = n_fft / 2 + 1;
    let max_mel = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(max_mel * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate / n_fft as f64;

    (0..n_mels)
        .map(|m| {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let full: Vec<f64> = (0..n_bins)
                .map(|b| {
                    let f = b as f64 * bin_hz;
                    let rising = (f - lo) / (center - lo);
                    let falling = (hi - f) / (hi - center);
                    rising.min(falling).max(0.0)
                })
                .collect();
            let first = full.iter().position(|&v| v > 0.0).unwrap_or(0);
            let last = full.iter().rposition(|&v| v > 0.0).unwrap_or(0);
            MelFilter {
                first_bin: first,
                weights: full[first..=last].to_vec(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn write_int16(path: &Path, channels: u16, rate: u32, samples: &[i16]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    fn noise(n: usize, amp: f32, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n).map(|_| rng.gen_range(-amp..amp)).collect();
        Waveform::new(samples, SAMPLE_RATE, "noise")
    }

    #[test]
    fn int16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_int16(&p, 1, 16000, &[0, 16384, -32768]);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.samples, vec![0.0, 0.5, -1.0]);
        assert_eq!(w.sample_rate, 16000);
        assert_eq!(w.source_id, "a");
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 22050,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut wr = hound::WavWriter::create(&p, spec).unwrap();
        for _ in 0..4 {
            wr.write_sample(0.2f32).unwrap();
            wr.write_sample(0.6f32).unwrap();
        }
        wr.finalize().unwrap();
        let w = load_wav(&p).unwrap();
        assert_eq!(w.len(), 4);
        assert_eq!(w.sample_rate, 22050);
        for s in w.samples {
            assert!((s - 0.4).abs() < 1e-7);
        }
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.wav");
        write_int16(&empty, 1, 16000, &[]);
        assert!(matches!(load_wav(&empty), Err(AudioError::ZeroLength { .. })));

        let missing = dir.path().join("nope.wav");
        assert!(matches!(load_wav(&missing), Err(AudioError::Unreadable { .. })));

        let garbage = dir.path().join("garbage.wav");
        std::fs::write(&garbage, b"not a riff file at all").unwrap();
        assert!(matches!(load_wav(&garbage), Err(AudioError::Unreadable { .. })));
    }

    #[test]
    fn float_roundtrip_through_write_wav() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let w = noise(1000, 0.9, 3);
        w.write_wav(&p).unwrap();
        let back = load_wav(&p).unwrap();
        assert_eq!(back.samples, w.samples);
    }

    #[test]
    fn resample_identity_and_length() {
        let w = noise(1234, 0.5, 1);
        assert_eq!(resample(&w, SAMPLE_RATE).unwrap(), w);

        let low = Waveform::new(vec![0.1; 8000], 8000, "x");
        let up = resample(&low, 16000).unwrap();
        assert_eq!(up.len(), 16000);
        assert_eq!(up.sample_rate, 16000);

        let odd = Waveform::new(vec![0.0; 44100], 44100, "x");
        let down = resample(&odd, 16000).unwrap();
        assert!((down.duration_secs() - odd.duration_secs()).abs() <= 1.0 / 16000.0);
    }

    #[test]
    fn resample_rejects_zero_rates() {
        let w = Waveform::new(vec![0.0; 10], 0, "x");
        assert!(matches!(resample(&w, 16000), Err(AudioError::InvalidRate(0))));
        let w = Waveform::new(vec![0.0; 10], 8000, "x");
        assert!(matches!(resample(&w, 0), Err(AudioError::InvalidRate(0))));
    }

    #[test]
    fn sine_peak_survives_downsampling() {
        let src = 48_000;
        let samples: Vec<f32> = (0..src)
            .map(|n| (0.5 * (2.0 * PI * 440.0 * n as f64 / src as f64).sin()) as f32)
            .collect();
        let w = Waveform::new(samples, src as u32, "sine");
        let out = resample(&w, 16000).unwrap();
        assert_eq!(out.len(), 16000);

        // One-second signal: bin k is k Hz.
        let n = out.len();
        let mut buf: Vec<Complex<f64>> = out
            .samples
            .iter()
            .map(|&s| Complex::new(s as f64, 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let peak = (1..n / 2)
            .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
            .unwrap();
        assert!((peak as i64 - 440).abs() <= 1, "peak at bin {peak}");
    }

    #[test]
    fn standardize_tiles_short_input() {
        let samples: Vec<f32> = (0..32000).map(|i| i as f32 / 32000.0).collect();
        let w = Waveform::new(samples.clone(), SAMPLE_RATE, "s");
        let out = standardize(&w).unwrap();
        assert_eq!(out.len(), CLIP_SAMPLES);
        assert_eq!(out.samples[79999], samples[15999]);
    }

    #[test]
    fn standardize_exact_and_long() {
        let exact = noise(CLIP_SAMPLES, 0.5, 2);
        assert_eq!(standardize(&exact).unwrap(), exact);

        let long = noise(100_000, 0.5, 3);
        let out = standardize(&long).unwrap();
        assert_eq!(out.samples[..], long.samples[..CLIP_SAMPLES]);
    }

    #[test]
    fn standardize_errors() {
        let empty = Waveform::new(vec![], SAMPLE_RATE, "e");
        assert!(matches!(standardize(&empty), Err(AudioError::Empty)));
        let wrong = Waveform::new(vec![0.0; 10], 8000, "e");
        assert!(matches!(standardize(&wrong), Err(AudioError::WrongRate { .. })));
    }

    #[test]
    fn logmel_silence_is_log_epsilon() {
        let w = Waveform::new(vec![0.0; CLIP_SAMPLES], SAMPLE_RATE, "z");
        let m = logmel(&w, LogMelConfig::default()).unwrap();
        assert!(m.values().iter().all(|&v| v == LOG_EPSILON.ln()));
    }

    #[test]
    fn logmel_default_shape() {
        let w = noise(CLIP_SAMPLES, 0.3, 4);
        let m = logmel(&w, LogMelConfig::default()).unwrap();
        assert_eq!((m.rows(), m.cols()), ((80000 - 400) / 320 + 1, 80));
        assert_eq!(m.rows(), 249);
        assert_eq!(m.tag(), LOGMEL_TAG);
    }

    #[test]
    fn logmel_gain_shifts_by_log_four() {
        let w = noise(CLIP_SAMPLES, 0.25, 5);
        let doubled = Waveform::new(
            w.samples.iter().map(|s| s * 2.0).collect(),
            SAMPLE_RATE,
            "d",
        );
        let a = logmel(&w, LogMelConfig::default()).unwrap();
        let b = logmel(&doubled, LogMelConfig::default()).unwrap();
        let shift = 4f64.ln();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((y - x - shift).abs() < 1e-6, "{x} {y}");
        }
    }

    #[test]
    fn logmel_is_deterministic() {
        let w = noise(CLIP_SAMPLES, 0.3, 6);
        let a = logmel(&w, LogMelConfig::default()).unwrap();
        let b = logmel(&w, LogMelConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn logmel_rejects_bad_config() {
        let w = noise(1000, 0.3, 7);
        let bad = [
            LogMelConfig { n_mels: 0, frame_len: 400, hop: 320 },
            LogMelConfig { n_mels: 80, frame_len: 400, hop: 0 },
            LogMelConfig { n_mels: 80, frame_len: 400, hop: 401 },
            LogMelConfig { n_mels: 80, frame_len: 2000, hop: 320 },
        ];
        for cfg in bad {
            assert!(matches!(logmel(&w, cfg), Err(AudioError::InvalidConfig(_))), "{cfg:?}");
        }
    }
}

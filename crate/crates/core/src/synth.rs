//! Synthetic two-class corpus for smoke tests and demos.
//!
//! Every clip is Gaussian noise whose spectrum is split into bands equally
//! spaced on the mel scale. Each band gets its own log-gain drawn from
//! `N(mean, sigma)`; the fake class mean sits `separation` standard
//! deviations above the bona fide one in every band, so the log-mel
//! features form two well-separated blobs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::audio::{self, AudioError, Waveform, SAMPLE_RATE};
use crate::data::{DataError, DatasetManifest, Label, Partition, Utterance};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic corpus spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct BlobSpec {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_eval: usize,
    /// Share of fake clips in each partition.
    pub fake_fraction: f64,
    pub separation: f64,
    pub sigma: f64,
    pub bands: usize,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub dataset: String,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            n_train: 200,
            n_dev: 100,
            n_eval: 100,
            fake_fraction: 0.5,
            separation: 3.0,
            sigma: 0.5,
            bands: 16,
            min_seconds: 0.75,
            max_seconds: 1.5,
            dataset: "synth".into(),
            seed: 0,
        }
    }
}

impl BlobSpec {
    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(m.to_string()));
        if !(0.0..=1.0).contains(&self.fake_fraction) {
            return bad("fake_fraction must lie in [0, 1]");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) || !self.separation.is_finite() {
            return bad("sigma must be positive and separation finite");
        }
        if self.bands == 0 {
            return bad("bands must be at least 1");
        }
        if !(self.min_seconds > 0.0 && self.min_seconds <= self.max_seconds) {
            return bad("need 0 < min_seconds <= max_seconds");
        }
        if self.n_train + self.n_dev + self.n_eval == 0 {
            return bad("corpus would be empty");
        }
        Ok(())
    }
}

/// RMS of a bona fide clip whose band gains are all zero.
const BASE_RMS: f64 = 0.02;

/// Shapes white noise with per-band gains; `gains[b]` is the natural-log
/// amplitude gain of mel band `b`.
pub fn shaped_noise(gains: &[f64], len: usize, rng: &mut impl Rng) -> Vec<f32> {
    let nyquist_mel = audio::hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    let mut spectrum = vec![Complex::new(0.0f64, 0.0); len];
    let scale = BASE_RMS / (len as f64).sqrt();
    for k in 1..len.div_ceil(2) {
        let hz = k as f64 * SAMPLE_RATE as f64 / len as f64;
        let band = ((audio::hz_to_mel(hz) / nyquist_mel) * gains.len() as f64) as usize;
        let amp = scale * gains[band.min(gains.len() - 1)].exp();
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        spectrum[k] = Complex::new(re, im) * (amp / std::f64::consts::SQRT_2);
        spectrum[len - k] = spectrum[k].conj();
    }
    FftPlanner::new().plan_fft_inverse(len).process(&mut spectrum);
    spectrum
        .iter()
        .map(|c| c.re.clamp(-1.0, 1.0) as f32)
        .collect()
}

fn partition_plan(spec: &BlobSpec) -> Vec<(Partition, Label, usize)> {
    let mut plan = Vec::new();
    for (partition, n) in [
        (Partition::Train, spec.n_train),
        (Partition::Dev, spec.n_dev),
        (Partition::Eval, spec.n_eval),
    ] {
        let n_fake = (n as f64 * spec.fake_fraction).round() as usize;
        plan.extend((0..n - n_fake).map(|i| (partition, Label::Bonafide, i)));
        plan.extend((0..n_fake).map(|i| (partition, Label::Fake, i)));
    }
    plan
}

/// Writes the corpus as WAV files under `dir/<partition>/<label>/` and
/// returns its manifest. The same spec always yields identical files.
pub fn generate(dir: &Path, spec: &BlobSpec) -> Result<DatasetManifest, SynthError> {
    spec.validate()?;
    for p in Partition::ALL {
        for l in ["real", "fake"] {
            let sub = dir.join(p.as_str()).join(l);
            std::fs::create_dir_all(&sub).map_err(|source| SynthError::Io {
                path: sub.display().to_string(),
                source,
            })?;
        }
    }
    let gain = Normal::new(0.0, spec.sigma).map_err(|e| SynthError::Spec(e.to_string()))?;
    let plan = partition_plan(spec);
    let entries = plan
        .par_iter()
        .enumerate()
        .map(|(index, &(partition, label, i))| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(index as u64);
            let mean = if label.is_fake() {
                spec.separation * spec.sigma
            } else {
                0.0
            };
            let gains: Vec<f64> = (0..spec.bands)
                .map(|_| mean + gain.sample(&mut rng))
                .collect();
            let seconds = rng.gen_range(spec.min_seconds..=spec.max_seconds);
            let len = ((seconds * SAMPLE_RATE as f64) as usize).max(2);
            let class = if label.is_fake() { "fake" } else { "real" };
            let id = format!("{}-{class}-{i:04}", partition.as_str());
            let path = dir
                .join(partition.as_str())
                .join(class)
                .join(format!("{id}.wav"));
            Waveform::new(shaped_noise(&gains, len, &mut rng), SAMPLE_RATE, id.clone())
                .write_wav(&path)?;
            Ok(Utterance {
                id,
                path,
                label,
                dataset: spec.dataset.clone(),
                partition,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok(DatasetManifest::new(spec.dataset.clone(), entries)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_counts() {
        let spec = BlobSpec {
            n_train: 10,
            n_dev: 4,
            n_eval: 0,
            fake_fraction: 0.3,
            ..BlobSpec::default()
        };
        let plan = partition_plan(&spec);
        assert_eq!(plan.len(), 14);
        let train_fake = plan
            .iter()
            .filter(|(p, l, _)| *p == Partition::Train && l.is_fake())
            .count();
        assert_eq!(train_fake, 3);
    }

    #[test]
    fn gain_sets_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let quiet = shaped_noise(&[0.0; 4], 16_000, &mut rng);
        let loud = shaped_noise(&[1.0; 4], 16_000, &mut rng);
        let rms = |x: &[f32]| (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
        assert!((rms(&quiet) / BASE_RMS - 1.0).abs() < 0.05);
        assert!((rms(&loud) / rms(&quiet) - 1f64.exp()).abs() < 0.1);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = BlobSpec {
            n_train: 4,
            n_dev: 2,
            n_eval: 2,
            ..BlobSpec::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate(a.path(), &spec).unwrap();
        let mb = generate(b.path(), &spec).unwrap();
        assert_eq!(ma.len(), 8);
        assert_eq!(ma.split(Partition::Train).class_counts(), (2, 2));
        for (ua, ub) in ma.entries().iter().zip(mb.entries()) {
            assert_eq!(ua.id, ub.id);
            assert_eq!(std::fs::read(&ua.path).unwrap(), std::fs::read(&ub.path).unwrap());
        }
    }

    #[test]
    fn rejects_bad_spec() {
        let spec = BlobSpec {
            sigma: 0.0,
            ..BlobSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(generate(dir.path(), &spec), Err(SynthError::Spec(_))));
    }
}

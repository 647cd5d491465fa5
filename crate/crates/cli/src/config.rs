//! Run configuration: a TOML file with one section per pipeline stage,
//! overridden by command-line flags, resolved fully before any work starts.
//!
//! ```toml
//! [data]
//! train = "corpus/manifest.csv"   # train partition is read from here
//! dev = "corpus/manifest.csv"     # dev partition; defaults to `train`
//!
//! [embedding]
//! provider = "toy"                # or "file"
//! tag = "whisper-small"           # file provider only
//!
//! [head]
//! architecture = "wav2vec"        # or "whisper"
//! num_layers = 1
//!
//! [trainer]
//! seed = 0
//!
//! [cli]
//! out = "runs/toy"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spoofprobe::embedding::{EmbeddingProvider, FileProvider, ToyProvider};
use spoofprobe::trainer::TrainConfig;
use spoofprobe::Architecture;

use crate::error::{io_error, CliError};

/// File name of the resolved configuration written next to run outputs.
pub const RESOLVED_NAME: &str = "config.resolved.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Toy,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Whisper,
    #[default]
    Wav2vec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub provider: ProviderKind,
    pub tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    pub architecture: HeadKind,
    pub num_layers: usize,
}

impl Default for HeadSection {
    fn default() -> Self {
        HeadSection {
            architecture: HeadKind::default(),
            num_layers: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliSection {
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub embedding: EmbeddingSection,
    pub head: HeadSection,
    pub trainer: TrainConfig,
    pub cli: CliSection,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| e.context(path.display()))?;
        let base = std::path::absolute(path.parent().unwrap_or(Path::new(".")))
            .map_err(|e| io_error(path, e))?;
        for p in [
            &mut cfg.data.train,
            &mut cfg.data.dev,
            &mut cfg.cli.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(seed) = o.seed {
            self.trainer.seed = seed;
        }
        if let Some(out) = &o.out {
            self.cli.out = Some(std::path::absolute(out).map_err(|e| io_error(out, e))?);
        }
        Ok(())
    }

    /// Everything `train` needs, checked up front.
    pub fn validate_for_training(&mut self) -> Result<(), CliError> {
        self.trainer.validate()?;
        if self.data.train.is_none() {
            return Err(CliError::Usage("config has no [data] train manifest".into()));
        }
        if self.data.dev.is_none() {
            self.data.dev = self.data.train.clone();
        }
        if self.cli.out.is_none() {
            return Err(CliError::Usage(
                "no output directory (set [cli] out or pass --out)".into(),
            ));
        }
        if self.head.num_layers == 0 {
            return Err(CliError::Usage("[head] num_layers must be at least 1".into()));
        }
        if self.head.architecture == HeadKind::Whisper && self.head.num_layers != 1 {
            return Err(CliError::Usage(
                "the whisper head takes a single embedding matrix (num_layers = 1)".into(),
            ));
        }
        self.provider()?;
        Ok(())
    }

    pub fn provider(&self) -> Result<Box<dyn EmbeddingProvider>, CliError> {
        match self.embedding.provider {
            ProviderKind::Toy => Ok(Box::new(ToyProvider::default())),
            ProviderKind::File => {
                let tag = self.embedding.tag.as_deref().ok_or_else(|| {
                    CliError::Usage("[embedding] tag is required for the file provider".into())
                })?;
                Ok(Box::new(FileProvider::for_tag(tag)?))
            }
        }
    }

    pub fn architecture(&self, input_dim: usize) -> Architecture {
        match self.head.architecture {
            HeadKind::Whisper => Architecture::whisper(input_dim),
            HeadKind::Wav2vec => Architecture::wav2vec(input_dim, self.head.num_layers),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }
}

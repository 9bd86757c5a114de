//! Application configuration: one TOML document with a section per
//! component, plus `section.key=value` command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{hex, sha256, CodecConfig};
use crate::discriminators::DiscriminatorConfig;
use crate::error::{bail, Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;
use crate::quantizer::{CodebookSpec, CODE_DIM};
use crate::stft::StftConfig;
use crate::train::TrainConfig;

pub const CONFIG_ENV: &str = "STFTCODEC_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerSection {
    pub num_codebooks: usize,
    /// Use the variable-size ladder instead of 1024 codewords per stage.
    pub variable_sizes: bool,
    /// Explicit sizes; overrides the two options above when non-empty.
    pub sizes: Vec<usize>,
    pub code_dim: usize,
}

impl Default for QuantizerSection {
    fn default() -> Self {
        Self {
            num_codebooks: 8,
            variable_sizes: false,
            sizes: Vec::new(),
            code_dim: CODE_DIM,
        }
    }
}

impl QuantizerSection {
    pub fn spec(&self, input_dim: usize) -> Result<CodebookSpec> {
        let spec = if !self.sizes.is_empty() {
            if self.sizes.len() != self.num_codebooks {
                bail!(
                    Config,
                    "quantizer.sizes has {} entries but quantizer.num_codebooks is {}",
                    self.sizes.len(),
                    self.num_codebooks
                );
            }
            CodebookSpec::custom(self.sizes.clone())?
        } else if self.variable_sizes {
            CodebookSpec::variable(self.num_codebooks)?
        } else {
            CodebookSpec::uniform(self.num_codebooks)?
        };
        let spec = CodebookSpec {
            code_dim: self.code_dim,
            ..spec.with_input_dim(input_dim)
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub stft: StftConfig,
    pub generator: GeneratorConfig,
    pub quantizer: QuantizerSection,
    pub discriminator: DiscriminatorConfig,
    pub losses: LossWeights,
    pub train: TrainConfig,
}

/// Component configurations after ablation flags have been applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub codec: CodecConfig,
    pub discriminator: DiscriminatorConfig,
    pub losses: LossWeights,
    pub train: TrainConfig,
    pub single_scale_mel: bool,
}

impl AppConfig {
    /// Small widths for CPU runs; same structure as the reference model.
    pub fn toy() -> Self {
        Self {
            generator: GeneratorConfig::toy(),
            discriminator: DiscriminatorConfig::toy(),
            train: TrainConfig {
                batch_size: 4,
                lr: 1e-3,
                max_steps: 500,
                checkpoint_every: 500,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let a = self.train.ablation;
        let mut generator = self.generator.clone();
        if a.no_unwrap {
            generator.use_phase_gradient = false;
        }
        if a.no_convnext {
            generator.ablation_use_convnext = false;
        }
        let quantizer = self.quantizer.spec(generator.latent_channels)?;
        let codec = CodecConfig {
            stft: self.stft,
            generator,
            quantizer,
        };
        codec.validate()?;
        let mut discriminator = self.discriminator.clone();
        if a.single_scale_disc {
            discriminator = discriminator.single_scale();
        }
        discriminator.validate()?;
        let mut losses = self.losses.clone();
        if a.spectral_recon {
            losses.spectral_recon_enabled = true;
        }
        losses.validate()?;
        self.train.validate()?;
        if self.train.sample_rate != self.stft.sample_rate {
            bail!(
                Config,
                "train.sample_rate ({}) differs from stft.sample_rate ({})",
                self.train.sample_rate,
                self.stft.sample_rate
            );
        }
        if self.train.chunk_samples % self.stft.hop_length != 0 {
            bail!(
                Config,
                "train.chunk_samples ({}) must be a multiple of stft.hop_length ({})",
                self.train.chunk_samples,
                self.stft.hop_length
            );
        }
        Ok(ResolvedConfig {
            codec,
            discriminator,
            losses,
            train: self.train.clone(),
            single_scale_mel: a.single_scale_disc,
        })
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let schema = toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        check_keys(&doc, &schema, "")?;
        for o in overrides {
            apply_override(&mut doc, &schema, o)?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Reads `path`, or starts from defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&sha256(self.to_toml()?.as_bytes())))
    }
}

fn check_keys(doc: &toml::Table, schema: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in doc {
        let path = format!("{prefix}{k}");
        match schema.get(k) {
            None => bail!(Config, "unknown configuration key `{path}`"),
            Some(toml::Value::Table(s)) => match v {
                toml::Value::Table(t) => check_keys(t, s, &format!("{path}."))?,
                _ => bail!(Config, "`{path}` must be a table"),
            },
            Some(_) => {}
        }
    }
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `dotted.key=value`; the key must exist in the schema.
pub fn apply_override(doc: &mut toml::Table, schema: &toml::Table, item: &str) -> Result<()> {
    let Some((key, raw)) = item.split_once('=') else {
        bail!(Config, "override `{item}` is not of the form key=value");
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut s = schema;
    let mut d = doc;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        match s.get(*part) {
            None => bail!(Config, "unknown configuration key `{}`", key.trim()),
            Some(toml::Value::Table(sub)) if !last => {
                s = sub;
                let entry = d
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                d = match entry {
                    toml::Value::Table(t) => t,
                    _ => bail!(Config, "`{part}` must be a table"),
                };
            }
            Some(toml::Value::Table(_)) => bail!(Config, "`{}` is a section, not a value", key.trim()),
            Some(_) if !last => bail!(Config, "unknown configuration key `{}`", key.trim()),
            Some(_) => {
                d.insert(part.to_string(), parse_value(raw.trim()));
            }
        }
    }
    Ok(())
}

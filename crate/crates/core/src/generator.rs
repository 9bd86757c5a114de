//! Dual-branch encoder and phase-aware decoder.
//!
//! The encoder embeds the log-magnitude, phase and phase-gradient streams
//! separately, refines each with ConvNeXt-V2 blocks, concatenates them into
//! the latent width and downsamples time by 8 with residual blocks, strided
//! convolutions and self-attention. The decoder mirrors the downsampling
//! path, then splits into a magnitude head (log-magnitude) and a phase head
//! (real and imaginary parts whose angle is the phase).

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::layers::{Conv1d, ConvSpec, ConvTranspose1d, FeatureBlock, LayerNorm, ResBlock, SelfAttention};
use crate::nn::ops::atan2;
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSite {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub freq_bins: usize,
    pub mag_channels: usize,
    pub phase_channels: usize,
    pub grad_channels: usize,
    pub latent_channels: usize,
    pub downsample_stages: usize,
    pub convnext_blocks_enc: usize,
    pub convnext_blocks_dec: usize,
    pub decoder_head_channels: usize,
    pub kernel_size: usize,
    pub expansion: usize,
    pub attention: bool,
    pub attention_placement: Vec<AttentionSite>,
    /// `false` swaps every ConvNeXt block for a residual block of equal width.
    pub ablation_use_convnext: bool,
    /// `false` feeds an all-zero phase-gradient stream (no unwrapping).
    pub use_phase_gradient: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            freq_bins: 513,
            mag_channels: 256,
            phase_channels: 128,
            grad_channels: 128,
            latent_channels: 512,
            downsample_stages: 3,
            convnext_blocks_enc: 2,
            convnext_blocks_dec: 4,
            decoder_head_channels: 256,
            kernel_size: 7,
            expansion: 3,
            attention: true,
            attention_placement: vec![AttentionSite::Encoder, AttentionSite::Decoder],
            ablation_use_convnext: true,
            use_phase_gradient: true,
        }
    }
}

impl GeneratorConfig {
    /// Reduced widths and block counts for CPU-scale training runs.
    pub fn toy() -> Self {
        Self {
            mag_channels: 32,
            phase_channels: 16,
            grad_channels: 16,
            latent_channels: 64,
            convnext_blocks_enc: 1,
            convnext_blocks_dec: 1,
            decoder_head_channels: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mag_channels + self.phase_channels + self.grad_channels != self.latent_channels {
            bail!(
                Config,
                "generator: mag_channels + phase_channels + grad_channels ({} + {} + {}) must equal latent_channels ({})",
                self.mag_channels,
                self.phase_channels,
                self.grad_channels,
                self.latent_channels
            );
        }
        if self.downsample_stages != 3 {
            bail!(
                Config,
                "generator.downsample_stages must be 3 (total downsampling 8), got {}",
                self.downsample_stages
            );
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            bail!(Config, "generator.kernel_size must be odd, got {}", self.kernel_size);
        }
        if self.freq_bins == 0 || self.decoder_head_channels == 0 || self.expansion == 0 {
            bail!(Config, "generator: channel counts must be positive");
        }
        Ok(())
    }

    pub fn downsample_ratio(&self) -> usize {
        1 << self.downsample_stages
    }

    pub fn latent_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.downsample_ratio())
    }

    fn attention_at(&self, site: AttentionSite) -> bool {
        self.attention && self.attention_placement.contains(&site)
    }
}

/// Encoder output, `[batch, frames', channels]`, at `1/8` the STFT frame rate.
#[derive(Debug, Clone)]
pub struct LatentSequence {
    pub values: Tensor,
    pub frame_rate: f64,
}

impl LatentSequence {
    pub fn num_frames(&self) -> usize {
        self.values.dim(1).unwrap_or(0)
    }

    pub fn channels(&self) -> usize {
        self.values.dim(2).unwrap_or(0)
    }
}

/// Decoder predictions, each `[batch, frames, bins]`.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub log_magnitude: Tensor,
    pub real_part: Tensor,
    pub imag_part: Tensor,
    pub phase: Tensor,
}

/// Phase from predicted real and imaginary parts; codomain `(-π, π]`.
pub fn phase_from_components(real: &Tensor, imag: &Tensor) -> Result<Tensor> {
    Ok(atan2(imag, real)?)
}

/// Intermediate encoder activations, kept for inspection.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub magnitude_branch: Tensor,
    pub phase_branch: Tensor,
    pub gradient_branch: Tensor,
    pub concatenated: Tensor,
}

struct DownStage {
    res: ResBlock,
    down: Conv1d,
    attn: Option<SelfAttention>,
}

struct Branch {
    embed: Conv1d,
    blocks: Vec<FeatureBlock>,
}

impl Branch {
    fn new(store: &mut ParamStore, name: &str, cfg: &GeneratorConfig, channels: usize) -> Result<Self> {
        let embed = Conv1d::new(
            store,
            &format!("{name}.embed"),
            cfg.freq_bins,
            channels,
            ConvSpec::same(cfg.kernel_size),
            false,
        )?;
        let blocks = (0..cfg.convnext_blocks_enc)
            .map(|i| {
                FeatureBlock::new(
                    store,
                    &format!("{name}.blocks.{i}"),
                    channels,
                    cfg.ablation_use_convnext,
                    cfg.kernel_size,
                    cfg.expansion,
                )
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { embed, blocks })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = self.embed.forward(x)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h)
    }
}

pub struct Encoder {
    cfg: GeneratorConfig,
    magnitude: Branch,
    phase: Branch,
    gradient: Branch,
    stages: Vec<DownStage>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.latent_channels;
        let stages = (0..cfg.downsample_stages)
            .map(|i| -> Result<DownStage> {
                let p = format!("{name}.down.{i}");
                Ok(DownStage {
                    res: ResBlock::new(store, &format!("{p}.res"), c)?,
                    down: Conv1d::new(store, &format!("{p}.conv"), c, c, ConvSpec::strided(4, 2, 1), false)?,
                    attn: if cfg.attention_at(AttentionSite::Encoder) {
                        Some(SelfAttention::new(store, &format!("{p}.attn"), c)?)
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            magnitude: Branch::new(store, &format!("{name}.magnitude"), cfg, cfg.mag_channels)?,
            phase: Branch::new(store, &format!("{name}.phase"), cfg, cfg.phase_channels)?,
            gradient: Branch::new(store, &format!("{name}.gradient"), cfg, cfg.grad_channels)?,
            stages,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// True when every refinement block is a ConvNeXt block (false under the
    /// residual-block ablation).
    pub fn uses_convnext(&self) -> bool {
        [&self.magnitude, &self.phase, &self.gradient]
            .iter()
            .flat_map(|b| b.blocks.iter())
            .all(FeatureBlock::is_convnext)
    }

    /// Inputs are `[batch, frames, bins]` streams; output `[batch,
    /// ceil(frames / 8), latent_channels]`.
    pub fn forward(&self, log_mag: &Tensor, phase: &Tensor, grad: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(log_mag, phase, grad)?.0)
    }

    pub fn forward_traced(
        &self,
        log_mag: &Tensor,
        phase: &Tensor,
        grad: &Tensor,
    ) -> Result<(Tensor, EncoderTrace)> {
        for (name, t) in [("log-magnitude", log_mag), ("phase", phase), ("phase gradient", grad)] {
            let (_, _, k) = t.dims3()?;
            if k != self.cfg.freq_bins {
                bail!(Shape, "{name} stream has {k} bins, generator expects {}", self.cfg.freq_bins);
            }
        }
        if log_mag.dims() != phase.dims() || log_mag.dims() != grad.dims() {
            bail!(Shape, "input streams disagree: {:?} / {:?} / {:?}", log_mag.dims(), phase.dims(), grad.dims());
        }
        let frames = log_mag.dim(1)?;
        if frames == 0 {
            bail!(InvalidInput, "cannot encode zero frames");
        }
        let m = self.magnitude.forward(log_mag)?;
        let p = self.phase.forward(phase)?;
        let g = self.gradient.forward(grad)?;
        let concatenated = Tensor::cat(&[&m, &p, &g], D::Minus1)?;

        let ratio = self.cfg.downsample_ratio();
        let padded = frames.div_ceil(ratio) * ratio;
        let mut h = if padded > frames {
            concatenated.pad_with_same(1, 0, padded - frames)?
        } else {
            concatenated.clone()
        };
        for stage in &self.stages {
            h = stage.res.forward(&h)?;
            h = stage.down.forward(&h)?;
            if let Some(attn) = &stage.attn {
                h = attn.forward(&h)?;
            }
        }
        Ok((
            h,
            EncoderTrace {
                magnitude_branch: m,
                phase_branch: p,
                gradient_branch: g,
                concatenated,
            },
        ))
    }
}

struct UpStage {
    res: ResBlock,
    up: ConvTranspose1d,
    attn: Option<SelfAttention>,
}

struct Head {
    input: Conv1d,
    blocks: Vec<FeatureBlock>,
    norm: LayerNorm,
}

impl Head {
    fn new(store: &mut ParamStore, name: &str, cfg: &GeneratorConfig) -> Result<Self> {
        let c = cfg.decoder_head_channels;
        Ok(Self {
            input: Conv1d::new(
                store,
                &format!("{name}.input"),
                cfg.latent_channels,
                c,
                ConvSpec::same(cfg.kernel_size),
                false,
            )?,
            blocks: (0..cfg.convnext_blocks_dec)
                .map(|i| {
                    FeatureBlock::new(
                        store,
                        &format!("{name}.blocks.{i}"),
                        c,
                        cfg.ablation_use_convnext,
                        cfg.kernel_size,
                        cfg.expansion,
                    )
                })
                .collect::<candle_core::Result<Vec<_>>>()?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), c)?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = self.input.forward(x)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        self.norm.forward(&h)
    }
}

pub struct Decoder {
    cfg: GeneratorConfig,
    stages: Vec<UpStage>,
    magnitude: Head,
    magnitude_out: Conv1d,
    phase: Head,
    phase_linear: Conv1d,
    real_out: Conv1d,
    imag_out: Conv1d,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.latent_channels;
        let hc = cfg.decoder_head_channels;
        let stages = (0..cfg.downsample_stages)
            .map(|i| -> Result<UpStage> {
                let p = format!("{name}.up.{i}");
                Ok(UpStage {
                    res: ResBlock::new(store, &format!("{p}.res"), c)?,
                    up: ConvTranspose1d::new(store, &format!("{p}.conv"), c, c, 4, 2, 1)?,
                    attn: if cfg.attention_at(AttentionSite::Decoder) {
                        Some(SelfAttention::new(store, &format!("{p}.attn"), c)?)
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = ConvSpec::same(cfg.kernel_size);
        Ok(Self {
            stages,
            magnitude: Head::new(store, &format!("{name}.magnitude"), cfg)?,
            magnitude_out: Conv1d::linear(store, &format!("{name}.magnitude.out"), hc, cfg.freq_bins)?,
            phase: Head::new(store, &format!("{name}.phase"), cfg)?,
            phase_linear: Conv1d::linear(store, &format!("{name}.phase.linear"), hc, hc)?,
            real_out: Conv1d::new(store, &format!("{name}.phase.real"), hc, cfg.freq_bins, spec, false)?,
            imag_out: Conv1d::new(store, &format!("{name}.phase.imag"), hc, cfg.freq_bins, spec, false)?,
            cfg: cfg.clone(),
        })
    }

    pub fn uses_convnext(&self) -> bool {
        self.magnitude
            .blocks
            .iter()
            .chain(&self.phase.blocks)
            .all(FeatureBlock::is_convnext)
    }

    /// `latent`: `[batch, frames', latent_channels]`. Restores `8 * frames'`
    /// frames and crops to `target_frames`.
    pub fn forward(&self, latent: &Tensor, target_frames: usize) -> Result<DecoderOutput> {
        let (_, frames, c) = latent.dims3()?;
        if c != self.cfg.latent_channels {
            bail!(Shape, "latent has {c} channels, decoder expects {}", self.cfg.latent_channels);
        }
        let available = frames * self.cfg.downsample_ratio();
        if target_frames > available {
            bail!(
                InvalidInput,
                "target of {target_frames} frames exceeds the {available} frames restorable from {frames} latent frames"
            );
        }
        if target_frames == 0 {
            bail!(InvalidInput, "target_frames must be positive");
        }
        let mut h = latent.clone();
        for stage in &self.stages {
            h = stage.res.forward(&h)?;
            h = stage.up.forward(&h)?;
            if let Some(attn) = &stage.attn {
                h = attn.forward(&h)?;
            }
        }
        let h = h.narrow(1, 0, target_frames)?;
        let log_magnitude = self.magnitude_out.forward(&self.magnitude.forward(&h)?)?;
        let ph = self.phase_linear.forward(&self.phase.forward(&h)?)?;
        let real_part = self.real_out.forward(&ph)?;
        let imag_part = self.imag_out.forward(&ph)?;
        let phase = phase_from_components(&real_part, &imag_part)?;
        Ok(DecoderOutput {
            log_magnitude,
            real_part,
            imag_part,
            phase,
        })
    }
}

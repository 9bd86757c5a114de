//! The full codec: analysis, encoder, quantizer, decoder and synthesis.

use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::CheckpointFile;
use crate::error::{bail, Error, Result};
use crate::generator::{Decoder, DecoderOutput, Encoder, GeneratorConfig, LatentSequence};
use crate::nn::spectral::InverseStft;
use crate::nn::ParamStore;
use crate::quantizer::{CodebookSpec, QuantizeResult, Quantizer, TokenMatrix};
use crate::stft::{analyze_features, StftConfig};

/// Upper bound on predicted log-magnitude before exponentiation (|X| <= 100).
pub const LOG_MAGNITUDE_CEILING: f64 = 4.605_170_185_988_092;

pub const GENERATOR_PREFIX: &str = "generator/";
pub const CONFIG_KEY: &str = "codec_config";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub stft: StftConfig,
    pub generator: GeneratorConfig,
    pub quantizer: CodebookSpec,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            generator: GeneratorConfig::default(),
            quantizer: CodebookSpec::default(),
        }
    }
}

impl CodecConfig {
    pub fn toy() -> Self {
        let generator = GeneratorConfig::toy();
        Self {
            quantizer: CodebookSpec::default().with_input_dim(generator.latent_channels),
            generator,
            stft: StftConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.generator.validate()?;
        self.quantizer.validate()?;
        if self.generator.freq_bins != self.stft.num_bins() {
            bail!(
                Config,
                "generator.freq_bins ({}) must equal fft_size / 2 + 1 ({})",
                self.generator.freq_bins,
                self.stft.num_bins()
            );
        }
        if self.quantizer.input_dim != self.generator.latent_channels {
            bail!(
                Config,
                "quantizer.input_dim ({}) must equal generator.latent_channels ({})",
                self.quantizer.input_dim,
                self.generator.latent_channels
            );
        }
        if self.stft.win_length % self.stft.hop_length != 0 {
            bail!(
                Config,
                "stft.hop_length ({}) must divide stft.win_length ({})",
                self.stft.hop_length,
                self.stft.win_length
            );
        }
        Ok(())
    }

    pub fn latent_frame_rate(&self) -> f64 {
        self.stft.sample_rate as f64 / (self.stft.hop_length * self.generator.downsample_ratio()) as f64
    }

    /// Analysis frames and latent frames used for `num_samples` of audio
    /// (inputs shorter than one window are zero-padded to a window).
    pub fn frame_counts(&self, num_samples: usize) -> (usize, usize) {
        if num_samples == 0 {
            return (0, 0);
        }
        let m = self.stft.num_frames(num_samples.max(self.stft.win_length));
        (m, self.generator.latent_frames(m))
    }
}

/// Encoder input streams, each `[batch, frames, bins]`.
#[derive(Debug, Clone)]
pub struct SpectralInputs {
    pub log_magnitude: Tensor,
    pub phase: Tensor,
    pub phase_gradient: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Reconstruction `[batch, samples]`.
    pub audio: Tensor,
    pub inputs: SpectralInputs,
    pub latent: LatentSequence,
    pub quantized: QuantizeResult,
    pub decoded: DecoderOutput,
}

pub struct CodecModel {
    config: CodecConfig,
    store: ParamStore,
    encoder: Encoder,
    quantizer: Quantizer,
    decoder: Decoder,
    istft: InverseStft,
}

fn frames_major(a: &Array2<f64>, out: &mut Vec<f32>) {
    for m in 0..a.ncols() {
        out.extend(a.column(m).iter().map(|&v| v as f32));
    }
}

impl CodecModel {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: CodecConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::with_dtype(seed, dtype);
        let encoder = Encoder::new(&mut store, "encoder", &config.generator)?;
        let quantizer = Quantizer::new(&mut store, "quantizer", &config.quantizer)?;
        let decoder = Decoder::new(&mut store, "decoder", &config.generator)?;
        let istft = InverseStft::new(config.stft)?;
        Ok(Self {
            config,
            store,
            encoder,
            quantizer,
            decoder,
            istft,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn quantizer(&self) -> &Quantizer {
        &self.quantizer
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// First 16 bytes of the SHA-256 parameter digest.
    pub fn model_hash(&self) -> Result<[u8; 16]> {
        let d = self.store.digest()?;
        let mut out = [0u8; 16];
        out.copy_from_slice(&d[..16]);
        Ok(out)
    }

    /// Spectral streams for equal-length items. With the phase-gradient
    /// stream disabled its tensor is all zeros.
    pub fn spectral_inputs(&self, batch: &[Vec<f64>]) -> Result<SpectralInputs> {
        let Some(first) = batch.first() else {
            bail!(InvalidInput, "empty batch");
        };
        let len = first.len();
        if batch.iter().any(|x| x.len() != len) {
            bail!(InvalidInput, "batch items have different lengths");
        }
        let k = self.config.stft.num_bins();
        let m = self.config.stft.num_frames(len);
        let (mut mag, mut phase, mut grad) = (Vec::new(), Vec::new(), Vec::new());
        for x in batch {
            let f = analyze_features(x, &self.config.stft)?;
            frames_major(&f.log_magnitude, &mut mag);
            frames_major(&f.phase, &mut phase);
            frames_major(&f.phase_gradient, &mut grad);
        }
        let b = batch.len();
        let dev = self.store.device();
        let dtype = self.store.dtype();
        let t = |v: Vec<f32>| -> Result<Tensor> { Ok(Tensor::from_vec(v, (b, m, k), dev)?.to_dtype(dtype)?) };
        let phase_gradient = if self.config.generator.use_phase_gradient {
            t(grad)?
        } else {
            Tensor::zeros((b, m, k), dtype, dev)?
        };
        Ok(SpectralInputs {
            log_magnitude: t(mag)?,
            phase: t(phase)?,
            phase_gradient,
        })
    }

    pub fn encode_inputs(&self, inputs: &SpectralInputs) -> Result<LatentSequence> {
        let values = self
            .encoder
            .forward(&inputs.log_magnitude, &inputs.phase, &inputs.phase_gradient)?;
        Ok(LatentSequence {
            values,
            frame_rate: self.config.latent_frame_rate(),
        })
    }

    /// Complex spectrum `|X| e^{jφ}` from the decoder, through the inverse
    /// STFT, `[batch, out_len]`.
    pub fn synthesize(&self, decoded: &DecoderOutput, out_len: usize) -> Result<Tensor> {
        let mag = decoded.log_magnitude.minimum(LOG_MAGNITUDE_CEILING)?.exp()?;
        let re = (&mag * decoded.phase.cos()?)?;
        let im = (&mag * decoded.phase.sin()?)?;
        Ok(self.istft.forward(&re, &im, out_len)?)
    }

    /// Differentiable analysis-encode-quantize-decode-synthesis of `[batch,
    /// samples]` audio, using the first `active` codebooks.
    pub fn forward_with(&self, audio: &Tensor, active: usize) -> Result<ForwardOutput> {
        let (_, t) = audio.dims2()?;
        let batch: Vec<Vec<f64>> = audio.to_dtype(DType::F64)?.to_vec2()?;
        let inputs = self.spectral_inputs(&batch)?;
        let frames = inputs.log_magnitude.dim(1)?;
        let latent = self.encode_inputs(&inputs)?;
        let quantized = self.quantizer.quantize_stages(&latent.values, active)?;
        let decoded = self.decoder.forward(&quantized.straight_through, frames)?;
        let audio = self.synthesize(&decoded, t)?;
        Ok(ForwardOutput {
            audio,
            inputs,
            latent,
            quantized,
            decoded,
        })
    }

    pub fn forward(&self, audio: &Tensor) -> Result<ForwardOutput> {
        self.forward_with(audio, self.config.quantizer.num_codebooks)
    }

    fn padded(&self, audio: &[f64]) -> Vec<f64> {
        let mut x = audio.to_vec();
        if x.len() < self.config.stft.win_length {
            x.resize(self.config.stft.win_length, 0.0);
        }
        x
    }

    /// Tokens for one signal using the first `active` codebooks. Empty audio
    /// gives an empty token matrix.
    pub fn encode(&self, audio: &[f64], active: usize) -> Result<TokenMatrix> {
        if active == 0 || active > self.config.quantizer.num_codebooks {
            bail!(
                InvalidInput,
                "{active} codebooks requested; the model has {}",
                self.config.quantizer.num_codebooks
            );
        }
        if audio.is_empty() {
            return Ok(TokenMatrix::zeros(active, 0));
        }
        if let Some(i) = audio.iter().position(|v| !v.is_finite()) {
            bail!(InvalidInput, "non-finite sample at index {i}");
        }
        let inputs = self.spectral_inputs(&[self.padded(audio)])?;
        let latent = self.encode_inputs(&inputs)?;
        let q = self.quantizer.quantize_stages(&latent.values, active)?;
        Ok(q.tokens.into_iter().next().expect("one item"))
    }

    /// Audio of exactly `num_samples` samples from tokens.
    pub fn decode(&self, tokens: &TokenMatrix, num_samples: usize) -> Result<Vec<f64>> {
        let (m, latent_frames) = self.config.frame_counts(num_samples);
        if tokens.num_frames() != latent_frames {
            bail!(
                Corrupt,
                "{} latent frames cannot describe {num_samples} samples (expected {latent_frames})",
                tokens.num_frames()
            );
        }
        if num_samples == 0 {
            return Ok(Vec::new());
        }
        let q = self.quantizer.dequantize(tokens)?;
        let decoded = self.decoder.forward(&q, m)?;
        let len = num_samples.max(self.config.stft.win_length);
        let y = self.synthesize(&decoded, len)?;
        let mut y: Vec<f64> = y.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?;
        y.truncate(num_samples);
        Ok(y)
    }

    pub fn to_checkpoint(&self, file: &mut CheckpointFile) -> Result<()> {
        file.metadata.insert(
            CONFIG_KEY.into(),
            serde_json::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?,
        );
        file.insert_group(GENERATOR_PREFIX, self.store.tensors());
        Ok(())
    }

    pub fn from_checkpoint(file: &CheckpointFile) -> Result<Self> {
        let config: CodecConfig = serde_json::from_str(file.meta(CONFIG_KEY)?)
            .map_err(|e| Error::Corrupt(format!("codec config in checkpoint: {e}")))?;
        let model = Self::new(config, 0)?;
        model.store.load(&file.group(GENERATOR_PREFIX))?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = CheckpointFile::default();
        self.to_checkpoint(&mut file)?;
        file.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&CheckpointFile::read(path)?)
    }
}

/// Hex rendering of a hash.
pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a byte string.
pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

//! Training objectives.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::discriminators::DiscriminatorOutput;
use crate::error::{bail, Result};
use crate::nn::ops::{mean_abs, scalar, wrap_phase};
use crate::nn::spectral::MelTransform;

pub const LOG_MEL_FLOOR: f64 = 1e-5;
const FEATURE_SCALE_FLOOR: f64 = 1e-8;

/// One mel-loss resolution: window length, hop and number of mel bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MelScale {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
}

pub const MEL_SCALES: [MelScale; 2] = [
    MelScale {
        n_fft: 2048,
        hop: 512,
        n_mels: 128,
    },
    MelScale {
        n_fft: 512,
        hop: 128,
        n_mels: 64,
    },
];

/// Sum over resolutions of L1 distance between mel spectrograms plus L1
/// distance between log-mel spectrograms.
#[derive(Debug, Clone)]
pub struct MelLoss {
    transforms: Vec<MelTransform>,
}

impl MelLoss {
    pub fn new(sample_rate: u32, scales: &[MelScale], device: &Device) -> Result<Self> {
        let transforms = scales
            .iter()
            .map(|s| MelTransform::new(sample_rate, s.n_fft, s.hop, s.n_mels, device))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { transforms })
    }

    pub fn multi_scale(sample_rate: u32, device: &Device) -> Result<Self> {
        Self::new(sample_rate, &MEL_SCALES, device)
    }

    pub fn single_scale(sample_rate: u32, device: &Device) -> Result<Self> {
        Self::new(sample_rate, &MEL_SCALES[..1], device)
    }

    pub fn num_scales(&self) -> usize {
        self.transforms.len()
    }

    /// `x`, `x_hat`: `[batch, samples]`.
    pub fn forward(&self, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        if x.dims() != x_hat.dims() {
            bail!(Shape, "mel loss inputs differ: {:?} vs {:?}", x.dims(), x_hat.dims());
        }
        let mut total: Option<Tensor> = None;
        for t in &self.transforms {
            let a = t.forward(x)?;
            let b = t.forward(x_hat)?;
            let lin = mean_abs(&(&a - &b)?)?;
            let la = a.maximum(LOG_MEL_FLOOR)?.log()?;
            let lb = b.maximum(LOG_MEL_FLOOR)?.log()?;
            let log = mean_abs(&(la - lb)?)?;
            let term = (lin + log)?;
            total = Some(match total {
                None => term,
                Some(acc) => (acc + term)?,
            });
        }
        total.ok_or_else(|| crate::Error::Config("mel loss has no scales".into()))
    }
}

/// Multi-scale mel loss at the two default resolutions.
pub fn mel_loss(x: &Tensor, x_hat: &Tensor, sample_rate: u32) -> Result<Tensor> {
    MelLoss::multi_scale(sample_rate, x.device())?.forward(x, x_hat)
}

fn check_counts(real: &DiscriminatorOutput, fake: &DiscriminatorOutput) -> Result<()> {
    if real.logits.len() != fake.logits.len() || real.feature_maps.len() != fake.feature_maps.len() {
        bail!(
            Shape,
            "discriminator outputs disagree: {} vs {} sub-discriminators",
            real.logits.len(),
            fake.logits.len()
        );
    }
    Ok(())
}

fn sum_all(terms: Vec<Tensor>, device: &Device) -> Result<Tensor> {
    let mut it = terms.into_iter();
    match it.next() {
        None => Ok(Tensor::new(0f32, device)?),
        Some(first) => Ok(it.try_fold(first, |acc, t| acc + t)?),
    }
}

/// Σ mean((fake - 1)^2) over sub-discriminators.
pub fn lsgan_generator_loss(fake: &DiscriminatorOutput, device: &Device) -> Result<Tensor> {
    let terms = fake
        .logits
        .iter()
        .map(|f| f.affine(1.0, -1.0)?.sqr()?.mean_all())
        .collect::<candle_core::Result<Vec<_>>>()?;
    sum_all(terms, device)
}

/// Σ mean((real - 1)^2) + mean(fake^2) over sub-discriminators.
pub fn lsgan_discriminator_loss(
    real: &DiscriminatorOutput,
    fake: &DiscriminatorOutput,
    device: &Device,
) -> Result<Tensor> {
    check_counts(real, fake)?;
    let terms = real
        .logits
        .iter()
        .zip(&fake.logits)
        .map(|(r, f)| r.affine(1.0, -1.0)?.sqr()?.mean_all()? + f.sqr()?.mean_all()?)
        .collect::<candle_core::Result<Vec<_>>>()?;
    sum_all(terms, device)
}

/// `(adv_g, adv_d)`.
pub fn lsgan_losses(
    real: &DiscriminatorOutput,
    fake: &DiscriminatorOutput,
    device: &Device,
) -> Result<(Tensor, Tensor)> {
    check_counts(real, fake)?;
    Ok((
        lsgan_generator_loss(fake, device)?,
        lsgan_discriminator_loss(real, fake, device)?,
    ))
}

/// Mean over sub-discriminators and layers of `mean|real - fake| /
/// mean|real|`. Real features are treated as constants.
pub fn feature_matching_loss(real: &[Vec<Tensor>], fake: &[Vec<Tensor>], device: &Device) -> Result<Tensor> {
    if real.len() != fake.len() {
        bail!(Shape, "feature maps: {} vs {} sub-discriminators", real.len(), fake.len());
    }
    let mut terms = Vec::new();
    for (i, (rs, fs)) in real.iter().zip(fake).enumerate() {
        if rs.len() != fs.len() {
            bail!(Shape, "sub-discriminator {i}: {} vs {} layers", rs.len(), fs.len());
        }
        for (r, f) in rs.iter().zip(fs) {
            if r.dims() != f.dims() {
                bail!(Shape, "feature map shapes differ: {:?} vs {:?}", r.dims(), f.dims());
            }
            let r = r.detach();
            let scale = mean_abs(&r)?.maximum(FEATURE_SCALE_FLOOR)?;
            terms.push(mean_abs(&(f - &r)?)?.div(&scale)?);
        }
    }
    let n = terms.len();
    if n == 0 {
        return Ok(Tensor::new(0f32, device)?);
    }
    Ok(sum_all(terms, device)?.affine(1.0 / n as f64, 0.0)?)
}

/// `(vq, commit)`: `mean|sg(latent) - quantized|` and `mean|latent -
/// sg(quantized)|`.
pub fn vq_commit_losses(latent: &Tensor, quantized: &Tensor) -> Result<(Tensor, Tensor)> {
    if latent.dims() != quantized.dims() {
        bail!(Shape, "latent {:?} vs quantized {:?}", latent.dims(), quantized.dims());
    }
    let vq = mean_abs(&(latent.detach() - quantized)?)?;
    let commit = mean_abs(&(latent - quantized.detach())?)?;
    Ok((vq, commit))
}

/// Squared error on log-magnitude plus anti-wrapped absolute phase error,
/// each averaged over bins and frames. Only used by the ablation that
/// supervises the decoder's spectral outputs directly.
pub fn spectral_recon_loss(
    pred_log_magnitude: &Tensor,
    pred_phase: &Tensor,
    target_log_magnitude: &Tensor,
    target_phase: &Tensor,
    enabled: bool,
) -> Result<Tensor> {
    if !enabled {
        bail!(Config, "spectral reconstruction loss requested but losses.spectral_recon_enabled is false");
    }
    if pred_log_magnitude.dims() != target_log_magnitude.dims() || pred_phase.dims() != target_phase.dims() {
        bail!(Shape, "spectral reconstruction: prediction and target shapes differ");
    }
    let mag = (pred_log_magnitude - target_log_magnitude)?.sqr()?.mean_all()?;
    let phase = mean_abs(&wrap_phase(&(pred_phase - target_phase)?)?)?;
    Ok((mag + phase)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_mel: f64,
    pub lambda_feat: f64,
    pub lambda_commit: f64,
    pub spectral_recon_enabled: bool,
    /// Weight of the spectral reconstruction term when it is enabled.
    pub lambda_spectral: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mel: 15.0,
            lambda_feat: 2.0,
            lambda_commit: 0.25,
            spectral_recon_enabled: false,
            lambda_spectral: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_mel", self.lambda_mel),
            ("lambda_feat", self.lambda_feat),
            ("lambda_commit", self.lambda_commit),
            ("lambda_spectral", self.lambda_spectral),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                bail!(Config, "losses.{name} must be finite and non-negative, got {v}");
            }
        }
        Ok(())
    }

    /// `λ_mel·mel + λ_feat·feat + adv_g + λ_commit·commit + vq`.
    pub fn generator_total(&self, mel: f64, feat: f64, adv_g: f64, commit: f64, vq: f64) -> f64 {
        self.lambda_mel * mel + self.lambda_feat * feat + adv_g + self.lambda_commit * commit + vq
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub mel: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub feat: f64,
    pub vq: f64,
    pub commit: f64,
    pub spectral_recon: Option<f64>,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,mel,adv_g,adv_d,feat,vq,commit,spectral_recon,total_g,total_d,lr";

    pub fn csv_row(&self, step: u64, lr: f64) -> String {
        format!(
            "{step},{},{},{},{},{},{},{},{},{},{lr}",
            self.mel,
            self.adv_g,
            self.adv_d,
            self.feat,
            self.vq,
            self.commit,
            self.spectral_recon.map(|v| v.to_string()).unwrap_or_default(),
            self.total_g,
            self.total_d
        )
    }
}

/// Generator-side loss terms as graph tensors.
#[derive(Debug, Clone)]
pub struct GeneratorLossParts {
    pub mel: Tensor,
    pub adv_g: Tensor,
    pub feat: Tensor,
    pub vq: Tensor,
    pub commit: Tensor,
    pub spectral_recon: Option<Tensor>,
}

/// Weighted generator objective and a report of every term. Fails naming the
/// first non-finite term.
pub fn total_losses(parts: &GeneratorLossParts, adv_d: f64, weights: &LossWeights) -> Result<(Tensor, LossReport)> {
    let mut named = vec![
        ("mel", scalar(&parts.mel)?),
        ("adv_g", scalar(&parts.adv_g)?),
        ("feat", scalar(&parts.feat)?),
        ("vq", scalar(&parts.vq)?),
        ("commit", scalar(&parts.commit)?),
        ("adv_d", adv_d),
    ];
    let recon = match &parts.spectral_recon {
        Some(t) => {
            let v = scalar(t)?;
            named.push(("spectral_recon", v));
            Some(v)
        }
        None => None,
    };
    if let Some((term, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(crate::Error::NonFinite { term: term.to_string() });
    }
    let [mel, adv_g, feat, vq, commit, _] = [named[0].1, named[1].1, named[2].1, named[3].1, named[4].1, named[5].1];
    let mut total_g = weights.generator_total(mel, feat, adv_g, commit, vq);
    let mut total = ((((parts.mel.affine(weights.lambda_mel, 0.0)? + parts.feat.affine(weights.lambda_feat, 0.0)?)?
        + &parts.adv_g)?
        + parts.commit.affine(weights.lambda_commit, 0.0)?)?
        + &parts.vq)?;
    if let (Some(t), Some(v)) = (&parts.spectral_recon, recon) {
        total_g += weights.lambda_spectral * v;
        total = (total + t.affine(weights.lambda_spectral, 0.0)?)?;
    }
    Ok((
        total,
        LossReport {
            mel,
            adv_g,
            adv_d,
            feat,
            vq,
            commit,
            spectral_recon: recon,
            total_g,
            total_d: adv_d,
        },
    ))
}

//! Differentiable spectral transforms on `[batch, samples]` tensors.

use candle_core::{Device, Result, Tensor};

use super::ops::{irdft, rdft};
use crate::mel::mel_filterbank;
use crate::stft::StftConfig;

/// Splits `[B, L]` into `frames` overlapping frames of `hop * ratio` samples,
/// frame `m` starting at `m * hop`. Requires `L >= (frames - 1 + ratio) * hop`.
fn frame_signal(x: &Tensor, frames: usize, hop: usize, ratio: usize) -> Result<Tensor> {
    let b = x.dim(0)?;
    let blocks = frames - 1 + ratio;
    let x = x.narrow(1, 0, blocks * hop)?.reshape((b, blocks, hop))?;
    let parts = (0..ratio)
        .map(|j| x.narrow(1, j, frames))
        .collect::<Result<Vec<_>>>()?;
    Tensor::cat(&parts, 2)
}

/// Inverse of [`frame_signal`] by overlap-add: `[B, M, ratio * hop]` to
/// `[B, (M - 1 + ratio) * hop]`.
fn overlap_add(frames: &Tensor, hop: usize, ratio: usize) -> Result<Tensor> {
    let (b, m, _) = frames.dims3()?;
    let mut acc: Option<Tensor> = None;
    for j in 0..ratio {
        let part = frames
            .narrow(2, j * hop, hop)?
            .pad_with_zeros(1, j, ratio - 1 - j)?;
        acc = Some(match acc {
            None => part,
            Some(a) => (a + part)?,
        });
    }
    acc.expect("ratio >= 1").reshape((b, (m - 1 + ratio) * hop))
}

fn hann(len: usize, device: &Device, dtype: candle_core::DType) -> Result<Tensor> {
    let w = crate::stft::Window::Hann.coefficients(len);
    Tensor::from_vec(w, len, device)?.to_dtype(dtype)
}

/// Centred (zero-padded by `n_fft / 2`) Hann-windowed STFT with window length
/// `n_fft`. Returns `(real, imag)` each `[B, frames, n_fft / 2 + 1]`, where
/// `frames = T / hop + 1`.
pub fn stft(x: &Tensor, n_fft: usize, hop: usize, normalized: bool) -> Result<(Tensor, Tensor)> {
    if n_fft % hop != 0 {
        candle_core::bail!("stft: hop {hop} must divide n_fft {n_fft}");
    }
    let (_, t) = x.dims2()?;
    let frames = t / hop + 1;
    let ratio = n_fft / hop;
    let xp = x.pad_with_zeros(1, n_fft / 2, n_fft / 2)?;
    let framed = frame_signal(&xp, frames, hop, ratio)?;
    let mut window = hann(n_fft, x.device(), x.dtype())?;
    if normalized {
        let energy: f64 = crate::stft::Window::Hann
            .coefficients(n_fft)
            .iter()
            .map(|w| w * w)
            .sum();
        window = window.affine(1.0 / energy.sqrt(), 0.0)?;
    }
    let spec = rdft(&framed.broadcast_mul(&window)?, n_fft)?;
    let bins = n_fft / 2 + 1;
    Ok((spec.narrow(2, 0, bins)?, spec.narrow(2, bins, bins)?))
}

pub fn magnitude(re: &Tensor, im: &Tensor) -> Result<Tensor> {
    (re.sqr()? + im.sqr()?)?.affine(1.0, 1e-14)?.sqrt()
}

/// Mel-magnitude spectrogram `[B, frames, n_mels]`.
#[derive(Debug, Clone)]
pub struct MelTransform {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    filters: Tensor,
}

impl MelTransform {
    pub fn new(sample_rate: u32, n_fft: usize, hop: usize, n_mels: usize, device: &Device) -> Result<Self> {
        let fb = mel_filterbank(sample_rate, n_fft, n_mels);
        let filters = Tensor::from_vec(fb, (n_fft / 2 + 1, n_mels), device)?;
        Ok(Self {
            n_fft,
            hop,
            n_mels,
            filters,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (re, im) = stft(x, self.n_fft, self.hop, false)?;
        let mag = magnitude(&re, &im)?;
        let (b, m, k) = mag.dims3()?;
        let filters = self.filters.to_dtype(x.dtype())?;
        mag.reshape((b * m, k))?
            .matmul(&filters)?
            .reshape((b, m, self.n_mels))
    }
}

/// Differentiable inverse STFT matching [`crate::stft::istft_synthesize`]
/// for hop sizes that divide the window length.
#[derive(Debug, Clone)]
pub struct InverseStft {
    config: StftConfig,
    window: Vec<f64>,
}

impl InverseStft {
    pub fn new(config: StftConfig) -> Result<Self> {
        if config.win_length % config.hop_length != 0 {
            candle_core::bail!(
                "inverse stft needs hop ({}) dividing win_length ({})",
                config.hop_length,
                config.win_length
            );
        }
        Ok(Self {
            window: config.window_coefficients(),
            config,
        })
    }

    fn inverse_envelope(&self, frames: usize) -> Vec<f64> {
        let hop = self.config.hop_length;
        let win = self.config.win_length;
        let len = (frames - 1) * hop + win;
        let mut env = vec![0.0; len];
        for m in 0..frames {
            for (n, w) in self.window.iter().enumerate() {
                env[m * hop + n] += w * w;
            }
        }
        env.into_iter()
            .map(|e| if e > 1e-11 { 1.0 / e } else { 0.0 })
            .collect()
    }

    /// `re`, `im`: `[B, frames, bins]` complex spectrum. Output `[B, out_len]`.
    pub fn forward(&self, re: &Tensor, im: &Tensor, out_len: usize) -> Result<Tensor> {
        let (b, frames, _) = re.dims3()?;
        let cfg = &self.config;
        let ratio = cfg.win_length / cfg.hop_length;
        let spec = Tensor::cat(&[re, im], 2)?;
        let time = irdft(&spec, cfg.fft_size)?.narrow(2, 0, cfg.win_length)?;
        let window = Tensor::from_vec(self.window.clone(), cfg.win_length, re.device())?
            .to_dtype(re.dtype())?;
        let y = overlap_add(&time.broadcast_mul(&window)?, cfg.hop_length, ratio)?;
        let inv = Tensor::from_vec(self.inverse_envelope(frames), (1, y.dim(1)?), re.device())?
            .to_dtype(re.dtype())?;
        let y = y.broadcast_mul(&inv)?;
        let pad = cfg.pad();
        let avail = y.dim(1)? - pad;
        if avail >= out_len {
            y.narrow(1, pad, out_len)
        } else {
            y.narrow(1, pad, avail)?.pad_with_zeros(1, 0, out_len - avail)
        }
        .map(|t| {
            debug_assert_eq!(t.dims(), &[b, out_len]);
            t
        })
    }
}

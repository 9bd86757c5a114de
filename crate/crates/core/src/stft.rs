//! Spectral frontend: STFT analysis, phase unwrapping along time, temporal
//! phase gradient, and inverse-STFT synthesis.
//!
//! Frames are centred: the signal is reflection-padded by `win_length / 2`
//! samples on each side and frame `m` starts at padded sample `m * hop`, so
//! its centre sits on original sample `m * hop`. The analysis window occupies
//! the first `win_length` samples of each `fft_size` frame; the DFT phase is
//! referenced to the frame start. A signal of `T` samples yields
//! `ceil(T / hop)` frames and `fft_size / 2 + 1` bins.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

const TWO_PI: f64 = 2.0 * PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Periodic Hann, `0.5 - 0.5 cos(2πn/L)`.
    Hann,
    /// Symmetric Hann, `0.5 - 0.5 cos(2πn/(L-1))`. Not COLA at any hop.
    HannSymmetric,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (TWO_PI * n as f64 / len as f64).cos())
                .collect(),
            Window::HannSymmetric => {
                let denom = (len.max(2) - 1) as f64;
                (0..len)
                    .map(|n| 0.5 - 0.5 * (TWO_PI * n as f64 / denom).cos())
                    .collect()
            }
            Window::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub fft_size: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub window: Window,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::hop40(48_000)
    }
}

impl StftConfig {
    pub fn new(
        fft_size: usize,
        win_length: usize,
        hop_length: usize,
        window: Window,
        sample_rate: u32,
    ) -> Result<Self> {
        let cfg = Self {
            fft_size,
            win_length,
            hop_length,
            window,
            sample_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// N=1024, 320-sample Hann window, hop 40.
    pub fn hop40(sample_rate: u32) -> Self {
        Self {
            fft_size: 1024,
            win_length: 320,
            hop_length: 40,
            window: Window::Hann,
            sample_rate,
        }
    }

    /// The stride-640 variant: same window, hop 80.
    pub fn hop80(sample_rate: u32) -> Self {
        Self {
            hop_length: 80,
            ..Self::hop40(sample_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || self.win_length == 0 || self.hop_length == 0 {
            bail!(Config, "stft sizes must be positive: {self:?}");
        }
        if self.sample_rate == 0 {
            bail!(Config, "stft.sample_rate must be positive");
        }
        if self.win_length > self.fft_size {
            bail!(
                Config,
                "stft.win_length ({}) exceeds stft.fft_size ({})",
                self.win_length,
                self.fft_size
            );
        }
        if self.hop_length > self.win_length {
            bail!(
                Config,
                "stft.hop_length ({}) exceeds stft.win_length ({})",
                self.hop_length,
                self.win_length
            );
        }
        let dev = self.cola_deviation();
        if dev > 1e-9 {
            bail!(
                Config,
                "{:?} window of length {} is not COLA at hop {} (relative deviation {dev:.3e})",
                self.window,
                self.win_length,
                self.hop_length
            );
        }
        Ok(())
    }

    /// Relative spread of the steady-state sum of shifted windows.
    pub fn cola_deviation(&self) -> f64 {
        let w = self.window.coefficients(self.win_length);
        let sums: Vec<f64> = (0..self.hop_length)
            .map(|n| w.iter().skip(n).step_by(self.hop_length).sum())
            .collect();
        let max = sums.iter().cloned().fold(f64::MIN, f64::max);
        let min = sums.iter().cloned().fold(f64::MAX, f64::min);
        if max <= 0.0 {
            return f64::INFINITY;
        }
        (max - min) / max
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        num_samples.div_ceil(self.hop_length)
    }

    pub fn window_coefficients(&self) -> Vec<f64> {
        self.window.coefficients(self.win_length)
    }

    pub fn pad(&self) -> usize {
        self.win_length / 2
    }
}

/// Half-spectrum STFT, `[bins x frames]`.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub values: Array2<Complex64>,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn num_bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.values.ncols()
    }
}

/// The three encoder input streams, each `[bins x frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFeatures {
    pub log_magnitude: Array2<f64>,
    pub phase: Array2<f64>,
    pub phase_gradient: Array2<f64>,
}

impl SpectralFeatures {
    pub fn num_bins(&self) -> usize {
        self.log_magnitude.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.log_magnitude.ncols()
    }
}

pub const DEFAULT_MAGNITUDE_FLOOR: f64 = 1e-7;

/// Maps a phase into `(-π, π]`.
pub fn wrap_phase(x: f64) -> f64 {
    let r = x - TWO_PI * (x / TWO_PI).round();
    if r <= -PI {
        r + TWO_PI
    } else if r > PI {
        r - TWO_PI
    } else {
        r
    }
}

fn reflect_pad(audio: &[f64], pad: usize) -> Vec<f64> {
    let n = audio.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((0..pad).map(|i| audio[pad - i]));
    out.extend_from_slice(audio);
    out.extend((0..pad).map(|j| audio[n - 2 - j]));
    out
}

pub fn stft_analyze(audio: &[f64], config: &StftConfig) -> Result<ComplexSpectrogram> {
    if audio.len() < config.win_length {
        bail!(
            InvalidInput,
            "signal too short: {} samples < win_length {}",
            audio.len(),
            config.win_length
        );
    }
    if let Some(i) = audio.iter().position(|v| !v.is_finite()) {
        bail!(InvalidInput, "non-finite sample at index {i}");
    }
    let padded = reflect_pad(audio, config.pad());
    let window = config.window_coefficients();
    let n_fft = config.fft_size;
    let bins = config.num_bins();
    let frames = config.num_frames(audio.len());

    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut values = Array2::<Complex64>::zeros((bins, frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for m in 0..frames {
        let start = m * config.hop_length;
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (n, (b, w)) in buf.iter_mut().zip(&window).enumerate() {
            b.re = padded[start + n] * w;
        }
        fft.process(&mut buf);
        for k in 0..bins {
            values[[k, m]] = buf[k];
        }
    }
    Ok(ComplexSpectrogram {
        values,
        config: *config,
    })
}

pub fn extract_features(spec: &ComplexSpectrogram, magnitude_floor: f64) -> Result<SpectralFeatures> {
    if !(magnitude_floor > 0.0) {
        bail!(InvalidInput, "magnitude floor must be positive, got {magnitude_floor}");
    }
    let log_magnitude = spec.values.mapv(|c| c.norm().max(magnitude_floor).ln());
    let phase = spec.values.mapv(|c| c.im.atan2(c.re));
    let phase_gradient = phase_temporal_gradient(&unwrap_phase_time(&phase));
    Ok(SpectralFeatures {
        log_magnitude,
        phase,
        phase_gradient,
    })
}

/// Removes 2π jumps along the frame axis of a `[bins x frames]` matrix.
/// A jump is corrected only when `|Δφ| > π`.
pub fn unwrap_phase_time(phase: &Array2<f64>) -> Array2<f64> {
    let mut out = phase.clone();
    for mut row in out.rows_mut() {
        let mut turns = 0.0;
        let mut prev = match row.first() {
            Some(&p) => p,
            None => continue,
        };
        for v in row.iter_mut().skip(1) {
            let raw = *v;
            let d = raw - prev;
            if d > PI {
                turns -= 1.0;
            } else if d < -PI {
                turns += 1.0;
            }
            prev = raw;
            *v = raw + TWO_PI * turns;
        }
    }
    out
}

pub fn phase_temporal_gradient(unwrapped: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(unwrapped.raw_dim());
    for (src, mut dst) in unwrapped.rows().into_iter().zip(out.rows_mut()) {
        for m in 1..src.len() {
            dst[m] = src[m] - src[m - 1];
        }
    }
    out
}

/// Inverse STFT of `exp(log_magnitude) * exp(j * phase)` by windowed
/// overlap-add with squared-window normalisation.
pub fn istft_synthesize(
    log_magnitude: &Array2<f64>,
    phase: &Array2<f64>,
    config: &StftConfig,
    out_length: usize,
) -> Result<Vec<f64>> {
    config.validate()?;
    if log_magnitude.dim() != phase.dim() {
        bail!(
            Shape,
            "log-magnitude {:?} vs phase {:?}",
            log_magnitude.dim(),
            phase.dim()
        );
    }
    let bins = config.num_bins();
    if log_magnitude.nrows() != bins {
        bail!(Shape, "expected {bins} bins, got {}", log_magnitude.nrows());
    }
    let frames = log_magnitude.ncols();
    let n_fft = config.fft_size;
    let hop = config.hop_length;
    let win = config.win_length;
    let window = config.window_coefficients();

    let span = if frames == 0 { 0 } else { (frames - 1) * hop + win };
    let mut acc = vec![0.0; span];
    let mut env = vec![0.0; span];
    let ifft = FftPlanner::new().plan_fft_inverse(n_fft);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let scale = 1.0 / n_fft as f64;
    for m in 0..frames {
        for k in 0..bins {
            buf[k] = Complex64::from_polar(log_magnitude[[k, m]].exp(), phase[[k, m]]);
        }
        buf[0].im = 0.0;
        if n_fft % 2 == 0 {
            buf[n_fft / 2].im = 0.0;
        }
        for k in bins..n_fft {
            buf[k] = buf[n_fft - k].conj();
        }
        ifft.process(&mut buf);
        let start = m * hop;
        for n in 0..win {
            acc[start + n] += buf[n].re * scale * window[n];
            env[start + n] += window[n] * window[n];
        }
    }
    let pad = config.pad();
    let mut out = vec![0.0; out_length];
    for (i, o) in out.iter_mut().enumerate() {
        let j = i + pad;
        if j < span && env[j] > 1e-11 {
            *o = acc[j] / env[j];
        }
    }
    Ok(out)
}

/// Analysis followed by feature extraction with the default magnitude floor.
pub fn analyze_features(audio: &[f64], config: &StftConfig) -> Result<SpectralFeatures> {
    extract_features(&stft_analyze(audio, config)?, DEFAULT_MAGNITUDE_FLOOR)
}

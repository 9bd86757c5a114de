//! Multi-period waveform discriminator and multi-resolution STFT
//! discriminator.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::layers::Conv2d;
use crate::nn::ops::leaky_relu;
use crate::nn::spectral::stft;
use crate::nn::ParamStore;

const MPD_SLOPE: f64 = 0.1;
const STFT_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub periods: Vec<usize>,
    /// Channel widths of the period discriminators' strided convolutions;
    /// the last entry is applied with stride 1.
    pub mpd_channels: Vec<usize>,
    pub fft_sizes: Vec<usize>,
    pub stft_channels: usize,
    pub stft_dilations: Vec<usize>,
    pub weight_norm: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            periods: vec![2, 3, 5, 7, 11],
            mpd_channels: vec![32, 128, 512, 1024, 1024],
            fft_sizes: vec![2048, 1024, 512, 256, 128],
            stft_channels: 32,
            stft_dilations: vec![1, 2, 4],
            weight_norm: true,
        }
    }
}

impl DiscriminatorConfig {
    /// Narrow discriminators with the reference structure, sized for CPU runs.
    pub fn toy() -> Self {
        Self {
            mpd_channels: vec![8, 16, 32, 32],
            stft_channels: 4,
            ..Self::default()
        }
    }

    /// One STFT resolution instead of five.
    pub fn single_scale(mut self) -> Self {
        self.fft_sizes = vec![1024];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.periods.is_empty() && self.fft_sizes.is_empty() {
            bail!(Config, "discriminator: no periods and no fft sizes configured");
        }
        if self.periods.contains(&0) {
            bail!(Config, "discriminator.periods must be positive");
        }
        if self.mpd_channels.is_empty() || self.mpd_channels.contains(&0) {
            bail!(Config, "discriminator.mpd_channels must be non-empty and positive");
        }
        if self.stft_channels == 0 {
            bail!(Config, "discriminator.stft_channels must be positive");
        }
        for &n in &self.fft_sizes {
            if n < 8 || n % 4 != 0 {
                bail!(Config, "discriminator.fft_sizes: {n} must be a multiple of 4 and at least 8");
            }
        }
        Ok(())
    }

    pub fn num_sub_discriminators(&self) -> usize {
        self.periods.len() + self.fft_sizes.len()
    }
}

/// Logits and intermediate activations of a set of sub-discriminators.
#[derive(Debug, Clone, Default)]
pub struct DiscriminatorOutput {
    pub logits: Vec<Tensor>,
    pub feature_maps: Vec<Vec<Tensor>>,
}

impl DiscriminatorOutput {
    pub fn extend(&mut self, other: DiscriminatorOutput) {
        self.logits.extend(other.logits);
        self.feature_maps.extend(other.feature_maps);
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

struct ConvStack {
    convs: Vec<Conv2d>,
    post: Conv2d,
    slope: f64,
}

impl ConvStack {
    fn forward(&self, x: &Tensor, frozen: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let run = |conv: &Conv2d, h: &Tensor| if frozen { conv.forward_frozen(h) } else { conv.forward(h) };
        let mut h = x.clone();
        let mut features = Vec::with_capacity(self.convs.len() + 1);
        for conv in &self.convs {
            h = leaky_relu(&run(conv, &h)?, self.slope)?;
            features.push(h.clone());
        }
        let out = run(&self.post, &h)?;
        features.push(out.clone());
        Ok((out.flatten_from(1)?, features))
    }
}

struct PeriodDiscriminator {
    period: usize,
    stack: ConvStack,
}

impl PeriodDiscriminator {
    fn new(store: &mut ParamStore, name: &str, period: usize, cfg: &DiscriminatorConfig) -> Result<Self> {
        let wn = cfg.weight_norm;
        let mut convs = Vec::new();
        let mut cin = 1;
        let last = cfg.mpd_channels.len() - 1;
        for (i, &c) in cfg.mpd_channels.iter().enumerate() {
            let stride = if i == last { 1 } else { 3 };
            convs.push(Conv2d::new(
                store,
                &format!("{name}.convs.{i}"),
                cin,
                c,
                (5, 1),
                (stride, 1),
                (1, 1),
                (2, 0),
                wn,
            )?);
            cin = c;
        }
        let post = Conv2d::new(store, &format!("{name}.post"), cin, 1, (3, 1), (1, 1), (1, 1), (1, 0), wn)?;
        Ok(Self {
            period,
            stack: ConvStack {
                convs,
                post,
                slope: MPD_SLOPE,
            },
        })
    }

    fn forward(&self, audio: &Tensor, frozen: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let (b, t) = audio.dims2()?;
        let p = self.period;
        let padded = t.div_ceil(p) * p;
        let x = if padded > t {
            audio.pad_with_zeros(1, 0, padded - t)?
        } else {
            audio.clone()
        };
        self.stack.forward(&x.reshape((b, padded / p, p, 1))?, frozen)
    }
}

struct StftDiscriminator {
    n_fft: usize,
    stack: ConvStack,
}

impl StftDiscriminator {
    fn new(store: &mut ParamStore, name: &str, n_fft: usize, cfg: &DiscriminatorConfig) -> Result<Self> {
        let wn = cfg.weight_norm;
        let c = cfg.stft_channels;
        let mut convs = vec![Conv2d::new(
            store,
            &format!("{name}.convs.0"),
            2,
            c,
            (3, 9),
            (1, 1),
            (1, 1),
            (1, 4),
            wn,
        )?];
        for (i, &d) in cfg.stft_dilations.iter().enumerate() {
            convs.push(Conv2d::new(
                store,
                &format!("{name}.convs.{}", i + 1),
                c,
                c,
                (3, 9),
                (1, 2),
                (d, 1),
                (d, 4),
                wn,
            )?);
        }
        convs.push(Conv2d::new(
            store,
            &format!("{name}.convs.{}", cfg.stft_dilations.len() + 1),
            c,
            c,
            (3, 3),
            (1, 1),
            (1, 1),
            (1, 1),
            wn,
        )?);
        let post = Conv2d::new(store, &format!("{name}.post"), c, 1, (3, 3), (1, 1), (1, 1), (1, 1), wn)?;
        Ok(Self {
            n_fft,
            stack: ConvStack {
                convs,
                post,
                slope: STFT_SLOPE,
            },
        })
    }

    fn forward(&self, audio: &Tensor, frozen: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let (re, im) = stft(audio, self.n_fft, self.n_fft / 4, true)?;
        let x = Tensor::stack(&[&re, &im], 3)?;
        self.stack.forward(&x, frozen)
    }
}

/// Both discriminator families over `[batch, samples]` audio.
pub struct Discriminators {
    cfg: DiscriminatorConfig,
    periods: Vec<PeriodDiscriminator>,
    stfts: Vec<StftDiscriminator>,
}

impl Discriminators {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let periods = cfg
            .periods
            .iter()
            .map(|&p| PeriodDiscriminator::new(store, &format!("{name}.mpd.{p}"), p, cfg))
            .collect::<Result<Vec<_>>>()?;
        let stfts = cfg
            .fft_sizes
            .iter()
            .map(|&n| StftDiscriminator::new(store, &format!("{name}.stft.{n}"), n, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            periods,
            stfts,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn num_stft_scales(&self) -> usize {
        self.stfts.len()
    }

    pub fn mpd_forward(&self, audio: &Tensor) -> Result<DiscriminatorOutput> {
        self.mpd(audio, false)
    }

    pub fn msstft_forward(&self, audio: &Tensor) -> Result<DiscriminatorOutput> {
        self.msstft(audio, false)
    }

    fn mpd(&self, audio: &Tensor, frozen: bool) -> Result<DiscriminatorOutput> {
        let t = audio.dim(1)?;
        if let Some(&p) = self.cfg.periods.iter().max() {
            if t < p {
                bail!(InvalidInput, "audio of {t} samples is shorter than period {p}");
            }
        }
        let mut out = DiscriminatorOutput::default();
        for d in &self.periods {
            let (logits, features) = d.forward(audio, frozen)?;
            out.logits.push(logits);
            out.feature_maps.push(features);
        }
        Ok(out)
    }

    fn msstft(&self, audio: &Tensor, frozen: bool) -> Result<DiscriminatorOutput> {
        let t = audio.dim(1)?;
        if let Some(&n) = self.cfg.fft_sizes.iter().max() {
            if t < n {
                bail!(InvalidInput, "audio of {t} samples is shorter than FFT size {n}");
            }
        }
        let mut out = DiscriminatorOutput::default();
        for d in &self.stfts {
            let (logits, features) = d.forward(audio, frozen)?;
            out.logits.push(logits);
            out.feature_maps.push(features);
        }
        Ok(out)
    }

    /// Period discriminators followed by STFT discriminators.
    pub fn forward(&self, audio: &Tensor) -> Result<DiscriminatorOutput> {
        let mut out = self.mpd(audio, false)?;
        out.extend(self.msstft(audio, false)?);
        Ok(out)
    }

    /// [`Discriminators::forward`] with every parameter treated as a
    /// constant; gradients still flow to `audio`.
    pub fn forward_frozen(&self, audio: &Tensor) -> Result<DiscriminatorOutput> {
        let mut out = self.mpd(audio, true)?;
        out.extend(self.msstft(audio, true)?);
        Ok(out)
    }

    pub fn fft_sizes(&self) -> Vec<usize> {
        self.stfts.iter().map(|d| d.n_fft).collect()
    }
}

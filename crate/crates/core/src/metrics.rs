//! Objective evaluation: log-mel spectral distance, voicing F1, and wrappers
//! for external metric tools.

use std::path::{Path, PathBuf};
use std::process::Command;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::audio::{list_wavs, read_wav, write_wav, Audio, WavEncoding};
use crate::bitstream::{decode_bitstream, encode_audio};
use crate::codec::CodecModel;
use crate::error::{bail, Result};
use crate::mel::mel_filterbank;
use crate::stft::Window;

pub const LSD_FFT: usize = 1024;
pub const LSD_HOP: usize = 256;
pub const LSD_MELS: usize = 80;
pub const LSD_FLOOR: f64 = 1e-5;

pub const VOICING_THRESHOLD: f64 = 0.3;
pub const VOICING_MIN_HZ: f64 = 60.0;
pub const VOICING_MAX_HZ: f64 = 400.0;
/// Frames quieter than this fraction of the loudest frame's RMS are unvoiced.
pub const VOICING_RELATIVE_GATE: f64 = 0.03;
pub const VOICING_ABSOLUTE_GATE: f64 = 1e-4;

/// Natural-log mel magnitude spectrogram `[frames][LSD_MELS]`, centred
/// zero-padded Hann frames of `LSD_FFT` samples every `LSD_HOP`.
pub fn log_mel(x: &[f64], sample_rate: u32) -> Vec<Vec<f64>> {
    let n = LSD_FFT;
    let bins = n / 2 + 1;
    let fb = mel_filterbank(sample_rate, n, LSD_MELS);
    let w = Window::Hann.coefficients(n);
    let pad = n / 2;
    let mut padded = vec![0.0; x.len() + 2 * pad];
    padded[pad..pad + x.len()].copy_from_slice(x);
    let frames = x.len() / LSD_HOP + 1;
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::default(); n];
    (0..frames)
        .map(|m| {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(padded[m * LSD_HOP + i] * w[i], 0.0);
            }
            fft.process(&mut buf);
            (0..LSD_MELS)
                .map(|j| {
                    let v: f64 = (0..bins).map(|k| buf[k].norm() * fb[k * LSD_MELS + j]).sum();
                    v.max(LSD_FLOOR).ln()
                })
                .collect()
        })
        .collect()
}

/// Mean over frames of the RMS (over mel bands) difference of log-mel
/// spectrograms.
pub fn lsd(x: &[f64], y: &[f64], sample_rate: u32) -> Result<f64> {
    if x.len() != y.len() {
        bail!(InvalidInput, "lsd: lengths differ ({} vs {})", x.len(), y.len());
    }
    let a = log_mel(x, sample_rate);
    let b = log_mel(y, sample_rate);
    let total: f64 = a
        .iter()
        .zip(&b)
        .map(|(fa, fb)| {
            let ms = fa.iter().zip(fb).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / LSD_MELS as f64;
            ms.sqrt()
        })
        .sum();
    Ok(total / a.len() as f64)
}

/// Voicing decision per 10 ms frame (analysis window 40 ms): the largest
/// normalized autocorrelation over lags for 60-400 Hz must exceed the
/// threshold and the frame must pass the energy gate.
pub fn voicing(x: &[f64], sample_rate: u32) -> Vec<bool> {
    let hop = (sample_rate / 100) as usize;
    let win = 4 * hop;
    if x.len() < win || hop == 0 {
        return Vec::new();
    }
    let frames = (x.len() - win) / hop + 1;
    let rms: Vec<f64> = (0..frames)
        .map(|m| {
            let f = &x[m * hop..m * hop + win];
            (f.iter().map(|v| v * v).sum::<f64>() / win as f64).sqrt()
        })
        .collect();
    let loudest = rms.iter().copied().fold(0.0, f64::max);
    let gate = (loudest * VOICING_RELATIVE_GATE).max(VOICING_ABSOLUTE_GATE);
    let min_lag = (sample_rate as f64 / VOICING_MAX_HZ).floor() as usize;
    let max_lag = (sample_rate as f64 / VOICING_MIN_HZ).ceil() as usize;
    (0..frames)
        .map(|m| {
            if rms[m] < gate {
                return false;
            }
            let f = &x[m * hop..m * hop + win];
            (min_lag..=max_lag.min(win - 1))
                .map(|lag| {
                    let (a, b) = (&f[..win - lag], &f[lag..]);
                    let num: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                    let ea: f64 = a.iter().map(|v| v * v).sum();
                    let eb: f64 = b.iter().map(|v| v * v).sum();
                    let den = (ea * eb).sqrt();
                    if den > 0.0 {
                        num / den
                    } else {
                        0.0
                    }
                })
                .fold(f64::NEG_INFINITY, f64::max)
                > VOICING_THRESHOLD
        })
        .collect()
}

/// F1 of predicted voicing labels against reference labels (voiced is the
/// positive class). Two all-unvoiced label sets agree perfectly.
pub fn f1_from_labels(reference: &[bool], predicted: &[bool]) -> f64 {
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (&r, &p) in reference.iter().zip(predicted) {
        match (r, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fnn += 1,
            _ => {}
        }
    }
    if tp + fp + fnn == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fnn) as f64
}

pub fn vuv_f1(x: &[f64], y: &[f64], sample_rate: u32) -> Result<f64> {
    if x.len() != y.len() {
        bail!(InvalidInput, "vuv_f1: lengths differ ({} vs {})", x.len(), y.len());
    }
    Ok(f1_from_labels(&voicing(x, sample_rate), &voicing(y, sample_rate)))
}

/// Result of an external metric tool; `value == None` means unavailable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExternalMetric {
    pub name: String,
    pub value: Option<f64>,
    pub tool_version: Option<String>,
    pub diagnostic: Option<String>,
}

impl ExternalMetric {
    fn unavailable(name: &str, diagnostic: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            value: None,
            tool_version: None,
            diagnostic: Some(diagnostic.into()),
        }
    }

    pub fn display_value(&self) -> String {
        self.value.map(|v| format!("{v:.4}")).unwrap_or_else(|| "unavailable".into())
    }
}

/// Runs `tool reference.wav degraded.wav` and takes the last number printed
/// on stdout; `tool --version` supplies the version string. Any failure is
/// reported as unavailable.
pub fn external_metric(name: &str, x: &[f64], y: &[f64], sample_rate: u32, tool: Option<&Path>) -> ExternalMetric {
    let Some(tool) = tool else {
        return ExternalMetric::unavailable(name, "no tool configured");
    };
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return ExternalMetric::unavailable(name, e.to_string()),
    };
    let (rp, dp) = (dir.path().join("reference.wav"), dir.path().join("degraded.wav"));
    for (p, s) in [(&rp, x), (&dp, y)] {
        let audio = Audio {
            samples: s.to_vec(),
            sample_rate,
        };
        if let Err(e) = write_wav(p, &audio, WavEncoding::Pcm16) {
            return ExternalMetric::unavailable(name, e.to_string());
        }
    }
    let version = Command::new(tool)
        .arg("--version")
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    let out = match Command::new(tool).arg(&rp).arg(&dp).output() {
        Ok(o) => o,
        Err(e) => return ExternalMetric::unavailable(name, format!("{}: {e}", tool.display())),
    };
    if !out.status.success() {
        return ExternalMetric::unavailable(
            name,
            format!("{} exited with {}: {}", tool.display(), out.status, String::from_utf8_lossy(&out.stderr).trim()),
        );
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    let value = stdout
        .split(|c: char| c.is_whitespace() || c == ',' || c == ';')
        .filter_map(|t| t.parse::<f64>().ok())
        .next_back();
    match value {
        Some(v) => ExternalMetric {
            name: name.to_string(),
            value: Some(v),
            tool_version: version,
            diagnostic: None,
        },
        None => ExternalMetric {
            tool_version: version,
            ..ExternalMetric::unavailable(name, "no numeric score in tool output")
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileReport {
    pub file: String,
    pub lsd: f64,
    pub vuv_f1: f64,
    pub external: Vec<ExternalMetric>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub bitrate_bps: f64,
    pub files: Vec<FileReport>,
}

impl EvalReport {
    pub fn mean_lsd(&self) -> f64 {
        mean(self.files.iter().map(|f| f.lsd))
    }

    pub fn mean_vuv_f1(&self) -> f64 {
        mean(self.files.iter().map(|f| f.vuv_f1))
    }

    fn external_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for f in &self.files {
            for e in &f.external {
                if !names.contains(&e.name) {
                    names.push(e.name.clone());
                }
            }
        }
        names
    }

    fn external_mean(&self, name: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .files
            .iter()
            .filter_map(|f| f.external.iter().find(|e| e.name == name).and_then(|e| e.value))
            .collect();
        (!vals.is_empty() && vals.len() == self.files.len()).then(|| mean(vals.into_iter()))
    }

    /// One row per file plus a final `mean` row.
    pub fn to_csv(&self) -> String {
        let names = self.external_names();
        let mut s = String::from("file,lsd,vuv_f1,bitrate_bps");
        for n in &names {
            s.push_str(&format!(",{n},{n}_tool_version"));
        }
        s.push('\n');
        for f in &self.files {
            s.push_str(&format!("{},{},{},{}", csv_field(&f.file), f.lsd, f.vuv_f1, self.bitrate_bps));
            for n in &names {
                let e = f.external.iter().find(|e| &e.name == n);
                let value = e.map(ExternalMetric::display_value).unwrap_or_else(|| "unavailable".into());
                let version = e.and_then(|e| e.tool_version.clone()).unwrap_or_default();
                s.push_str(&format!(",{value},{}", csv_field(&version)));
            }
            s.push('\n');
        }
        s.push_str(&format!("mean,{},{},{}", self.mean_lsd(), self.mean_vuv_f1(), self.bitrate_bps));
        for n in &names {
            let v = self
                .external_mean(n)
                .map(|v| v.to_string())
                .unwrap_or_else(|| "unavailable".into());
            s.push_str(&format!(",{v},"));
        }
        s.push('\n');
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "files: {}\nbitrate: {} bps\nLSD: {:.4}\nV/UV F1: {:.4}\n",
            self.files.len(),
            self.bitrate_bps,
            self.mean_lsd(),
            self.mean_vuv_f1()
        );
        for n in self.external_names() {
            let v = self
                .external_mean(&n)
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "unavailable".into());
            s.push_str(&format!("{n}: {v}\n"));
        }
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Tool paths for external metrics, keyed by metric name.
pub type ExternalTools = Vec<(String, PathBuf)>;

/// Encodes and decodes every WAV in `dir` through the bitstream path and
/// scores the reconstructions against the originals.
pub fn evaluate_dir(
    model: &CodecModel,
    dir: &Path,
    codebooks: Option<usize>,
    tools: &ExternalTools,
) -> Result<EvalReport> {
    let files = list_wavs(dir)?;
    if files.is_empty() {
        bail!(Data, "{}: no .wav files", dir.display());
    }
    let mut report = EvalReport {
        bitrate_bps: 0.0,
        files: Vec::with_capacity(files.len()),
    };
    for path in files {
        let audio = read_wav(&path)?;
        let stream = encode_audio(&audio, model, codebooks)?;
        report.bitrate_bps = stream.bitrate();
        let decoded = decode_bitstream(&stream, model, false)?;
        let (x, y, sr) = (&audio.samples, &decoded.samples, audio.sample_rate);
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        report.files.push(FileReport {
            file: name,
            lsd: lsd(x, y, sr)?,
            vuv_f1: vuv_f1(x, y, sr)?,
            external: tools
                .iter()
                .map(|(n, t)| external_metric(n, x, y, sr, Some(t)))
                .collect(),
        });
    }
    Ok(report)
}

//! Mono WAV reading and writing.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub const SUPPORTED_RATES: [u32; 2] = [48_000, 24_000];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WavEncoding {
    Pcm16,
    #[default]
    Float32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Audio {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Audio {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a mono WAV (integer PCM up to 32 bits or 32-bit float) as samples in
/// `[-1, 1]`.
pub fn read_wav(path: &Path) -> Result<Audio> {
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => crate::Error::io(path, io),
        other => crate::Error::Data(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        bail!(Data, "{}: {} channels; only mono WAV is supported", path.display(), spec.channels);
    }
    let samples: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                bail!(Data, "{}: {}-bit float WAV is not supported", path.display(), spec.bits_per_sample);
            }
            reader
                .into_samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| crate::Error::Data(format!("{}: {e}", path.display())))?
        }
        SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| crate::Error::Data(format!("{}: {e}", path.display())))?
        }
    };
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        bail!(Data, "{}: non-finite sample at index {i}", path.display());
    }
    Ok(Audio {
        samples,
        sample_rate: spec.sample_rate,
    })
}

pub fn write_wav(path: &Path, audio: &Audio, encoding: WavEncoding) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut w = WavWriter::create(path, spec)?;
    for &s in &audio.samples {
        match encoding {
            WavEncoding::Pcm16 => w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?,
            WavEncoding::Float32 => w.write_sample(s as f32)?,
        }
    }
    w.finalize()?;
    Ok(())
}

/// `.wav` files directly inside `dir`, sorted by name.
pub fn list_wavs(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| crate::Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| crate::Error::io(dir, e))?.path();
        if p.is_file()
            && p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_encodings() {
        let dir = tempfile::tempdir().unwrap();
        let audio = Audio {
            samples: vec![0.0, 0.5, -0.25, 0.75],
            sample_rate: 48_000,
        };
        let p = dir.path().join("f.wav");
        write_wav(&p, &audio, WavEncoding::Float32).unwrap();
        assert_eq!(read_wav(&p).unwrap(), audio);
        let p16 = dir.path().join("i.wav");
        write_wav(&p16, &audio, WavEncoding::Pcm16).unwrap();
        let back = read_wav(&p16).unwrap();
        for (a, b) in back.samples.iter().zip(&audio.samples) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
        assert_eq!(list_wavs(dir.path()).unwrap().len(), 2);
    }

    #[test]
    fn stereo_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 48_000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&p), Err(crate::Error::Data(_))));
    }
}

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{list_wavs, read_wav};
use crate::error::{bail, Result};

/// Position of the crop generator, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// In-memory clips sampled as uniformly random crops of a fixed length.
pub struct Dataset {
    names: Vec<String>,
    clips: Vec<Vec<f32>>,
    chunk: usize,
    rng: ChaCha8Rng,
}

/// Loads every WAV in `dir`; all must have `sample_rate`.
pub fn build_dataset(dir: &Path, sample_rate: u32, chunk_samples: usize, seed: u64) -> Result<Dataset> {
    let files = list_wavs(dir)?;
    if files.is_empty() {
        bail!(Data, "{}: no .wav files", dir.display());
    }
    let mut names = Vec::new();
    let mut clips = Vec::new();
    for f in files {
        let a = read_wav(&f)?;
        if a.sample_rate != sample_rate {
            bail!(
                Data,
                "{}: sample rate {} Hz, expected {sample_rate} Hz (no resampling is done)",
                f.display(),
                a.sample_rate
            );
        }
        names.push(f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        clips.push(a.samples.iter().map(|&v| v as f32).collect());
    }
    Dataset::from_clips(names, clips, chunk_samples, seed)
}

impl Dataset {
    pub fn from_clips(names: Vec<String>, clips: Vec<Vec<f32>>, chunk: usize, seed: u64) -> Result<Self> {
        if clips.is_empty() {
            bail!(Data, "dataset has no clips");
        }
        if chunk == 0 {
            bail!(Config, "chunk length must be positive");
        }
        Ok(Self {
            names,
            clips,
            chunk,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn clips(&self) -> &[Vec<f32>] {
        &self.clips
    }

    pub fn chunk_samples(&self) -> usize {
        self.chunk
    }

    /// Uniform clip, uniform crop start; shorter clips are zero-padded.
    /// Returns the crop with its clip index and start sample.
    pub fn next_crop(&mut self) -> (Vec<f32>, usize, usize) {
        let idx = self.rng.random_range(0..self.clips.len());
        let clip = &self.clips[idx];
        if clip.len() >= self.chunk {
            let start = self.rng.random_range(0..=clip.len() - self.chunk);
            (clip[start..start + self.chunk].to_vec(), idx, start)
        } else {
            let mut c = clip.clone();
            c.resize(self.chunk, 0.0);
            (c, idx, 0)
        }
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<Vec<f32>> {
        (0..batch_size).map(|_| self.next_crop().0).collect()
    }

    /// Steps in one pass over the clip index.
    pub fn steps_per_epoch(&self, batch_size: usize) -> u64 {
        self.clips.len().div_ceil(batch_size.max(1)) as u64
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn set_rng_state(&mut self, state: RngState) {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(state.word_pos);
        self.rng = rng;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_ranges_and_padding() {
        let mut d = Dataset::from_clips(vec!["a".into()], vec![vec![1.0; 48_000]], 15_960, 3).unwrap();
        for _ in 0..200 {
            let (c, _, start) = d.next_crop();
            assert_eq!(c.len(), 15_960);
            assert!(start <= 32_040);
        }
        let mut d = Dataset::from_clips(vec!["b".into()], vec![vec![1.0; 10_000]], 15_960, 3).unwrap();
        let (c, _, _) = d.next_crop();
        assert_eq!(c.len(), 15_960);
        assert!(c[..10_000].iter().all(|&v| v == 1.0));
        assert!(c[10_000..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_and_resumable() {
        let clips: Vec<Vec<f32>> = (0..3).map(|i| (0..30_000).map(|n| (n + i) as f32).collect()).collect();
        let names = vec!["a".into(), "b".into(), "c".into()];
        let mut a = Dataset::from_clips(names.clone(), clips.clone(), 1000, 9).unwrap();
        let mut b = Dataset::from_clips(names.clone(), clips.clone(), 1000, 9).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_crop(), b.next_crop());
        }
        let state = a.rng_state();
        let expect: Vec<_> = (0..5).map(|_| a.next_crop()).collect();
        let mut c = Dataset::from_clips(names, clips, 1000, 0).unwrap();
        c.set_rng_state(state);
        let got: Vec<_> = (0..5).map(|_| c.next_crop()).collect();
        assert_eq!(got, expect);
    }
}

//! Residual vector quantizer with factorized, L2-normalized code lookup.
//!
//! Each stage projects the residual from the latent width down to an
//! 8-dimensional code space, picks the codeword with the highest cosine
//! similarity (ties go to the lowest index), and projects the raw codeword
//! back up. Codebooks and projections are ordinary trainable parameters.

use std::collections::HashMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::losses::vq_commit_losses;
use crate::nn::ParamStore;

pub const CODE_DIM: usize = 8;
pub const UNIFORM_SIZE: usize = 1024;
pub const MAX_CODEBOOK_SIZE: usize = 1 << 15;
/// Ladder used when variable codebook sizes are requested for 8 stages.
pub const VARIABLE_LADDER: [usize; 8] = [4096, 4096, 256, 256, 1024, 1024, 1024, 1024];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookSpec {
    pub num_codebooks: usize,
    pub sizes: Vec<usize>,
    pub code_dim: usize,
    pub input_dim: usize,
}

impl Default for CodebookSpec {
    fn default() -> Self {
        Self::uniform(8).expect("8 uniform codebooks are valid")
    }
}

impl CodebookSpec {
    pub fn uniform(num_codebooks: usize) -> Result<Self> {
        Self::custom(vec![UNIFORM_SIZE; num_codebooks])
    }

    pub fn variable(num_codebooks: usize) -> Result<Self> {
        if num_codebooks != VARIABLE_LADDER.len() {
            bail!(
                Config,
                "variable codebook sizes are defined for {} stages, not {num_codebooks}",
                VARIABLE_LADDER.len()
            );
        }
        Self::custom(VARIABLE_LADDER.to_vec())
    }

    pub fn custom(sizes: Vec<usize>) -> Result<Self> {
        let spec = Self {
            num_codebooks: sizes.len(),
            sizes,
            code_dim: CODE_DIM,
            input_dim: 512,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_input_dim(mut self, input_dim: usize) -> Self {
        self.input_dim = input_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.num_codebooks) {
            bail!(Config, "quantizer.num_codebooks must be in 1..=8, got {}", self.num_codebooks);
        }
        if self.sizes.len() != self.num_codebooks {
            bail!(
                Config,
                "quantizer.sizes has {} entries for {} codebooks",
                self.sizes.len(),
                self.num_codebooks
            );
        }
        if self.code_dim != CODE_DIM {
            bail!(Config, "quantizer.code_dim must be {CODE_DIM}, got {}", self.code_dim);
        }
        if self.input_dim == 0 {
            bail!(Config, "quantizer.input_dim must be positive");
        }
        for &s in &self.sizes {
            if s < 2 || !s.is_power_of_two() || s > MAX_CODEBOOK_SIZE {
                bail!(
                    Config,
                    "quantizer.sizes: {s} is not a power of two in 2..={MAX_CODEBOOK_SIZE}"
                );
            }
        }
        if self.bits_per_frame() != 10 * self.num_codebooks as u32 {
            bail!(
                Config,
                "quantizer.sizes use {} bits per frame; {} codebooks must use {}",
                self.bits_per_frame(),
                self.num_codebooks,
                10 * self.num_codebooks
            );
        }
        Ok(())
    }

    pub fn bits(&self) -> Vec<u32> {
        self.sizes.iter().map(|s| s.trailing_zeros()).collect()
    }

    pub fn bits_per_frame(&self) -> u32 {
        self.bits().iter().sum()
    }

    /// The first `n` stages. Only prefixes that keep 10 bits per stage on
    /// average are valid.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.num_codebooks {
            bail!(
                InvalidInput,
                "cannot use {n} codebooks from a {}-stage quantizer",
                self.num_codebooks
            );
        }
        let spec = Self {
            num_codebooks: n,
            sizes: self.sizes[..n].to_vec(),
            ..self.clone()
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Token indices for one item, stage-major: `data[stage * frames + frame]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMatrix {
    num_codebooks: usize,
    num_frames: usize,
    data: Vec<u32>,
}

impl TokenMatrix {
    pub fn new(num_codebooks: usize, num_frames: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != num_codebooks * num_frames {
            bail!(
                Shape,
                "token matrix {num_codebooks}x{num_frames} needs {} entries, got {}",
                num_codebooks * num_frames,
                data.len()
            );
        }
        Ok(Self {
            num_codebooks,
            num_frames,
            data,
        })
    }

    pub fn zeros(num_codebooks: usize, num_frames: usize) -> Self {
        Self {
            num_codebooks,
            num_frames,
            data: vec![0; num_codebooks * num_frames],
        }
    }

    pub fn num_codebooks(&self) -> usize {
        self.num_codebooks
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn get(&self, stage: usize, frame: usize) -> u32 {
        self.data[stage * self.num_frames + frame]
    }

    pub fn stage(&self, stage: usize) -> &[u32] {
        &self.data[stage * self.num_frames..(stage + 1) * self.num_frames]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.data
    }

    /// Checks every index against the codebook sizes.
    pub fn check(&self, sizes: &[usize]) -> Result<()> {
        if sizes.len() != self.num_codebooks {
            bail!(
                Corrupt,
                "{} token rows for {} codebooks",
                self.num_codebooks,
                sizes.len()
            );
        }
        for (i, &size) in sizes.iter().enumerate() {
            if let Some((m, &t)) = self.stage(i).iter().enumerate().find(|(_, &t)| t as usize >= size) {
                bail!(Corrupt, "token {t} at stage {i}, frame {m} is outside codebook of size {size}");
            }
        }
        Ok(())
    }
}

/// Index of the codeword closest to `z` after normalizing both to unit
/// length (maximum cosine similarity; lowest index on ties). `codebook` rows
/// must already be unit norm. A zero `z` selects index 0.
pub fn nearest_normalized(z: &[f64], codebook: &[f64], dim: usize) -> u32 {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return 0;
    }
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (j, c) in codebook.chunks_exact(dim).enumerate() {
        let score: f64 = z.iter().zip(c).map(|(a, b)| a / norm * b).sum();
        if score > best_score {
            best_score = score;
            best = j;
        }
    }
    best as u32
}

fn normalize_rows(values: &[f64], dim: usize) -> Vec<f64> {
    let mut out = values.to_vec();
    for row in out.chunks_exact_mut(dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

struct Stage {
    proj_in: Tensor,
    proj_out: Tensor,
    codebook: Tensor,
}

#[derive(Debug, Clone)]
pub struct QuantizeResult {
    /// `[batch, frames, input_dim]`; forward value of the quantized latent,
    /// differentiable only with respect to quantizer parameters.
    pub quantized: Tensor,
    /// Same values as `quantized`, with an identity gradient path to the
    /// latent for the decoder.
    pub straight_through: Tensor,
    pub tokens: Vec<TokenMatrix>,
    pub vq_loss: Tensor,
    pub commit_loss: Tensor,
    /// Mean over frames of the input latent's L2 norm.
    pub input_norm: f64,
    /// Mean over frames of the residual L2 norm after each stage.
    pub per_stage_residual_norm: Vec<f64>,
    /// Projected residual `[batch * frames, code_dim]` entering each stage.
    pub projected: Vec<Tensor>,
}

pub struct Quantizer {
    spec: CodebookSpec,
    stages: Vec<Stage>,
}

impl Quantizer {
    /// Projections start as orthonormal pairs (output = transpose of input)
    /// and codewords as random unit vectors.
    pub fn new(store: &mut ParamStore, name: &str, spec: &CodebookSpec) -> Result<Self> {
        spec.validate()?;
        let (d, k) = (spec.input_dim, spec.code_dim);
        if d < k {
            bail!(Config, "quantizer.input_dim {d} is smaller than code_dim {k}");
        }
        let mut stages = Vec::with_capacity(spec.num_codebooks);
        for (i, &size) in spec.sizes.iter().enumerate() {
            let basis = orthonormal_columns(store.draw_normal(d * k), d, k);
            let mut transposed = vec![0.0; k * d];
            for r in 0..d {
                for c in 0..k {
                    transposed[c * d + r] = basis[r * k + c];
                }
            }
            let proj_in = store.from_values(&format!("{name}.{i}.proj_in"), &[d, k], basis)?;
            let proj_out = store.from_values(&format!("{name}.{i}.proj_out"), &[k, d], transposed)?;
            let codes = normalize_rows(&store.draw_normal(size * k), k);
            let codebook = store.from_values(&format!("{name}.{i}.codebook"), &[size, k], codes)?;
            stages.push(Stage {
                proj_in,
                proj_out,
                codebook,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            stages,
        })
    }

    pub fn spec(&self) -> &CodebookSpec {
        &self.spec
    }

    pub fn quantize(&self, latent: &Tensor) -> Result<QuantizeResult> {
        self.quantize_stages(latent, self.spec.num_codebooks)
    }

    /// Quantizes with the first `active` stages only.
    pub fn quantize_stages(&self, latent: &Tensor, active: usize) -> Result<QuantizeResult> {
        let (b, m, d) = latent.dims3()?;
        if d != self.spec.input_dim {
            bail!(Shape, "latent has {d} channels, quantizer expects {}", self.spec.input_dim);
        }
        if b * m == 0 {
            bail!(InvalidInput, "cannot quantize an empty latent");
        }
        if active == 0 || active > self.stages.len() {
            bail!(InvalidInput, "{active} active stages requested of {}", self.stages.len());
        }
        let n = b * m;
        let k = self.spec.code_dim;
        let flat = latent.reshape((n, d))?;
        let mut residual = flat.detach();
        let input_norm = mean_row_norm(&residual)?;
        let mut acc: Option<Tensor> = None;
        let mut indices = Vec::with_capacity(active);
        let mut norms = Vec::with_capacity(active);
        let mut projected = Vec::with_capacity(active);
        for stage in &self.stages[..active] {
            let z = residual.matmul(&stage.proj_in)?;
            let zv = to_f64(&z)?;
            let cb = normalize_rows(&to_f64(&stage.codebook)?, k);
            let ids: Vec<u32> = zv.chunks_exact(k).map(|row| nearest_normalized(row, &cb, k)).collect();
            let idx = Tensor::from_vec(ids.clone(), n, z.device())?;
            let selected = stage.codebook.index_select(&idx, 0)?;
            let passed = (selected + (&z - z.detach())?)?;
            let out = passed.matmul(&stage.proj_out)?;
            residual = (residual - &out)?;
            norms.push(mean_row_norm(&residual)?);
            acc = Some(match acc {
                None => out,
                Some(a) => (a + out)?,
            });
            indices.push(ids);
            projected.push(z);
        }
        let quantized = acc.expect("at least one stage").reshape((b, m, d))?;
        let straight_through = (&quantized + (latent - latent.detach())?)?;
        let tokens = (0..b)
            .map(|item| {
                let data = indices
                    .iter()
                    .flat_map(|ids| ids[item * m..(item + 1) * m].iter().copied())
                    .collect();
                TokenMatrix::new(active, m, data)
            })
            .collect::<Result<Vec<_>>>()?;
        let (vq_loss, commit_loss) = vq_commit_losses(latent, &quantized)?;
        Ok(QuantizeResult {
            quantized,
            straight_through,
            tokens,
            vq_loss,
            commit_loss,
            input_norm,
            per_stage_residual_norm: norms,
            projected,
        })
    }

    /// `[1, frames, input_dim]` from tokens; the embedding path of
    /// [`Quantizer::quantize`] evaluated on given indices.
    pub fn dequantize(&self, tokens: &TokenMatrix) -> Result<Tensor> {
        let active = tokens.num_codebooks();
        if active == 0 || active > self.stages.len() {
            bail!(
                Corrupt,
                "{active} token rows for a {}-stage quantizer",
                self.stages.len()
            );
        }
        tokens.check(&self.spec.sizes[..active])?;
        let m = tokens.num_frames();
        let d = self.spec.input_dim;
        if m == 0 {
            return Ok(Tensor::zeros((1, 0, d), self.stages[0].codebook.dtype(), self.stages[0].codebook.device())?);
        }
        let mut acc: Option<Tensor> = None;
        for (i, stage) in self.stages[..active].iter().enumerate() {
            let idx = Tensor::from_vec(tokens.stage(i).to_vec(), m, stage.codebook.device())?;
            let out = stage.codebook.index_select(&idx, 0)?.matmul(&stage.proj_out)?;
            acc = Some(match acc {
                None => out,
                Some(a) => (a + out)?,
            });
        }
        Ok(acc.expect("at least one stage").reshape((1, m, d))?)
    }

    /// `proj_out(codebook[index])` for one stage, `[input_dim]`.
    pub fn stage_embedding(&self, stage: usize, index: u32) -> Result<Tensor> {
        let s = &self.stages[stage];
        let idx = Tensor::new(&[index], s.codebook.device())?;
        Ok(s.codebook.index_select(&idx, 0)?.matmul(&s.proj_out)?.squeeze(0)?)
    }

    /// Unit-normalized codebook of one stage as `[size * code_dim]` values.
    pub fn normalized_codebook(&self, stage: usize) -> Result<Vec<f64>> {
        Ok(normalize_rows(&to_f64(&self.stages[stage].codebook)?, self.spec.code_dim))
    }
}

fn to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

fn mean_row_norm(x: &Tensor) -> Result<f64> {
    let n = x.dim(0)?;
    let s = x.to_dtype(DType::F64)?.sqr()?.sum(1)?.sqrt()?.sum_all()?.to_scalar::<f64>()?;
    Ok(s / n as f64)
}

fn orthonormal_columns(mut a: Vec<f64>, rows: usize, cols: usize) -> Vec<f64> {
    for c in 0..cols {
        for p in 0..c {
            let dot: f64 = (0..rows).map(|r| a[r * cols + c] * a[r * cols + p]).sum();
            for r in 0..rows {
                a[r * cols + c] -= dot * a[r * cols + p];
            }
        }
        let n = (0..rows).map(|r| a[r * cols + c].powi(2)).sum::<f64>().sqrt();
        for r in 0..rows {
            a[r * cols + c] /= n;
        }
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageUtilization {
    pub fraction: f64,
    pub perplexity: f64,
}

/// Fraction of codewords used and perplexity of the empirical index
/// distribution, per stage, over a history of token matrices.
pub fn utilization_stats(history: &[TokenMatrix], sizes: &[usize]) -> Vec<StageUtilization> {
    sizes
        .iter()
        .enumerate()
        .map(|(i, &size)| {
            let mut counts: HashMap<u32, usize> = HashMap::new();
            let mut total = 0usize;
            for t in history.iter().filter(|t| t.num_codebooks() > i) {
                for &id in t.stage(i) {
                    *counts.entry(id).or_default() += 1;
                    total += 1;
                }
            }
            if total == 0 {
                return StageUtilization {
                    fraction: 0.0,
                    perplexity: 0.0,
                };
            }
            let entropy: f64 = counts
                .values()
                .map(|&c| {
                    let p = c as f64 / total as f64;
                    -p * p.ln()
                })
                .sum();
            StageUtilization {
                fraction: counts.len() as f64 / size as f64,
                perplexity: entropy.exp(),
            }
        })
        .collect()
}

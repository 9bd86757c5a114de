use std::collections::VecDeque;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};

use super::dataset::{Dataset, RngState};
use super::optim::{AdamW, AdamWConfig};
use super::{lr_schedule, DecayUnit};
use crate::checkpoint::CheckpointFile;
use crate::codec::{hex, CodecModel, ForwardOutput};
use crate::config::{AppConfig, ResolvedConfig};
use crate::discriminators::Discriminators;
use crate::error::{bail, Error, Result};
use crate::losses::{
    feature_matching_loss, lsgan_discriminator_loss, lsgan_generator_loss, spectral_recon_loss, total_losses,
    GeneratorLossParts, LossReport, MelLoss,
};
use crate::nn::ops::scalar;
use crate::nn::ParamStore;
use crate::quantizer::{utilization_stats, StageUtilization, TokenMatrix};

pub const LOSS_LOG: &str = "losses.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

const DISC_PREFIX: &str = "discriminator/";
const OPT_G_PREFIX: &str = "opt_generator/";
const OPT_D_PREFIX: &str = "opt_discriminator/";
const TOKEN_WINDOW: usize = 100;

/// Owns the models, optimizers and step counter.
pub struct Trainer {
    config: AppConfig,
    resolved: ResolvedConfig,
    model: CodecModel,
    disc_store: ParamStore,
    discs: Discriminators,
    mel: MelLoss,
    opt_g: AdamW,
    opt_d: AdamW,
    step: u64,
    steps_per_epoch: u64,
    recent_tokens: VecDeque<Vec<TokenMatrix>>,
}

/// Keeps freed heap memory in the process. Training allocates and releases
/// the same large activation buffers every step; returning them to the OS
/// makes each step pay for fresh page faults.
fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
            libc::mallopt(libc::M_TOP_PAD, 256 << 20);
        });
    }
}

impl Trainer {
    pub fn new(config: AppConfig) -> Result<Self> {
        retain_freed_memory();
        let resolved = config.resolve()?;
        let seed = resolved.train.seed;
        let model = CodecModel::new(resolved.codec.clone(), seed)?;
        let mut disc_store = ParamStore::new(seed.wrapping_add(1));
        let discs = Discriminators::new(&mut disc_store, "disc", &resolved.discriminator)?;
        let device = disc_store.device().clone();
        let sr = resolved.codec.stft.sample_rate;
        let mel = if resolved.single_scale_mel {
            MelLoss::single_scale(sr, &device)?
        } else {
            MelLoss::multi_scale(sr, &device)?
        };
        let t = &resolved.train;
        let opt_cfg = AdamWConfig {
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
            weight_decay: t.weight_decay,
        };
        let opt_g = AdamW::new(model.store(), opt_cfg)?;
        let opt_d = AdamW::new(&disc_store, opt_cfg)?;
        Ok(Self {
            config,
            resolved,
            model,
            disc_store,
            discs,
            mel,
            opt_g,
            opt_d,
            step: 0,
            steps_per_epoch: 1,
            recent_tokens: VecDeque::new(),
        })
    }

    pub fn config(&self) -> &AppConfig {
        &self.config
    }

    pub fn resolved(&self) -> &ResolvedConfig {
        &self.resolved
    }

    pub fn model(&self) -> &CodecModel {
        &self.model
    }

    pub fn discriminators(&self) -> &Discriminators {
        &self.discs
    }

    pub fn discriminator_store(&self) -> &ParamStore {
        &self.disc_store
    }

    pub fn mel_loss(&self) -> &MelLoss {
        &self.mel
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Sets how many steps make an epoch (one pass over the clip index).
    pub fn set_steps_per_epoch(&mut self, steps: u64) {
        self.steps_per_epoch = steps.max(1);
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch
    }

    pub fn learning_rate(&self) -> f64 {
        let t = &self.resolved.train;
        let unit = match t.decay_every {
            DecayUnit::Epoch => self.epoch(),
            DecayUnit::Step => self.step,
        };
        lr_schedule(t.lr, t.lr_decay, unit)
    }

    fn adversarial_active(&self) -> bool {
        self.step >= self.resolved.train.adversarial_start_step
    }

    /// Per-stage utilization over tokens from recent steps.
    pub fn codebook_utilization(&self) -> Vec<StageUtilization> {
        let history: Vec<TokenMatrix> = self.recent_tokens.iter().flatten().cloned().collect();
        utilization_stats(&history, &self.resolved.codec.quantizer.sizes)
    }

    fn batch_tensor(&self, batch: &[Vec<f32>]) -> Result<Tensor> {
        let Some(first) = batch.first() else {
            bail!(InvalidInput, "empty batch");
        };
        let t = first.len();
        if batch.iter().any(|x| x.len() != t) {
            bail!(InvalidInput, "batch items have different lengths");
        }
        let flat: Vec<f32> = batch.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (batch.len(), t), self.disc_store.device())?.to_dtype(self.model.store().dtype())?)
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &[Vec<f32>]) -> Result<LossReport> {
        let x = self.batch_tensor(batch)?;
        let lr = self.learning_rate();
        let verify = self.resolved.train.verify_isolation;
        let adversarial = self.adversarial_active();
        let device = x.device().clone();
        let out: ForwardOutput = self.model.forward(&x)?;

        let mut adv_d = 0.0;
        if adversarial {
            let real = self.discs.forward(&x)?;
            let fake = self.discs.forward(&out.audio.detach())?;
            let loss_d = lsgan_discriminator_loss(&real, &fake, &device)?;
            adv_d = scalar(&loss_d)?;
            if !adv_d.is_finite() {
                return Err(Error::NonFinite { term: "adv_d".into() });
            }
            let before = if verify { Some(self.model.store().digest()?) } else { None };
            let grads = loss_d.backward()?;
            self.opt_d.step(&grads, lr)?;
            if let Some(b) = before {
                if b != self.model.store().digest()? {
                    bail!(Internal, "discriminator step modified generator parameters");
                }
            }
        }

        let mel = self.mel.forward(&x, &out.audio)?;
        let zero = Tensor::new(0f32, &device)?.to_dtype(mel.dtype())?;
        let (adv_g, feat) = if adversarial {
            let fake = self.discs.forward_frozen(&out.audio)?;
            let real = self.discs.forward_frozen(&x)?;
            (
                lsgan_generator_loss(&fake, &device)?,
                feature_matching_loss(&real.feature_maps, &fake.feature_maps, &device)?,
            )
        } else {
            (zero.clone(), zero.clone())
        };
        let spectral_recon = if self.resolved.losses.spectral_recon_enabled {
            Some(spectral_recon_loss(
                &out.decoded.log_magnitude,
                &out.decoded.phase,
                &out.inputs.log_magnitude,
                &out.inputs.phase,
                true,
            )?)
        } else {
            None
        };
        let parts = GeneratorLossParts {
            mel,
            adv_g,
            feat,
            vq: out.quantized.vq_loss.clone(),
            commit: out.quantized.commit_loss.clone(),
            spectral_recon,
        };
        let (total, report) = total_losses(&parts, adv_d, &self.resolved.losses)?;
        let before = if verify { Some(self.disc_store.digest()?) } else { None };
        let grads = total.backward()?;
        self.opt_g.step(&grads, lr)?;
        if let Some(b) = before {
            if b != self.disc_store.digest()? {
                bail!(Internal, "generator step modified discriminator parameters");
            }
        }
        self.step += 1;
        self.recent_tokens.push_back(out.quantized.tokens);
        while self.recent_tokens.len() > TOKEN_WINDOW {
            self.recent_tokens.pop_front();
        }
        Ok(report)
    }

    pub fn to_checkpoint(&self, rng: Option<RngState>) -> Result<CheckpointFile> {
        let mut file = CheckpointFile::default();
        self.model.to_checkpoint(&mut file)?;
        file.insert_group(DISC_PREFIX, self.disc_store.tensors());
        file.insert_group(OPT_G_PREFIX, self.opt_g.state());
        file.insert_group(OPT_D_PREFIX, self.opt_d.state());
        let m = &mut file.metadata;
        m.insert("app_config".into(), self.config.to_toml()?);
        m.insert("step".into(), self.step.to_string());
        m.insert("steps_per_epoch".into(), self.steps_per_epoch.to_string());
        m.insert("opt_generator_steps".into(), self.opt_g.steps_taken().to_string());
        m.insert("opt_discriminator_steps".into(), self.opt_d.steps_taken().to_string());
        if let Some(r) = rng {
            m.insert("rng_seed".into(), hex(&r.seed));
            m.insert("rng_stream".into(), r.stream.to_string());
            m.insert("rng_word_pos".into(), r.word_pos.to_string());
        }
        Ok(file)
    }

    pub fn save_checkpoint(&self, path: &Path, rng: Option<RngState>) -> Result<()> {
        self.to_checkpoint(rng)?.write(path)
    }

    /// Restores a trainer and, when stored, the data sampler position.
    pub fn from_checkpoint(file: &CheckpointFile) -> Result<(Self, Option<RngState>)> {
        let config = AppConfig::from_toml(file.meta("app_config")?, &[])?;
        let mut t = Self::new(config)?;
        t.model.store().load(&file.group(crate::codec::GENERATOR_PREFIX))?;
        t.disc_store.load(&file.group(DISC_PREFIX))?;
        t.opt_g
            .load_state(&file.group(OPT_G_PREFIX), parse_meta(file, "opt_generator_steps")?)?;
        t.opt_d
            .load_state(&file.group(OPT_D_PREFIX), parse_meta(file, "opt_discriminator_steps")?)?;
        t.step = parse_meta(file, "step")?;
        t.steps_per_epoch = parse_meta::<u64>(file, "steps_per_epoch")?.max(1);
        let rng = match file.metadata.get("rng_seed") {
            None => None,
            Some(seed_hex) => {
                let bytes = (0..seed_hex.len())
                    .step_by(2)
                    .map(|i| u8::from_str_radix(seed_hex.get(i..i + 2).unwrap_or("zz"), 16))
                    .collect::<std::result::Result<Vec<u8>, _>>()
                    .map_err(|_| Error::Corrupt("rng_seed is not hex".into()))?;
                let seed: [u8; 32] = bytes
                    .try_into()
                    .map_err(|_| Error::Corrupt("rng_seed must be 32 bytes".into()))?;
                Some(RngState {
                    seed,
                    stream: parse_meta(file, "rng_stream")?,
                    word_pos: parse_meta(file, "rng_word_pos")?,
                })
            }
        };
        Ok((t, rng))
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, Option<RngState>)> {
        Self::from_checkpoint(&CheckpointFile::read(path)?)
    }

    /// Trains until `max_steps`, appending to `out_dir/losses.csv` and
    /// writing `out_dir/checkpoint.safetensors` periodically and at the end.
    pub fn run(&mut self, data: &mut Dataset, out_dir: &Path, max_steps: u64) -> Result<Vec<LossReport>> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        std::fs::write(out_dir.join(EFFECTIVE_CONFIG), self.config.to_toml()?)
            .map_err(|e| Error::io(out_dir.join(EFFECTIVE_CONFIG), e))?;
        self.set_steps_per_epoch(data.steps_per_epoch(self.resolved.train.batch_size));
        let log_path = out_dir.join(LOSS_LOG);
        let fresh = !log_path.exists();
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        if fresh {
            writeln!(log, "{}", LossReport::CSV_HEADER).map_err(|e| Error::io(&log_path, e))?;
        }
        let ckpt = out_dir.join(CHECKPOINT_FILE);
        let every = self.resolved.train.checkpoint_every.max(1);
        let mut reports = Vec::new();
        while self.step < max_steps {
            let lr = self.learning_rate();
            let batch = data.next_batch(self.resolved.train.batch_size);
            let report = self.train_step(&batch)?;
            writeln!(log, "{}", report.csv_row(self.step, lr)).map_err(|e| Error::io(&log_path, e))?;
            log::info!(
                "step {} mel {:.4} total_g {:.4} total_d {:.4}",
                self.step,
                report.mel,
                report.total_g,
                report.total_d
            );
            reports.push(report);
            if self.step % every == 0 {
                self.save_checkpoint(&ckpt, Some(data.rng_state()))?;
            }
        }
        self.save_checkpoint(&ckpt, Some(data.rng_state()))?;
        Ok(reports)
    }

    /// Reconstructs `audio` through the codec (inference path).
    pub fn reconstruct(&self, audio: &[f64]) -> Result<Vec<f64>> {
        let tokens = self.model.encode(audio, self.resolved.codec.quantizer.num_codebooks)?;
        self.model.decode(&tokens, audio.len())
    }

    pub fn dtype(&self) -> DType {
        self.model.store().dtype()
    }
}

fn parse_meta<T: std::str::FromStr>(file: &CheckpointFile, key: &str) -> Result<T> {
    file.meta(key)?
        .parse()
        .map_err(|_| Error::Corrupt(format!("checkpoint metadata `{key}` is malformed")))
}

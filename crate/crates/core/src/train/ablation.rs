use std::fmt;
use std::str::FromStr;

use super::dataset::Dataset;
use super::trainer::Trainer;
use crate::config::AppConfig;
use crate::error::{bail, Error, Result};
use crate::losses::LossReport;
use crate::metrics::{lsd, vuv_f1};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoUnwrap,
    NoConvnext,
    SingleScale,
    SpectralRecon,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoUnwrap,
        Variant::NoConvnext,
        Variant::SingleScale,
        Variant::SpectralRecon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoUnwrap => "no_unwrap",
            Variant::NoConvnext => "no_convnext",
            Variant::SingleScale => "single_scale",
            Variant::SpectralRecon => "spectral_recon",
        }
    }

    /// Sets this variant's flag on top of `cfg`, clearing the others.
    pub fn apply(self, cfg: &mut AppConfig) {
        let a = &mut cfg.train.ablation;
        *a = Default::default();
        match self {
            Variant::Full => {}
            Variant::NoUnwrap => a.no_unwrap = true,
            Variant::NoConvnext => a.no_convnext = true,
            Variant::SingleScale => a.single_scale_disc = true,
            Variant::SpectralRecon => a.spectral_recon = true,
        }
    }

    /// Parses a comma-separated list; `all` expands to every variant.
    pub fn parse_list(s: &str) -> Result<Vec<Variant>> {
        let mut out = Vec::new();
        for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            if item == "all" {
                out.extend(Self::ALL);
            } else {
                out.push(item.parse()?);
            }
        }
        if out.is_empty() {
            bail!(Config, "no ablation variants given");
        }
        Ok(out)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub steps: u64,
    pub lsd: f64,
    pub vuv_f1: f64,
    pub final_losses: Option<LossReport>,
    pub all_finite: bool,
    pub structural_ok: bool,
    pub structural_note: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub const CSV_HEADER: &'static str = "variant,steps,lsd,vuv_f1,final_mel,final_total_g,all_finite,structural_ok,structural_note";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let (mel, tot) = r
                .final_losses
                .as_ref()
                .map(|l| (l.mel.to_string(), l.total_g.to_string()))
                .unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},\"{}\"\n",
                r.variant,
                r.steps,
                r.lsd,
                r.vuv_f1,
                mel,
                tot,
                r.all_finite,
                r.structural_ok,
                r.structural_note.replace('"', "\"\"")
            ));
        }
        s
    }

    /// Aligned text table for terminals.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<16}{:>7}{:>10}{:>10}{:>12}  {}\n",
            "variant", "steps", "LSD", "V/UV F1", "final mel", "structure"
        );
        for r in &self.rows {
            let mel = r.final_losses.as_ref().map(|l| l.mel).unwrap_or(f64::NAN);
            s.push_str(&format!(
                "{:<16}{:>7}{:>10.4}{:>10.4}{:>12.4}  {}{}\n",
                r.variant.name(),
                r.steps,
                r.lsd,
                r.vuv_f1,
                mel,
                if r.structural_ok { "ok" } else { "FAILED" },
                if r.all_finite { "" } else { " (non-finite loss)" }
            ));
        }
        if let Some(full) = self.rows.iter().find(|r| r.variant == Variant::Full) {
            for r in self.rows.iter().filter(|r| r.variant != Variant::Full) {
                let order = if full.lsd <= r.lsd { "<=" } else { ">" };
                s.push_str(&format!("LSD full {order} {} ({:.4} vs {:.4})\n", r.variant, full.lsd, r.lsd));
            }
        }
        s
    }
}

fn structural_check(variant: Variant, trainer: &Trainer, probe: &[f64], last: Option<&LossReport>) -> Result<(bool, String)> {
    let model = trainer.model();
    Ok(match variant {
        Variant::Full => {
            let inputs = model.spectral_inputs(&[probe.to_vec()])?;
            let nonzero = inputs.phase_gradient.abs()?.max_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()? > 0.0;
            let ok = nonzero && model.encoder().uses_convnext() && model.decoder().uses_convnext();
            (ok, "phase-gradient stream active; ConvNeXt blocks".into())
        }
        Variant::NoUnwrap => {
            let inputs = model.spectral_inputs(&[probe.to_vec()])?;
            let peak = inputs
                .phase_gradient
                .abs()?
                .max_all()?
                .to_dtype(candle_core::DType::F64)?
                .to_scalar::<f64>()?;
            (peak == 0.0, format!("max |phase gradient input| = {peak}"))
        }
        Variant::NoConvnext => {
            let ok = !model.encoder().uses_convnext() && !model.decoder().uses_convnext();
            (ok, "residual blocks in encoder and decoder".into())
        }
        Variant::SingleScale => {
            let d = trainer.discriminators().num_stft_scales();
            let m = trainer.mel_loss().num_scales();
            (d == 1 && m == 1, format!("{d} STFT discriminator scale(s), {m} mel scale(s)"))
        }
        Variant::SpectralRecon => match last.and_then(|l| l.spectral_recon) {
            Some(v) if v.is_finite() => (true, format!("spectral recon = {v}")),
            Some(v) => (false, format!("spectral recon = {v}")),
            None => (false, "spectral recon term missing".into()),
        },
    })
}

/// Trains each variant from the same seed for `steps` steps on `clips`, then
/// reconstructs every clip and reports LSD and V/UV F1.
pub fn run_ablation(
    base: &AppConfig,
    variants: &[Variant],
    names: &[String],
    clips: &[Vec<f32>],
    steps: u64,
) -> Result<AblationReport> {
    if clips.is_empty() {
        bail!(Data, "ablation needs at least one clip");
    }
    let mut report = AblationReport::default();
    for &variant in variants {
        let mut cfg = base.clone();
        variant.apply(&mut cfg);
        let mut trainer = Trainer::new(cfg)?;
        let t = trainer.resolved().train.clone();
        let mut data = Dataset::from_clips(names.to_vec(), clips.to_vec(), t.chunk_samples, t.seed)?;
        trainer.set_steps_per_epoch(data.steps_per_epoch(t.batch_size));
        let mut last = None;
        let mut all_finite = true;
        for _ in 0..steps {
            let batch = data.next_batch(t.batch_size);
            match trainer.train_step(&batch) {
                Ok(r) => last = Some(r),
                Err(Error::NonFinite { term }) => {
                    log::warn!("{variant}: non-finite {term}");
                    all_finite = false;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let sr = t.sample_rate;
        let (mut lsd_sum, mut f1_sum) = (0.0, 0.0);
        for c in clips {
            let x: Vec<f64> = c.iter().map(|&v| v as f64).collect();
            let y = trainer.reconstruct(&x)?;
            lsd_sum += lsd(&x, &y, sr)?;
            f1_sum += vuv_f1(&x, &y, sr)?;
        }
        let probe: Vec<f64> = clips[0].iter().map(|&v| v as f64).collect();
        let (structural_ok, structural_note) = structural_check(variant, &trainer, &probe, last.as_ref())?;
        report.rows.push(AblationRow {
            variant,
            steps: trainer.step(),
            lsd: lsd_sum / clips.len() as f64,
            vuv_f1: f1_sum / clips.len() as f64,
            final_losses: last,
            all_finite,
            structural_ok,
            structural_note,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!(Variant::parse_list("all").unwrap().len(), 5);
        assert_eq!(
            Variant::parse_list("full, no_unwrap").unwrap(),
            vec![Variant::Full, Variant::NoUnwrap]
        );
        assert!(Variant::parse_list("bogus").is_err());
    }

    #[test]
    fn apply_sets_one_flag() {
        let mut cfg = AppConfig::toy();
        Variant::NoUnwrap.apply(&mut cfg);
        Variant::SingleScale.apply(&mut cfg);
        assert!(!cfg.train.ablation.no_unwrap);
        assert!(cfg.train.ablation.single_scale_disc);
        let r = cfg.resolve().unwrap();
        assert!(r.single_scale_mel);
        assert_eq!(r.discriminator.fft_sizes.len(), 1);
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stftcodec::audio::{write_wav, WavEncoding};
use stftcodec::bitstream::{decode_file, encode_file, Bitstream};
use stftcodec::codec::CodecModel;
use stftcodec::config::AppConfig;
use stftcodec::metrics::{evaluate_dir, ExternalTools};
use stftcodec::train::{build_dataset, run_ablation, Trainer, Variant, CHECKPOINT_FILE};
use stftcodec::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "stftcodec", version, about = "STFT-domain neural audio codec")]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a codec on a directory of mono WAV files.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from OUT/checkpoint.safetensors if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Compress a WAV file to a bitstream.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use only the first N quantizer stages.
        #[arg(long)]
        codebooks: Option<usize>,
    },
    /// Reconstruct a WAV file from a bitstream.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Decode even if the stream names a different model hash.
        #[arg(long)]
        allow_hash_mismatch: bool,
        #[arg(long, value_enum, default_value_t = Encoding::Float32)]
        encoding: Encoding,
    },
    /// Encode and decode every WAV in a directory and report metrics.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        codebooks: Option<usize>,
        /// External metric as NAME=PATH; the tool is run as `PATH ref.wav deg.wav`.
        #[arg(long = "metric-tool", value_parser = parse_tool)]
        tools: Vec<(String, PathBuf)>,
    },
    /// Train and compare ablation variants.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated variants or `all`: full, no_unwrap, no_convnext,
        /// single_scale, spectral_recon.
        #[arg(long, default_value = "all")]
        variants: String,
        /// Training clips; a synthetic voiced clip is used when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        steps: u64,
        /// Also write the comparison as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print a bitstream header.
    Inspect {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long, env = "STFTCODEC_CONFIG")]
    config: Option<PathBuf>,
    /// Defaults used when no config file is given.
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    /// Override a config value, e.g. `--set train.batch_size=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Full,
    Toy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Encoding {
    Float32,
    Pcm16,
}

impl ConfigArgs {
    fn load(&self) -> stftcodec::Result<AppConfig> {
        match (&self.config, self.preset) {
            (Some(path), _) => AppConfig::load(Some(path), &self.overrides),
            (None, Preset::Full) => AppConfig::load(None, &self.overrides),
            (None, Preset::Toy) => AppConfig::from_toml(&AppConfig::toy().to_toml()?, &self.overrides),
        }
    }
}

fn parse_tool(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
        _ => Err(format!("expected NAME=PATH, got `{s}`")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        e if e.is_data_error() => EXIT_DATA,
        _ => EXIT_RUNTIME,
    }
}

fn run(cmd: Command) -> stftcodec::Result<()> {
    match cmd {
        Command::Train {
            config,
            data,
            out,
            resume,
        } => train(&config, &data, &out, resume),
        Command::Encode {
            model,
            input,
            out,
            codebooks,
        } => {
            let model = CodecModel::load(&model)?;
            let stream = encode_file(&input, &model, codebooks)?;
            stream.write(&out)?;
            println!(
                "{}: {} samples, {} codebooks, {} bps",
                out.display(),
                stream.header.original_num_samples,
                stream.header.num_codebooks(),
                stream.bitrate()
            );
            Ok(())
        }
        Command::Decode {
            model,
            input,
            out,
            allow_hash_mismatch,
            encoding,
        } => {
            let model = CodecModel::load(&model)?;
            let audio = decode_file(&input, &model, allow_hash_mismatch)?;
            let enc = match encoding {
                Encoding::Float32 => WavEncoding::Float32,
                Encoding::Pcm16 => WavEncoding::Pcm16,
            };
            write_wav(&out, &audio, enc)?;
            println!("{}: {} samples at {} Hz", out.display(), audio.samples.len(), audio.sample_rate);
            Ok(())
        }
        Command::Eval {
            model,
            data,
            report,
            codebooks,
            tools,
        } => {
            let model = CodecModel::load(&model)?;
            let tools: ExternalTools = tools;
            let r = evaluate_dir(&model, &data, codebooks, &tools)?;
            write_text(&report, &r.to_csv())?;
            print!("{}", r.summary());
            Ok(())
        }
        Command::Ablate {
            config,
            variants,
            data,
            steps,
            report,
        } => {
            let cfg = config.load()?;
            let variants = Variant::parse_list(&variants)?;
            let t = &cfg.train;
            let (names, clips) = match data {
                Some(dir) => {
                    let d = build_dataset(&dir, t.sample_rate, t.chunk_samples, t.seed)?;
                    (d.names().to_vec(), d.clips().to_vec())
                }
                None => (vec!["synthetic".to_string()], vec![synthetic_clip(t.sample_rate)]),
            };
            let r = run_ablation(&cfg, &variants, &names, &clips, steps)?;
            if let Some(path) = report {
                write_text(&path, &r.to_csv())?;
            }
            print!("{}", r.table());
            if r.rows.iter().any(|row| !row.structural_ok || !row.all_finite) {
                return Err(Error::Internal("one or more variants failed their checks".into()));
            }
            Ok(())
        }
        Command::Inspect { input } => {
            let stream = Bitstream::read(&input)?;
            print!("{}", stream.header.describe());
            Ok(())
        }
    }
}

fn train(args: &ConfigArgs, data: &Path, out: &Path, resume: bool) -> stftcodec::Result<()> {
    let ckpt = out.join(CHECKPOINT_FILE);
    let (mut trainer, rng) = if resume && ckpt.exists() {
        if args.config.is_some() || !args.overrides.is_empty() {
            log::warn!("resuming: using the configuration stored in {}", ckpt.display());
        }
        Trainer::load_checkpoint(&ckpt)?
    } else {
        (Trainer::new(args.load()?)?, None)
    };
    let t = trainer.resolved().train.clone();
    let mut dataset = build_dataset(data, t.sample_rate, t.chunk_samples, t.seed)?;
    if let Some(state) = rng {
        dataset.set_rng_state(state);
    }
    let start = trainer.step();
    let reports = trainer.run(&mut dataset, out, t.max_steps)?;
    match reports.last() {
        Some(r) => println!(
            "trained steps {}..{}: mel {:.4}, total_g {:.4}, total_d {:.4}",
            start,
            trainer.step(),
            r.mel,
            r.total_g,
            r.total_d
        ),
        None => println!("already at step {}", trainer.step()),
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> stftcodec::Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// One second of a 140 Hz harmonic tone with slow vibrato and a short pause.
fn synthetic_clip(sample_rate: u32) -> Vec<f32> {
    let sr = sample_rate as f64;
    let mut phase = 0.0f64;
    (0..sample_rate as usize)
        .map(|n| {
            let t = n as f64 / sr;
            phase += 2.0 * std::f64::consts::PI * (140.0 + 8.0 * (2.0 * std::f64::consts::PI * 3.0 * t).sin()) / sr;
            let gate = if (0.45..0.6).contains(&t) { 0.0 } else { 1.0 };
            let v: f64 = (1..=6).map(|k| (k as f64 * phase).sin() / k as f64).sum();
            (0.25 * gate * v) as f32
        })
        .collect()
}

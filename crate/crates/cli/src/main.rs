use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use skws::audio::{read_wav, write_wav, AudioClip, WavEncoding};
use skws::data::{mono_signal, Frontend, Prior};
use skws::pipeline::{self, ExperimentConfig, System, SystemSpec};
use skws::roomsim::{RenderMode, NO_PRIOR};
use skws::stream::StreamState;

#[derive(Parser)]
#[command(name = "skws", version, about = "Direction-aware multi-channel keyword spotting")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic speech corpus and noise pool.
    SynthCorpus(Common),
    /// Scan the clean corpus into <out>/manifest.jsonl.
    Scan(Common),
    /// Render a multi-channel train or test set.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Mode::Train)]
        mode: Mode,
    },
    /// Beamform a multi-channel WAV toward a zone with the GSC.
    Gsc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Target zone (1-based).
        #[arg(long)]
        zone: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the selected system on the rendered training set.
    Train(Common),
    /// Evaluate a trained system on a rendered test set.
    Eval(Common),
    /// Run a trained system over a WAV and print trigger events as JSON lines.
    Stream {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Zone fed to the direction embedding; ignored by no-prior systems.
        #[arg(long, default_value_t = NO_PRIOR)]
        zone: usize,
        /// Samples per pushed chunk.
        #[arg(long, default_value_t = 1600)]
        chunk: usize,
    },
    /// Collect evaluation results into <out>/report.csv.
    Report(Common),
    /// Synthesize, render, train, evaluate and report in one go.
    Run(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    Oracle,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum SystemArg {
    Single,
    Cascade,
    E2e,
}

/// Flags shared by every command; each one overrides the config file.
#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Experiment root directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Test SNR in dB, or "clean".
    #[arg(long, value_parser = parse_snr)]
    snr: Option<Snr>,
    #[arg(long, value_parser = ["2", "3"])]
    channels: Option<String>,
    #[arg(long, value_parser = ["6", "12"])]
    zones: Option<String>,
    #[arg(long, value_enum)]
    prior: Option<PriorArg>,
    #[arg(long, value_enum)]
    system: Option<SystemArg>,
}

#[derive(Clone, Copy)]
struct Snr(Option<f64>);

fn parse_snr(s: &str) -> Result<Snr, String> {
    if s == "clean" {
        return Ok(Snr(None));
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Snr(Some(v))),
        _ => Err(format!("expected a number of dB or \"clean\", got {s:?}")),
    }
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(c) = &self.channels {
            cfg.channels = c.parse()?;
        }
        if let Some(z) = &self.zones {
            cfg.zones = Some(z.parse()?);
        }
        if let Some(p) = self.prior {
            cfg.prior = match p {
                PriorArg::Oracle => Prior::Oracle,
                PriorArg::None => Prior::None,
            };
        }
        if let Some(s) = self.system {
            cfg.system = match s {
                SystemArg::Single => System::Single,
                SystemArg::Cascade => System::Cascade,
                SystemArg::E2e => System::E2e,
            };
        }
        if let Some(Snr(Some(s))) = self.snr {
            cfg.test_snrs = vec![s];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The single test SNR this invocation targets.
    fn test_snr(&self, cfg: &ExperimentConfig) -> Result<Option<f64>> {
        match self.snr {
            Some(Snr(s)) => Ok(s),
            None => match cfg.test_snrs.as_slice() {
                [s] => Ok(Some(*s)),
                _ => bail!(
                    "--snr is required when the config lists {} test SNRs",
                    cfg.test_snrs.len()
                ),
            },
        }
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{v}");
}

fn checkpoint(root: &Path, spec: &SystemSpec) -> PathBuf {
    pipeline::model_dir(root, spec).join("model.ckpt")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthCorpus(c) => {
            let cfg = c.load()?;
            let n = pipeline::synth_corpus(&cfg, &c.out)?;
            print_json(&json!({ "clips": n, "corpus": cfg.corpus_dir(&c.out), "noise": cfg.noise_dir(&c.out) }));
        }
        Command::Scan(c) => {
            let cfg = c.load()?;
            let m = pipeline::scan(&cfg, &c.out)?;
            print_json(
                &json!({ "entries": m.entries.len(), "num_classes": m.num_classes, "keywords": m.keyword_list }),
            );
        }
        Command::Render { common: c, mode } => {
            let cfg = c.load()?;
            let (mode, snr) = match mode {
                Mode::Train => (RenderMode::Train, None),
                Mode::Test => (RenderMode::Test, c.test_snr(&cfg)?),
            };
            let (records, tag) = pipeline::render(&cfg, &c.out, mode, snr)?;
            print_json(&json!({ "tag": tag, "records": records.len() }));
        }
        Command::Gsc {
            common: c,
            input,
            zone,
            output,
        } => {
            let cfg = c.load()?;
            let clip = read_wav(&input)?;
            let y = mono_signal(&clip.to_f64(), Frontend::Gsc, zone, cfg.zones)
                .with_context(|| format!("beamforming {}", input.display()))?;
            let samples = y.len();
            let clipped = write_wav(
                &output,
                &AudioClip::from_f64(&[y], clip.sample_rate())?,
                WavEncoding::Float32,
            )?;
            print_json(&json!({ "output": output, "samples": samples, "clipped": clipped }));
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            let spec = cfg.system_spec()?;
            let tag = pipeline::render_tag(RenderMode::Train, cfg.channels, spec.scheme()?.zones, None);
            let records =
                pipeline::load_render(&c.out, &tag).context("loading the training set (run `render` first)")?;
            let dir = pipeline::model_dir(&c.out, &spec);
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let log_path = dir.join("train_log.jsonl");
            let mut log =
                BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
            log::info!("training {} on {} utterances", spec.name(), records.len());
            let sys = pipeline::train_system(&cfg, spec, &records, cfg.seed, Some(&mut log))?;
            log.flush()?;
            let path = pipeline::save_system(&sys, &dir)?;
            let report = sys.report.as_ref().expect("trained systems carry a report");
            print_json(&json!({
                "system": spec.name(),
                "params": sys.params(),
                "checkpoint": path,
                "best_epoch": report.best_epoch,
                "steps": report.steps,
            }));
        }
        Command::Eval(c) => {
            let cfg = c.load()?;
            let spec = cfg.system_spec()?;
            let sys = pipeline::load_system(&checkpoint(&c.out, &spec))?;
            let snr = c.test_snr(&cfg)?;
            let tag = pipeline::render_tag(RenderMode::Test, cfg.channels, spec.scheme()?.zones, snr);
            let records =
                pipeline::load_render(&c.out, &tag).context("loading the test set (run `render --mode test` first)")?;
            let result = pipeline::evaluate_system(&sys, &records, snr)?;
            pipeline::save_result(&c.out, &result)?;
            print_json(&serde_json::to_value(&result)?);
        }
        Command::Stream {
            common: c,
            input,
            zone,
            chunk,
        } => {
            let cfg = c.load()?;
            let spec = cfg.system_spec()?;
            let sys = pipeline::load_system(&checkpoint(&c.out, &spec))?;
            stream(&cfg, sys, &input, zone, chunk)?;
        }
        Command::Report(c) => {
            c.load()?;
            print!("{}", pipeline::report(&c.out)?);
        }
        Command::Run(c) => {
            let cfg = c.load()?;
            print!("{}", pipeline::run(&cfg, &c.out)?);
        }
    }
    Ok(())
}

fn stream(cfg: &ExperimentConfig, sys: pipeline::TrainedSystem, input: &Path, zone: usize, chunk: usize) -> Result<()> {
    if chunk == 0 {
        bail!("--chunk must be positive");
    }
    let clip = read_wav(input)?;
    let mut channels = clip.to_f64();
    let zone = if sys.spec.prior == Prior::None { NO_PRIOR } else { zone };
    match sys.spec.system {
        System::Single => channels.truncate(1),
        System::Cascade => {
            if zone == NO_PRIOR {
                bail!("the cascade needs --zone to steer the beamformer");
            }
            channels = vec![mono_signal(&channels, Frontend::Gsc, zone, sys.spec.zones)?];
        }
        System::E2e => {}
    }
    let keywords = cfg.keywords.clone();
    let mut state = StreamState::new(Arc::new(sys.model), zone, cfg.smoother.clone())?;
    let n = channels[0].len();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let piece: Vec<Vec<f64>> = channels.iter().map(|c| c[start..end].to_vec()).collect();
        for frame in state.push(&piece)? {
            for ev in frame.triggers {
                let name = keywords.get(ev.keyword).cloned().unwrap_or_default();
                let line = json!({
                    "keyword": name,
                    "keyword_index": ev.keyword,
                    "frame": ev.frame,
                    "time_s": ev.time_s,
                    "posterior": ev.posterior,
                });
                writeln!(out, "{line}")?;
            }
        }
        start = end;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<skws::Error>().map_or("error", skws::Error::kind);
            eprintln!("{}", json!({ "error": kind, "message": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}

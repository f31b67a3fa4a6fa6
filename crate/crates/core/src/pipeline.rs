//! Experiment plumbing: corpus synthesis, rendering, training, evaluation
//! and reporting for the six compared systems, with a fixed on-disk layout.
//!
//! ```text
//! <root>/corpus/<word>/*.wav          clean speech (synthetic or real)
//! <root>/noise/<category>/*.wav       noise pool
//! <root>/manifest.jsonl               scanned corpus
//! <root>/render/<tag>/manifest.jsonl  rendered multi-channel sets
//! <root>/models/<system>/             checkpoint and training log
//! <root>/results/<system>@<snr>.json  evaluation results
//! <root>/report.csv                   comparison table
//! ```

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audio::{self, DatasetManifest, RenderRecord, Split};
use crate::data::{self, FeatureSpec, Frontend, Prior, ShiftAugment};
use crate::error::{Error, Result};
use crate::eval::{self, EvalResult};
use crate::net::{load_checkpoint, save_checkpoint, CheckpointHeader, Model, ModelConfig};
use crate::roomsim::{build_dataset, NoisePool, RenderConfig, RenderMode, ZoneScheme};
use crate::stream::SmootherConfig;
use crate::synth::{self, CorpusConfig};
use crate::tensor::Scalar;
use crate::train::{fit_augmented, FitOutput, FitReport, Precision, TrainConfig};

/// Keyword spotter family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum System {
    /// Filterbank model on the first microphone.
    Single,
    /// GSC beamformer followed by the filterbank model.
    Cascade,
    /// Multi-channel model with the spatial encoder.
    #[default]
    E2e,
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "cascade" => Ok(Self::Cascade),
            "e2e" => Ok(Self::E2e),
            other => Err(Error::invalid(format!("unknown system {other:?}"))),
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Single => "single",
            Self::Cascade => "cascade",
            Self::E2e => "e2e",
        })
    }
}

impl FromStr for Prior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "none" => Ok(Self::None),
            other => Err(Error::invalid(format!("unknown prior {other:?}"))),
        }
    }
}

/// One concrete system variant: family, array size and prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub system: System,
    pub channels: usize,
    /// Zone count; `None` uses the preset for `channels`.
    pub zones: Option<usize>,
    pub prior: Prior,
}

impl SystemSpec {
    pub fn new(system: System, channels: usize, zones: Option<usize>, prior: Prior) -> Result<Self> {
        let s = Self {
            system,
            channels,
            zones,
            prior,
        };
        s.scheme()?;
        Ok(s)
    }

    pub fn scheme(&self) -> Result<ZoneScheme> {
        ZoneScheme::for_channels(self.channels, self.zones)
    }

    /// Stable name used for directories and report rows, e.g. `e2e-2ch`,
    /// `e2e-3ch-noprior`, `cascade-2ch`, `single`.
    pub fn name(&self) -> String {
        match self.system {
            System::Single => "single".into(),
            System::Cascade => format!("cascade-{}ch", self.channels),
            System::E2e => {
                let mut n = format!("e2e-{}ch", self.channels);
                if let Some(z) = self.zones {
                    if ZoneScheme::for_channels(self.channels, None).is_ok_and(|s| s.zones != z) {
                        n.push_str(&format!("-{z}z"));
                    }
                }
                if self.prior == Prior::None {
                    n.push_str("-noprior");
                }
                n
            }
        }
    }

    /// The six compared systems for a two- and three-microphone study.
    pub fn table() -> Vec<Self> {
        let mk = |system, channels, prior| Self {
            system,
            channels,
            zones: None,
            prior,
        };
        vec![
            mk(System::Single, 2, Prior::None),
            mk(System::Cascade, 2, Prior::Oracle),
            mk(System::E2e, 2, Prior::None),
            mk(System::E2e, 2, Prior::Oracle),
            mk(System::E2e, 3, Prior::None),
            mk(System::E2e, 3, Prior::Oracle),
        ]
    }

    /// Feature pipeline and untrained model configuration.
    pub fn feature_spec(&self, num_classes: usize, num_keywords: usize) -> Result<FeatureSpec> {
        let scheme = self.scheme()?;
        let (model, frontend) = match self.system {
            System::Single => (
                ModelConfig::single_channel(num_classes, num_keywords),
                Frontend::FirstChannel,
            ),
            System::Cascade => (ModelConfig::single_channel(num_classes, num_keywords), Frontend::Gsc),
            System::E2e => (
                ModelConfig::spatial(self.channels, scheme.zones, num_classes, num_keywords)?,
                Frontend::FirstChannel,
            ),
        };
        Ok(FeatureSpec {
            model,
            prior: self.prior,
            frontend,
            zones: self.zones,
        })
    }

    /// Rejects rendered sets this system cannot consume.
    pub fn check_records(&self, records: &[RenderRecord]) -> Result<()> {
        let scheme = self.scheme()?;
        for r in records {
            let ok = match self.system {
                System::Single => r.channels >= 1,
                System::Cascade | System::E2e => r.channels == self.channels,
            };
            if !ok {
                return Err(Error::Dataset(format!(
                    "{} has {} channels, system {} needs {}",
                    r.mixture_path,
                    r.channels,
                    self.name(),
                    self.channels
                )));
            }
            if self.system != System::Single && r.scene.scheme != scheme {
                return Err(Error::Dataset(format!(
                    "{} was rendered with {} zones, system {} uses {}",
                    r.mixture_path,
                    r.scene.scheme.zones,
                    self.name(),
                    scheme.zones
                )));
            }
        }
        Ok(())
    }
}

/// Experiment configuration (the JSON file given to `--config`). Every
/// field has a default; command-line flags override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub keywords: Vec<String>,
    /// Synthetic corpus size: clips per keyword, and the same number spread
    /// over the filler words.
    pub clips_per_class: usize,
    pub speakers: usize,
    /// Length of each synthetic noise clip.
    pub noise_seconds: f64,
    /// Clean corpus root; defaults to `<root>/corpus`.
    pub corpus_dir: Option<PathBuf>,
    /// Noise pool root; defaults to `<root>/noise`.
    pub noise_dir: Option<PathBuf>,
    pub channels: usize,
    pub zones: Option<usize>,
    pub system: System,
    pub prior: Prior,
    /// Training-mode SNR range (dB).
    pub snr_range: [f64; 2],
    /// Test SNRs rendered and evaluated by `run`.
    pub test_snrs: Vec<f64>,
    pub noise_train_categories: Vec<String>,
    pub noise_test_categories: Vec<String>,
    pub dropout: f64,
    pub magnitude_power: f64,
    pub train: TrainConfig,
    pub smoother: SmootherConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            keywords: vec!["yes".into(), "no".into()],
            clips_per_class: 300,
            speakers: 200,
            noise_seconds: 5.0,
            corpus_dir: None,
            noise_dir: None,
            channels: 2,
            zones: None,
            system: System::E2e,
            prior: Prior::Oracle,
            snr_range: [0.0, 10.0],
            test_snrs: vec![0.0, 10.0],
            noise_train_categories: Vec::new(),
            noise_test_categories: Vec::new(),
            dropout: 0.1,
            magnitude_power: 0.5,
            train: TrainConfig::default(),
            smoother: SmootherConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.keywords.is_empty() {
            return Err(Error::invalid("at least one keyword is required"));
        }
        if !(self.snr_range[0] <= self.snr_range[1]) {
            return Err(Error::invalid("snr_range must be ordered"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if !(self.magnitude_power > 0.0) {
            return Err(Error::invalid("magnitude_power must be positive"));
        }
        self.system_spec()?;
        self.train.validate()?;
        self.smoother.validate()
    }

    pub fn system_spec(&self) -> Result<SystemSpec> {
        SystemSpec::new(self.system, self.channels, self.zones, self.prior)
    }

    pub fn corpus_dir(&self, root: &Path) -> PathBuf {
        self.corpus_dir.clone().unwrap_or_else(|| root.join("corpus"))
    }

    pub fn noise_dir(&self, root: &Path) -> PathBuf {
        self.noise_dir.clone().unwrap_or_else(|| root.join("noise"))
    }

    /// Rendering settings for `mode`. Test sets draw from a different seed
    /// than training sets but share it across SNRs, so every test SNR sees
    /// the same rooms.
    pub fn render_config(&self, mode: RenderMode, snr_db: Option<f64>) -> RenderConfig {
        RenderConfig {
            mode,
            snr_db,
            snr_range: self.snr_range,
            channels: self.channels,
            zones: self.zones,
            seed: match mode {
                RenderMode::Train => self.seed,
                RenderMode::Test => self.seed.wrapping_add(1),
            },
            sample_rate: audio::DEFAULT_SAMPLE_RATE,
            noise_train_categories: self.noise_train_categories.clone(),
            noise_test_categories: self.noise_test_categories.clone(),
        }
    }
}

/// Directory name of a rendered set.
pub fn render_tag(mode: RenderMode, channels: usize, zones: usize, snr_db: Option<f64>) -> String {
    match mode {
        RenderMode::Train => format!("train-{channels}ch-{zones}z"),
        RenderMode::Test => match snr_db {
            Some(s) => format!("test-{channels}ch-{zones}z-{}db", fmt_snr(s)),
            None => format!("test-{channels}ch-{zones}z-clean"),
        },
    }
}

fn fmt_snr(s: f64) -> String {
    if s.fract() == 0.0 {
        format!("{}", s as i64)
    } else {
        format!("{s}")
    }
}

/// Label used for an SNR in file names.
pub fn snr_label(snr_db: Option<f64>) -> String {
    snr_db.map_or_else(|| "clean".into(), |s| format!("{}db", fmt_snr(s)))
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the synthetic corpus and noise pool. Returns the number of
/// speech clips written.
pub fn synth_corpus(cfg: &ExperimentConfig, root: &Path) -> Result<usize> {
    let keywords: Vec<&str> = cfg.keywords.iter().map(String::as_str).collect();
    let mut corpus = CorpusConfig::desk(&keywords, cfg.clips_per_class, cfg.seed)?;
    corpus.speakers = cfg.speakers;
    let n = synth::write_corpus(cfg.corpus_dir(root), &corpus)?;
    let pool = synth::noise_pool(cfg.seed.wrapping_add(1), cfg.noise_seconds, audio::DEFAULT_SAMPLE_RATE)?;
    pool.save_dir(cfg.noise_dir(root), audio::DEFAULT_SAMPLE_RATE)?;
    Ok(n)
}

/// Scans the corpus and writes `<root>/manifest.jsonl`.
pub fn scan(cfg: &ExperimentConfig, root: &Path) -> Result<DatasetManifest> {
    let manifest = audio::scan_gsc_dataset(cfg.corpus_dir(root), &cfg.keywords)?;
    mkdir(root)?;
    audio::save_manifest(&manifest, root.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Renders the train+valid entries (train mode) or the test entries (test
/// mode) into `<root>/render/<tag>/`. Returns the records and the tag.
pub fn render(
    cfg: &ExperimentConfig,
    root: &Path,
    mode: RenderMode,
    snr_db: Option<f64>,
) -> Result<(Vec<RenderRecord>, String)> {
    let manifest = audio::load_manifest(root.join("manifest.jsonl"))?;
    let pool = NoisePool::load_dir(cfg.noise_dir(root))?;
    let rc = cfg.render_config(mode, snr_db);
    let scheme = rc.scheme()?;
    let entries: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| (e.split == Split::Test) == (mode == RenderMode::Test))
        .cloned()
        .collect();
    if entries.is_empty() {
        return Err(Error::Dataset(format!(
            "the corpus has no {} utterances to render",
            if mode == RenderMode::Test {
                "test"
            } else {
                "train/valid"
            }
        )));
    }
    let tag = render_tag(mode, cfg.channels, scheme.zones, snr_db);
    let report = build_dataset(&entries, &pool, &rc, root.join("render").join(&tag))?;
    if let Some((path, msg)) = report.failures.first() {
        return Err(Error::Dataset(format!(
            "{} of {} utterances failed to render; first: {path}: {msg}",
            report.failures.len(),
            entries.len()
        )));
    }
    Ok((report.records, tag))
}

/// Loads `<root>/render/<tag>/manifest.jsonl`.
pub fn load_render(root: &Path, tag: &str) -> Result<Vec<RenderRecord>> {
    audio::load_records(root.join("render").join(tag).join("manifest.jsonl"))
}

/// Class and keyword counts implied by a rendered set's labels and the
/// configured keyword list.
fn class_counts(cfg: &ExperimentConfig) -> (usize, usize) {
    (cfg.keywords.len() + 1, cfg.keywords.len())
}

/// A trained (or freshly initialized) system ready for evaluation.
#[derive(Debug, Clone)]
pub struct TrainedSystem {
    pub spec: SystemSpec,
    pub features: FeatureSpec,
    pub model: Model<f32>,
    pub report: Option<FitReport>,
}

impl TrainedSystem {
    /// Untrained system with normalization fitted on `records`.
    pub fn untrained(cfg: &ExperimentConfig, spec: SystemSpec, records: &[RenderRecord], seed: u64) -> Result<Self> {
        let (c, k) = class_counts(cfg);
        let mut features = spec.feature_spec(c, k)?;
        features.model.dropout = cfg.dropout;
        features.model.magnitude_power = cfg.magnitude_power;
        features.model.init_seed = seed;
        spec.check_records(records)?;
        let train = data::split_records(records, Split::Train);
        data::fit_normalization(&train, &mut features)?;
        let model = Model::new(features.model.clone())?;
        Ok(Self {
            spec,
            features,
            model,
            report: None,
        })
    }

    pub fn params(&self) -> usize {
        self.model.count_params()
    }
}

fn fit_in<T: Scalar>(
    features: &FeatureSpec,
    train_records: &[RenderRecord],
    valid_records: &[RenderRecord],
    train_cfg: &TrainConfig,
    out: FitOutput<'_>,
) -> Result<(Model<f32>, FitReport)> {
    let train = data::load_examples::<T>(train_records, features)?;
    let valid = data::load_examples::<T>(valid_records, features)?;
    let aug = ShiftAugment::load(train_records, features, train_cfg.max_shift, train_cfg.speed_perturb)?;
    let model = Model::<T>::new(features.model.clone())?;
    let (model, report) = fit_augmented(model, &train, &valid, train_cfg, out, Some(&aug))?;
    Ok((model.cast(), report))
}

/// Fits normalization and trains `spec` on the train/valid splits of
/// `records`. Model initialization and batching use `seed`.
pub fn train_system(
    cfg: &ExperimentConfig,
    spec: SystemSpec,
    records: &[RenderRecord],
    seed: u64,
    log: Option<&mut dyn Write>,
) -> Result<TrainedSystem> {
    let mut sys = TrainedSystem::untrained(cfg, spec, records, seed)?;
    let train_records = data::split_records(records, Split::Train);
    let valid_records = data::split_records(records, Split::Valid);
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let out = FitOutput {
        log,
        checkpoint_dir: None,
    };
    let (model, report) = match train_cfg.precision {
        Precision::F32 => fit_in::<f32>(&sys.features, &train_records, &valid_records, &train_cfg, out)?,
        Precision::F64 => fit_in::<f64>(&sys.features, &train_records, &valid_records, &train_cfg, out)?,
    };
    sys.model = model;
    sys.report = Some(report);
    Ok(sys)
}

#[derive(Serialize, Deserialize)]
struct SystemMeta {
    spec: SystemSpec,
    frontend: Frontend,
    report: Option<FitReport>,
}

/// Directory holding a system's checkpoint.
pub fn model_dir(root: &Path, spec: &SystemSpec) -> PathBuf {
    root.join("models").join(spec.name())
}

/// Writes `<dir>/model.ckpt`; the system description travels in the
/// checkpoint header.
pub fn save_system(sys: &TrainedSystem, dir: &Path) -> Result<PathBuf> {
    mkdir(dir)?;
    let meta = SystemMeta {
        spec: sys.spec,
        frontend: sys.features.frontend,
        report: sys.report.clone(),
    };
    let header = CheckpointHeader {
        config: sys.model.config.clone(),
        step: sys.report.as_ref().map_or(0, |r| r.steps),
        rng: None,
        meta: serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
    };
    let path = dir.join("model.ckpt");
    save_checkpoint(&sys.model, &header, &path)?;
    Ok(path)
}

pub fn load_system(path: &Path) -> Result<TrainedSystem> {
    let (model, header) = load_checkpoint::<f32>(path)?;
    let meta: SystemMeta = serde_json::from_value(header.meta)
        .map_err(|e| Error::Checkpoint(format!("{}: not a system checkpoint: {e}", path.display())))?;
    Ok(TrainedSystem {
        features: FeatureSpec {
            model: model.config.clone(),
            prior: meta.spec.prior,
            frontend: meta.frontend,
            zones: meta.spec.zones,
        },
        spec: meta.spec,
        model,
        report: meta.report,
    })
}

/// Utterance accuracy of `sys` on a rendered test set.
pub fn evaluate_system(sys: &TrainedSystem, records: &[RenderRecord], snr_db: Option<f64>) -> Result<EvalResult> {
    sys.spec.check_records(records)?;
    let examples = data::load_examples::<f32>(records, &sys.features)?;
    eval::evaluate(&sys.model, &examples, &sys.spec.name(), snr_db)
}

/// Writes `<root>/results/<system>@<snr>.json`.
pub fn save_result(root: &Path, result: &EvalResult) -> Result<PathBuf> {
    let dir = root.join("results");
    mkdir(&dir)?;
    let path = dir.join(format!("{}@{}.json", result.system, snr_label(result.snr_db)));
    let json = serde_json::to_string_pretty(result).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads every result in `<root>/results`, sorted by file name.
pub fn load_results(root: &Path) -> Result<Vec<EvalResult>> {
    let dir = root.join("results");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|d| d.ok().map(|d| d.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Writes `<root>/report.csv` and `<root>/comparisons.jsonl` from the saved
/// results and returns the CSV text.
pub fn report(root: &Path) -> Result<String> {
    let results = load_results(root)?;
    let csv = eval::table_csv(&results)?;
    let path = root.join("report.csv");
    fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    if results.len() >= 2 {
        if let Ok(cmp) = eval::compare_report(&results) {
            audio::save_jsonl(&cmp, root.join("comparisons.jsonl"))?;
        }
    }
    Ok(csv)
}

/// Full run for the configured system: synthesize (unless a corpus is
/// given), scan, render train and test sets, train, evaluate at every test
/// SNR, and report. Returns the CSV text.
pub fn run(cfg: &ExperimentConfig, root: &Path) -> Result<String> {
    cfg.validate()?;
    let spec = cfg.system_spec()?;
    if cfg.corpus_dir.is_none() {
        synth_corpus(cfg, root)?;
    }
    scan(cfg, root)?;
    let (train_records, _) = render(cfg, root, RenderMode::Train, None)?;
    let dir = model_dir(root, &spec);
    mkdir(&dir)?;
    let log_path = dir.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let sys = train_system(cfg, spec, &train_records, cfg.seed, Some(&mut log))?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    save_system(&sys, &dir)?;
    for &snr in &cfg.test_snrs {
        let (test_records, _) = render(cfg, root, RenderMode::Test, Some(snr))?;
        save_result(root, &evaluate_system(&sys, &test_records, Some(snr))?)?;
    }
    report(root)
}

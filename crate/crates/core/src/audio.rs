//! Audio clips, WAV I/O, dataset discovery and JSON-lines manifests.
//!
//! Clean corpora follow the Speech Commands layout: one directory per word,
//! one WAV per utterance named `<speaker>_nohash_<n>.wav`. Rendered corpora
//! are described by [`RenderRecord`] manifests.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roomsim::SceneSpec;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Multi-channel audio with samples normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    channels: Vec<Vec<f32>>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(channels: Vec<Vec<f32>>, sample_rate: u32) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::invalid("audio clip needs at least one channel"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::invalid("audio channels differ in length"));
        }
        if channels.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio sample".into()));
        }
        Ok(Self { channels, sample_rate })
    }

    pub fn mono(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn from_f64(channels: &[Vec<f64>], sample_rate: u32) -> Result<Self> {
        Self::new(
            channels.iter().map(|c| c.iter().map(|&s| s as f32).collect()).collect(),
            sample_rate,
        )
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, m: usize) -> &[f32] {
        &self.channels[m]
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f32>> {
        self.channels
    }

    pub fn channel_f64(&self, m: usize) -> Vec<f64> {
        self.channels[m].iter().map(|&s| s as f64).collect()
    }

    pub fn to_f64(&self) -> Vec<Vec<f64>> {
        (0..self.num_channels()).map(|m| self.channel_f64(m)).collect()
    }

    /// A single-channel clip holding channel `m`.
    pub fn select_channel(&self, m: usize) -> Result<AudioClip> {
        if m >= self.num_channels() {
            return Err(Error::invalid(format!(
                "channel {m} out of range for {}-channel clip",
                self.num_channels()
            )));
        }
        AudioClip::mono(self.channels[m].clone(), self.sample_rate)
    }
}

/// Sample encoding for [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Reads a PCM16 or IEEE float32 WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let wav_err = |msg: String| Error::Wav {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => wav_err(other.to_string()),
    })?;
    let spec = reader.spec();
    let m = spec.channels as usize;
    if m == 0 {
        return Err(wav_err("zero channels".into()));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(e.to_string()))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(e.to_string()))?,
        (fmt, bits) => {
            return Err(wav_err(format!(
                "unsupported encoding {fmt:?} with {bits} bits per sample"
            )))
        }
    };
    if !interleaved.len().is_multiple_of(m) {
        return Err(wav_err("sample count not a multiple of channels".into()));
    }
    let frames = interleaved.len() / m;
    let mut channels = vec![Vec::with_capacity(frames); m];
    for frame in interleaved.chunks_exact(m) {
        for (ch, &s) in channels.iter_mut().zip(frame) {
            ch.push(s);
        }
    }
    AudioClip::new(channels, spec.sample_rate).map_err(|e| wav_err(e.to_string()))
}

/// Writes `clip`, clipping out-of-range samples. Returns the number of
/// clipped samples.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip, encoding: WavEncoding) -> Result<usize> {
    let path = path.as_ref();
    if clip.is_empty() {
        return Err(Error::invalid("refusing to write an empty clip"));
    }
    let spec = hound::WavSpec {
        channels: clip.num_channels() as u16,
        sample_rate: clip.sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => hound::SampleFormat::Int,
            WavEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    let wav_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    let mut clipped = 0usize;
    for i in 0..clip.len() {
        for ch in &clip.channels {
            let mut s = ch[i];
            if !(-1.0..=1.0).contains(&s) {
                clipped += 1;
                s = s.clamp(-1.0, 1.0);
            }
            match encoding {
                WavEncoding::Pcm16 => {
                    let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q).map_err(wav_err)?;
                }
                WavEncoding::Float32 => writer.write_sample(s).map_err(wav_err)?,
            }
        }
    }
    writer.finalize().map_err(wav_err)?;
    if clipped > 0 {
        warn!("{}: clipped {clipped} samples outside [-1, 1]", path.display());
    }
    Ok(clipped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub word: String,
    pub class_index: usize,
    pub speaker: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    keyword_list: Vec<String>,
    num_classes: usize,
}

/// A clean-speech corpus: entries labelled with keyword or filler classes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub keyword_list: Vec<String>,
    pub num_classes: usize,
}

impl DatasetManifest {
    /// Filler class index, `C - 1`.
    pub fn filler_class(&self) -> usize {
        self.num_classes.saturating_sub(1)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != self.keyword_list.len() + 1 && !self.entries.is_empty() {
            return Err(Error::Dataset(format!(
                "num_classes {} inconsistent with {} keywords",
                self.num_classes,
                self.keyword_list.len()
            )));
        }
        if let Some(e) = self.entries.iter().find(|e| e.class_index >= self.num_classes) {
            return Err(Error::Dataset(format!(
                "class index {} out of range for {}",
                e.class_index, e.path
            )));
        }
        Ok(())
    }
}

/// Simulated multi-channel utterance plus its rendering metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderRecord {
    pub mixture_path: String,
    pub source_path: String,
    pub word: String,
    pub class_index: usize,
    pub split: Split,
    pub zone: usize,
    pub azimuth_deg: f64,
    /// `None` marks the no-noise condition.
    pub snr_db: Option<f64>,
    pub noise_category: Option<String>,
    pub channels: usize,
    pub scene: SceneSpec,
    /// STFT frame count of the mixture under the default framing.
    pub valid_frames: usize,
}

fn stable_hash(s: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Hash-based split used when the corpus ships no list files: 10 % valid,
/// 10 % test, keyed by speaker so a speaker never straddles splits.
pub fn hash_split(file_name: &str) -> Split {
    let key = file_name.split("_nohash_").next().unwrap_or(file_name);
    match stable_hash(key) % 100 {
        0..=9 => Split::Valid,
        10..=19 => Split::Test,
        _ => Split::Train,
    }
}

fn read_list(path: &Path) -> Result<Option<BTreeSet<String>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(
        text.lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect(),
    ))
}

/// Walks a Speech-Commands style corpus. Each keyword gets its index in
/// `keyword_list`; every other word maps to the filler class `C - 1`.
pub fn scan_gsc_dataset(root: impl AsRef<Path>, keyword_list: &[String]) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if keyword_list.is_empty() {
        return Err(Error::Dataset("keyword list is empty".into()));
    }
    let valid_list = read_list(&root.join("validation_list.txt"))?;
    let test_list = read_list(&root.join("testing_list.txt"))?;

    let mut words: Vec<String> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|d| d.ok())
        .filter(|d| d.path().is_dir())
        .filter_map(|d| d.file_name().into_string().ok())
        .filter(|w| !w.starts_with('_') && !w.starts_with('.'))
        .collect();
    words.sort();
    if words.is_empty() {
        return Err(Error::Dataset(format!("no word directories under {}", root.display())));
    }
    for kw in keyword_list {
        if !words.contains(kw) {
            return Err(Error::Dataset(format!(
                "keyword {kw:?} not found under {}",
                root.display()
            )));
        }
    }

    let num_classes = keyword_list.len() + 1;
    let mut entries = Vec::new();
    for word in &words {
        let class_index = keyword_list.iter().position(|k| k == word).unwrap_or(num_classes - 1);
        let dir = root.join(word);
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|d| d.ok())
            .map(|d| d.path())
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
            .collect();
        files.sort();
        for path in files {
            let file_name = path.file_name().unwrap().to_string_lossy().into_owned();
            let rel = format!("{word}/{file_name}");
            let split = match (&valid_list, &test_list) {
                (Some(v), _) if v.contains(&rel) => Split::Valid,
                (_, Some(t)) if t.contains(&rel) => Split::Test,
                (None, None) => hash_split(&file_name),
                _ => Split::Train,
            };
            let speaker = file_name.split("_nohash_").next().unwrap_or(&file_name).to_string();
            entries.push(ManifestEntry {
                path: path.to_string_lossy().into_owned(),
                word: word.clone(),
                class_index,
                speaker,
                split,
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::Dataset(format!("no WAV files under {}", root.display())));
    }
    log::info!(
        "scanned {} utterances across {} words ({} classes)",
        entries.len(),
        words.len(),
        num_classes
    );
    Ok(DatasetManifest {
        entries,
        keyword_list: keyword_list.to_vec(),
        num_classes,
    })
}

/// Writes one JSON object per line.
pub fn save_jsonl<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a JSON-lines file; parse failures name the 1-based line.
pub fn load_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ManifestLine {
    Header(ManifestHeader),
    Entry(ManifestEntry),
}

/// Saves a clean-corpus manifest: a header object (keyword list, class
/// count) followed by one object per entry.
pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let mut lines = Vec::with_capacity(manifest.entries.len() + 1);
    lines.push(ManifestLine::Header(ManifestHeader {
        keyword_list: manifest.keyword_list.clone(),
        num_classes: manifest.num_classes,
    }));
    lines.extend(manifest.entries.iter().cloned().map(ManifestLine::Entry));
    save_jsonl(&lines, path)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let lines: Vec<ManifestLine> = load_jsonl(path)?;
    let mut manifest = DatasetManifest::default();
    for (i, line) in lines.into_iter().enumerate() {
        match line {
            ManifestLine::Header(h) if i == 0 => {
                manifest.keyword_list = h.keyword_list;
                manifest.num_classes = h.num_classes;
            }
            ManifestLine::Header(_) => {
                return Err(Error::Manifest {
                    line: i + 1,
                    msg: "header object after the first line".into(),
                })
            }
            ManifestLine::Entry(e) => manifest.entries.push(e),
        }
    }
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_records(records: &[RenderRecord], path: impl AsRef<Path>) -> Result<()> {
    save_jsonl(records, path)
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<RenderRecord>> {
    load_jsonl(path)
}

//! Turning rendered recordings into model inputs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{self, RenderRecord, Split};
use crate::dsp::{self, FbankConfig, StftConfig};
use crate::error::{Error, Result};
use crate::gsc::{self, GscConfig};
use crate::net::{compress, fbank_input, spatial_input, FeatureNorm, ModelConfig, ModelInput};
use crate::roomsim::{ArrayGeometry, ZoneScheme, NO_PRIOR};
use crate::tensor::Scalar;
use crate::train::{draw_shift, draw_speed, Augment};
use rand_chacha::ChaCha8Rng;

/// Whether the zone label fed to the model is the true zone or the
/// reserved no-prior token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Prior {
    #[default]
    Oracle,
    None,
}

/// Signal path in front of a single-channel model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Frontend {
    /// First microphone only.
    #[default]
    FirstChannel,
    /// GSC beamformer steered at the centre of the record's zone.
    Gsc,
}

/// One utterance ready for the network.
#[derive(Debug, Clone)]
pub struct Example<T> {
    pub id: String,
    pub input: ModelInput<T>,
    pub zone: usize,
    pub class: usize,
    /// STFT frames of the input.
    pub frames: usize,
}

/// Everything needed to go from a recording to model input.
#[derive(Debug, Clone)]
pub struct FeatureSpec {
    pub model: ModelConfig,
    pub prior: Prior,
    pub frontend: Frontend,
    /// Zone count of the rendering scheme; `None` uses the channel preset.
    pub zones: Option<usize>,
}

/// Single-channel signal for the baseline systems.
pub fn mono_signal(channels: &[Vec<f64>], frontend: Frontend, zone: usize, zones: Option<usize>) -> Result<Vec<f64>> {
    match frontend {
        Frontend::FirstChannel => channels
            .first()
            .cloned()
            .ok_or_else(|| Error::invalid("recording has no channels")),
        Frontend::Gsc => {
            let geometry = ArrayGeometry::preset(channels.len())?;
            let scheme = ZoneScheme::for_channels(channels.len(), zones)?;
            if zone == NO_PRIOR {
                return Err(Error::invalid("the beamformer cascade needs a target zone"));
            }
            let cfg = GscConfig::for_zone(geometry, &scheme, zone)?;
            gsc::gsc_process(channels, &cfg)
        }
    }
}

/// Raw (unnormalized) filterbank frames of a mono signal.
pub fn fbank_features(signal: &[f64]) -> Result<dsp::FbankFeatures> {
    dsp::fbank(signal, &FbankConfig::default())
}

/// Model input for one recording's channels.
pub fn featurize<T: Scalar>(channels: &[Vec<f64>], zone: usize, spec: &FeatureSpec) -> Result<ModelInput<T>> {
    let cfg = &spec.model;
    if cfg.mode.is_spatial() {
        let m = cfg.mode.channels();
        if channels.len() != m {
            return Err(Error::invalid(format!(
                "recording has {} channels, the {m}-channel model needs {m}",
                channels.len()
            )));
        }
        let s = dsp::stft(channels, &StftConfig::default())?;
        Ok(spatial_input(&s, cfg.magnitude_power, &cfg.input_scales()))
    } else {
        let mono = mono_signal(channels, spec.frontend, zone, spec.zones)?;
        Ok(fbank_input(&fbank_features(&mono)?, cfg.fbank_norm.as_ref()))
    }
}

fn label_zone(record: &RenderRecord, prior: Prior) -> usize {
    match prior {
        Prior::Oracle => record.zone,
        Prior::None => NO_PRIOR,
    }
}

/// Loads and featurizes rendered records in parallel, preserving order.
pub fn load_examples<T: Scalar>(records: &[RenderRecord], spec: &FeatureSpec) -> Result<Vec<Example<T>>> {
    records
        .par_iter()
        .map(|r| {
            let clip = audio::read_wav(&r.mixture_path)?;
            let input = featurize(&clip.to_f64(), r.zone, spec)?;
            Ok(Example {
                id: r.mixture_path.clone(),
                frames: input.frames(),
                input,
                zone: label_zone(r, spec.prior),
                class: r.class_index,
            })
        })
        .collect()
}

/// Fits the filterbank normalization on the given records.
pub fn fit_fbank_norm(records: &[RenderRecord], frontend: Frontend, zones: Option<usize>) -> Result<FeatureNorm> {
    let feats: Vec<dsp::FbankFeatures> = records
        .par_iter()
        .map(|r| {
            let clip = audio::read_wav(&r.mixture_path)?;
            fbank_features(&mono_signal(&clip.to_f64(), frontend, r.zone, zones)?)
        })
        .collect::<Result<_>>()?;
    let n = FbankConfig::default().n_mels;
    FeatureNorm::fit(n, feats.iter().flat_map(|f| f.data.chunks(n)))
}

/// Per-bin energy sums and value counts of the compressed spectrograms.
fn compressed_energy(records: &[RenderRecord], magnitude_power: f64) -> Result<(Vec<f64>, usize)> {
    let bins = StftConfig::default().num_bins();
    let parts: Vec<(Vec<f64>, usize)> = records
        .par_iter()
        .map(|r| {
            let clip = audio::read_wav(&r.mixture_path)?;
            let s = dsp::stft(&clip.to_f64(), &StftConfig::default())?;
            let mut e = vec![0.0; bins];
            for (i, c) in s.data().iter().enumerate() {
                let (a, b) = compress(c.re, c.im, magnitude_power);
                e[i % bins] += a * a + b * b;
            }
            Ok((e, 2 * s.data().len() / bins))
        })
        .collect::<Result<_>>()?;
    let mut e = vec![0.0; bins];
    let mut n = 0;
    for (pe, pn) in parts {
        e.iter_mut().zip(&pe).for_each(|(a, b)| *a += b);
        n += pn;
    }
    if n == 0 || e.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Dataset(
            "cannot fit an input scale on silent or empty data".into(),
        ));
    }
    Ok((e, n))
}

/// Scale giving the compressed training spectrograms unit RMS.
pub fn fit_input_scale(records: &[RenderRecord], magnitude_power: f64) -> Result<f64> {
    let (e, n) = compressed_energy(records, magnitude_power)?;
    Ok((n as f64 * e.len() as f64 / e.iter().sum::<f64>()).sqrt())
}

/// Per-bin scales giving every frequency bin unit RMS.
pub fn fit_bin_scale(records: &[RenderRecord], magnitude_power: f64) -> Result<Vec<f64>> {
    let (e, n) = compressed_energy(records, magnitude_power)?;
    Ok(e.iter().map(|v| (n as f64 / v).sqrt()).collect())
}

/// Fits whichever input normalization the model consumes on `records`.
pub fn fit_normalization(records: &[RenderRecord], spec: &mut FeatureSpec) -> Result<()> {
    if spec.model.mode.is_spatial() {
        spec.model.input_scale = fit_input_scale(records, spec.model.magnitude_power)?;
    } else {
        spec.model.fbank_norm = Some(fit_fbank_norm(records, spec.frontend, spec.zones)?);
    }
    Ok(())
}

pub fn split_records(records: &[RenderRecord], split: Split) -> Vec<RenderRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

/// Reads `x` at `speed` times the original rate (linear interpolation),
/// keeping the length; the tail is zero-filled when slowing down.
pub fn change_speed(x: &[f64], speed: f64) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let pos = i as f64 * speed;
            let j = pos.floor() as usize;
            if j + 1 < n {
                let f = pos - j as f64;
                x[j] * (1.0 - f) + x[j + 1] * f
            } else if j < n {
                x[j]
            } else {
                0.0
            }
        })
        .collect()
}

/// Time-domain augmentation applied on every draw: an optional speed change
/// (which moves pitch and formants, the main speaker cues) followed by a
/// random delay (zeros in front, tail dropped), then re-featurization. The
/// delay shows the network the same content at new STFT phase alignments.
pub struct ShiftAugment {
    spec: FeatureSpec,
    max_shift: usize,
    speed_delta: f64,
    audio: Vec<Vec<Vec<f32>>>,
    zones: Vec<usize>,
}

impl ShiftAugment {
    /// Loads the audio of `records`, which must be in the same order as the
    /// training examples.
    pub fn load(records: &[RenderRecord], spec: &FeatureSpec, max_shift: usize, speed_delta: f64) -> Result<Self> {
        let audio = records
            .par_iter()
            .map(|r| Ok(audio::read_wav(&r.mixture_path)?.into_channels()))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            max_shift,
            speed_delta,
            audio,
            zones: records.iter().map(|r| r.zone).collect(),
        })
    }
}

impl<T: Scalar> Augment<T> for ShiftAugment {
    fn len(&self) -> usize {
        self.audio.len()
    }

    fn augment(&self, index: usize, _example: &Example<T>, rng: &mut ChaCha8Rng) -> Result<ModelInput<T>> {
        let clip = &self.audio[index];
        let n = clip[0].len();
        let speed = draw_speed(rng, self.speed_delta);
        let k = draw_shift(rng, self.max_shift).min(n);
        let shifted: Vec<Vec<f64>> = clip
            .iter()
            .map(|c| {
                let c: Vec<f64> = c.iter().map(|&x| x as f64).collect();
                let c = if speed == 1.0 { c } else { change_speed(&c, speed) };
                let mut v = vec![0.0; k];
                v.extend_from_slice(&c[..n - k]);
                v
            })
            .collect();
        // the beamformer front end needs the true zone even without a prior
        featurize(&shifted, self.zones[index], &self.spec)
    }
}

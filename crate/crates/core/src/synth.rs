//! Synthetic stand-ins for a speech-command corpus and an environmental
//! noise corpus, so the whole pipeline runs without external downloads.
//!
//! Words are rendered by a small source-filter synthesizer: a glottal pulse
//! train or noise source shaped by time-varying formant resonators. Every
//! speaker has its own pitch, vocal-tract scale and speaking rate, and every
//! utterance adds jitter on top, so classes overlap enough to need learning.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioClip, WavEncoding};
use crate::error::{Error, Result};
use crate::roomsim::{NoiseClip, NoisePool};

type Formants = [f64; 3];

const I: Formants = [270.0, 2290.0, 3010.0];
const IH: Formants = [390.0, 1990.0, 2550.0];
const EH: Formants = [530.0, 1840.0, 2480.0];
const AE: Formants = [660.0, 1720.0, 2410.0];
const AA: Formants = [730.0, 1090.0, 2440.0];
const AO: Formants = [570.0, 840.0, 2410.0];
const UH: Formants = [440.0, 1020.0, 2240.0];
const UW: Formants = [300.0, 870.0, 2240.0];
const AH: Formants = [640.0, 1190.0, 2390.0];
const ER: Formants = [490.0, 1350.0, 1690.0];

#[derive(Debug, Clone, PartialEq)]
enum Seg {
    /// Voiced segment whose formants glide through the listed targets.
    Vowel(Vec<Formants>, f64),
    /// Nasal murmur: low first formant, weak upper formants.
    Nasal(f64),
    /// Band of frication noise `(center Hz, bandwidth Hz, ms)`.
    Fric(f64, f64, f64),
    /// Closure silence followed by a short burst centred at the given Hz.
    Stop(f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordModel {
    pub name: &'static str,
    segs: Vec<Seg>,
}

fn word(name: &'static str, segs: Vec<Seg>) -> WordModel {
    WordModel { name, segs }
}

fn v(path: &[Formants], ms: f64) -> Seg {
    Seg::Vowel(path.to_vec(), ms)
}

/// The built-in vocabulary: ten command words followed by ten others.
pub fn vocabulary() -> Vec<WordModel> {
    use Seg::*;
    vec![
        word("yes", vec![v(&[I, EH], 230.0), Fric(5500.0, 2500.0, 150.0)]),
        word("no", vec![Nasal(80.0), v(&[AO, UH], 260.0)]),
        word("up", vec![v(&[AH], 180.0), Stop(70.0, 1200.0)]),
        word("down", vec![Stop(30.0, 3500.0), v(&[AA, UH], 250.0), Nasal(90.0)]),
        word(
            "left",
            vec![v(&[IH, EH], 200.0), Fric(4000.0, 4000.0, 110.0), Stop(40.0, 4500.0)],
        ),
        word("right", vec![v(&[ER, AA, I], 290.0), Stop(50.0, 4500.0)]),
        word("on", vec![v(&[AO], 180.0), Nasal(130.0)]),
        word("off", vec![v(&[AO], 210.0), Fric(4000.0, 4000.0, 160.0)]),
        word(
            "stop",
            vec![
                Fric(5500.0, 2500.0, 110.0),
                Stop(30.0, 4500.0),
                v(&[AA], 170.0),
                Stop(70.0, 1200.0),
            ],
        ),
        word("go", vec![Stop(30.0, 1800.0), v(&[AH, UH], 260.0)]),
        word("bed", vec![Stop(20.0, 900.0), v(&[EH], 200.0), Stop(50.0, 3500.0)]),
        word("bird", vec![Stop(20.0, 900.0), v(&[ER], 250.0), Stop(50.0, 3500.0)]),
        word("cat", vec![Stop(40.0, 2500.0), v(&[AE], 220.0), Stop(50.0, 4500.0)]),
        word("dog", vec![Stop(30.0, 3500.0), v(&[AO], 220.0), Stop(50.0, 1800.0)]),
        word(
            "happy",
            vec![
                Fric(1500.0, 3000.0, 80.0),
                v(&[AE], 150.0),
                Stop(50.0, 1200.0),
                v(&[I], 160.0),
            ],
        ),
        word(
            "house",
            vec![
                Fric(1500.0, 3000.0, 80.0),
                v(&[AA, UH], 240.0),
                Fric(5500.0, 2500.0, 140.0),
            ],
        ),
        word(
            "marvin",
            vec![
                Nasal(70.0),
                v(&[AA, ER], 200.0),
                Fric(3000.0, 3000.0, 50.0),
                v(&[IH], 120.0),
                Nasal(90.0),
            ],
        ),
        word(
            "sheila",
            vec![Fric(2800.0, 1500.0, 130.0), v(&[I], 150.0), v(&[EH, AH], 170.0)],
        ),
        word("tree", vec![Stop(40.0, 4500.0), v(&[ER, I], 280.0)]),
        word("wow", vec![v(&[UW, AA, UW], 380.0)]),
    ]
}

pub fn find_word(name: &str) -> Result<WordModel> {
    vocabulary()
        .into_iter()
        .find(|w| w.name == name)
        .ok_or_else(|| Error::invalid(format!("unknown synthetic word {name:?}")))
}

/// Voice characteristics shared by all utterances of one speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Speaker {
    pub id: String,
    pub f0: f64,
    pub formant_scale: f64,
    pub rate: f64,
    /// One-pole coefficient of the glottal spectral tilt.
    pub tilt: f64,
    pub breathiness: f64,
}

pub fn sample_speaker<R: Rng + ?Sized>(rng: &mut R, id: String) -> Speaker {
    Speaker {
        id,
        f0: rng.random_range(85.0..260.0),
        formant_scale: rng.random_range(0.85..1.2),
        rate: rng.random_range(0.8..1.25),
        tilt: rng.random_range(0.6..0.9),
        breathiness: rng.random_range(0.0..0.15),
    }
}

/// Two-pole resonator with unit gain near its centre frequency.
#[derive(Debug, Clone, Copy, Default)]
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn step(&mut self, x: f64, freq: f64, bw: f64, fs: f64) -> f64 {
        let r = (-PI * bw / fs).exp();
        let a1 = 2.0 * r * (2.0 * PI * freq / fs).cos();
        let a2 = -r * r;
        let y = (1.0 - r) * (1.0 - r * r).sqrt() * x * 2.0 + a1 * self.y1 + a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn ramp(i: usize, n: usize, edge: usize) -> f64 {
    let e = edge.min(n / 2).max(1);
    if i < e {
        0.5 - 0.5 * (PI * i as f64 / e as f64).cos()
    } else if i + e > n {
        0.5 - 0.5 * (PI * (n - i) as f64 / e as f64).cos()
    } else {
        1.0
    }
}

fn glide(path: &[Formants], pos: f64) -> Formants {
    if path.len() == 1 {
        return path[0];
    }
    let x = pos.clamp(0.0, 1.0) * (path.len() - 1) as f64;
    let i = (x.floor() as usize).min(path.len() - 2);
    let w = x - i as f64;
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = path[i][k] * (1.0 - w) + path[i + 1][k] * w;
    }
    out
}

/// Synthesizes one utterance of `word`, unnormalized.
pub fn synth_word<R: Rng + ?Sized>(word: &WordModel, speaker: &Speaker, rng: &mut R, fs: f64) -> Vec<f64> {
    let white = Normal::new(0.0, 1.0).expect("unit normal");
    let rate = speaker.rate * rng.random_range(0.9..1.1);
    let f0 = speaker.f0 * rng.random_range(0.92..1.08);
    let scale = speaker.formant_scale * rng.random_range(0.96..1.04);
    let edge = (0.008 * fs) as usize;
    let mut out = Vec::new();
    let mut phase = 0.0;
    let mut tilt_state = 0.0;
    let mut res = [Resonator::default(); 3];
    for seg in &word.segs {
        let jitter = |rng: &mut R, f: Formants| -> Formants {
            let mut j = f;
            for v in &mut j {
                *v *= scale * rng.random_range(0.95..1.05);
            }
            j
        };
        match seg {
            Seg::Vowel(_, ms) | Seg::Nasal(ms) => {
                let (path, nasal): (Vec<Formants>, bool) = match seg {
                    Seg::Vowel(p, _) => (p.iter().map(|&f| jitter(rng, f)).collect(), false),
                    _ => (vec![jitter(rng, [260.0, 1000.0, 2300.0])], true),
                };
                let n = (ms / rate * 1e-3 * fs) as usize;
                let pitch_slope = rng.random_range(-0.15..0.05);
                for i in 0..n {
                    let pos = i as f64 / n.max(1) as f64;
                    let f0_now = f0 * (1.0 + pitch_slope * pos);
                    phase += f0_now / fs;
                    let pulse = if phase >= 1.0 {
                        phase -= 1.0;
                        1.0
                    } else {
                        0.0
                    };
                    tilt_state = speaker.tilt * tilt_state + pulse;
                    let src = tilt_state + speaker.breathiness * white.sample(rng);
                    let f = glide(&path, pos);
                    let bws = if nasal {
                        [100.0, 300.0, 400.0]
                    } else {
                        [70.0, 100.0, 140.0]
                    };
                    let gains = if nasal { [1.0, 0.1, 0.05] } else { [1.0, 0.7, 0.4] };
                    let mut y = 0.0;
                    for k in 0..3 {
                        y += gains[k] * res[k].step(src, f[k], bws[k], fs);
                    }
                    out.push(y * ramp(i, n, edge) * if nasal { 0.5 } else { 1.0 });
                }
            }
            Seg::Fric(center, bw, ms) => {
                let n = (ms / rate * 1e-3 * fs) as usize;
                let c = (center * scale).min(0.45 * fs);
                let mut r = Resonator::default();
                let mut r2 = Resonator::default();
                let gain = rng.random_range(0.15..0.35);
                for i in 0..n {
                    let x = white.sample(rng);
                    let y = r.step(x, c, *bw, fs) + 0.5 * r2.step(x, (c * 0.6).max(300.0), *bw, fs);
                    out.push(gain * y * ramp(i, n, edge));
                }
            }
            Seg::Stop(ms, burst) => {
                let n = (ms / rate * 1e-3 * fs) as usize;
                out.extend(std::iter::repeat_n(0.0, n));
                let nb = (0.015 * fs) as usize;
                let mut r = Resonator::default();
                let c = (burst * scale).min(0.45 * fs);
                let gain = rng.random_range(0.3..0.6);
                for i in 0..nb {
                    let decay = (-(i as f64) / (0.004 * fs)).exp();
                    out.push(gain * decay * r.step(white.sample(rng), c, 1500.0, fs));
                }
            }
        }
    }
    out
}

/// Places an utterance at a random onset inside a clip of `len` samples and
/// scales its peak to a random level.
pub fn utterance_clip<R: Rng + ?Sized>(
    word: &WordModel,
    speaker: &Speaker,
    rng: &mut R,
    fs: f64,
    len: usize,
) -> Vec<f64> {
    let mut w = synth_word(word, speaker, rng, fs);
    w.truncate(len);
    let peak = w.iter().fold(0f64, |m, v| m.max(v.abs())).max(1e-12);
    let level = rng.random_range(0.2..0.7);
    let mut clip = vec![0.0; len];
    let onset = rng.random_range(0..=len - w.len());
    for (i, v) in w.iter().enumerate() {
        clip[onset + i] = v / peak * level;
    }
    // a faint floor so silence is not digitally exact
    for v in &mut clip {
        *v += 1e-4 * rng.random_range(-1.0..1.0);
    }
    clip
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordCount {
    pub word: String,
    pub clips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub words: Vec<WordCount>,
    pub speakers: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub duration_s: f64,
}

impl CorpusConfig {
    /// `clips_per_class` clips of every keyword and the same total spread
    /// evenly over the remaining vocabulary (the filler class).
    pub fn desk(keywords: &[&str], clips_per_class: usize, seed: u64) -> Result<Self> {
        let vocab = vocabulary();
        for k in keywords {
            find_word(k)?;
        }
        let fillers: Vec<&str> = vocab.iter().map(|w| w.name).filter(|n| !keywords.contains(n)).collect();
        let mut words: Vec<WordCount> = keywords
            .iter()
            .map(|k| WordCount {
                word: k.to_string(),
                clips: clips_per_class,
            })
            .collect();
        for (i, f) in fillers.iter().enumerate() {
            let share = clips_per_class / fillers.len() + usize::from(i < clips_per_class % fillers.len());
            words.push(WordCount {
                word: f.to_string(),
                clips: share,
            });
        }
        Ok(Self {
            words,
            speakers: 60,
            seed,
            sample_rate: 16_000,
            duration_s: 1.0,
        })
    }
}

/// Writes `<root>/<word>/<speaker>_nohash_<n>.wav` (PCM16, 1 s), the layout
/// the dataset scanner expects. Returns the number of files written.
pub fn write_corpus(root: impl AsRef<Path>, config: &CorpusConfig) -> Result<usize> {
    let root = root.as_ref();
    if config.speakers == 0 {
        return Err(Error::invalid("corpus needs at least one speaker"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let speakers: Vec<Speaker> = (0..config.speakers)
        .map(|i| sample_speaker(&mut rng, format!("spk{i:03}")))
        .collect();
    let fs = config.sample_rate as f64;
    let len = (config.duration_s * fs).round() as usize;
    let mut written = 0;
    for (wi, wc) in config.words.iter().enumerate() {
        let model = find_word(&wc.word)?;
        let dir = root.join(&wc.word);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut counts = vec![0usize; speakers.len()];
        for n in 0..wc.clips {
            let mut r = ChaCha8Rng::seed_from_u64(config.seed);
            r.set_stream(((wi as u64) << 32) | n as u64);
            let s = r.random_range(0..speakers.len());
            let samples = utterance_clip(&model, &speakers[s], &mut r, fs, len);
            let clip = AudioClip::from_f64(&[samples], config.sample_rate)?;
            let path = dir.join(format!("{}_nohash_{}.wav", speakers[s].id, counts[s]));
            counts[s] += 1;
            audio::write_wav(&path, &clip, WavEncoding::Pcm16)?;
            written += 1;
        }
    }
    Ok(written)
}

/// Synthetic noise categories; the first twelve (sorted) are the default
/// training categories.
pub const NOISE_CATEGORIES: [&str; 17] = [
    "babble",
    "brown",
    "bubble",
    "cafe",
    "chirp",
    "clatter",
    "engine",
    "fan",
    "hum",
    "keyboard",
    "modulated",
    "pink",
    "rain",
    "siren",
    "traffic",
    "white",
    "wind",
];

fn pink_filter(x: &[f64]) -> Vec<f64> {
    // Kellet's economy pink filter
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    x.iter()
        .map(|&w| {
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect()
}

fn one_pole(x: &[f64], a: f64) -> Vec<f64> {
    let mut s = 0.0;
    x.iter()
        .map(|&v| {
            s = a * s + (1.0 - a) * v;
            s
        })
        .collect()
}

fn bandpass(x: &[f64], center: f64, bw: f64, fs: f64) -> Vec<f64> {
    let mut r = Resonator::default();
    x.iter().map(|&v| r.step(v, center, bw, fs)).collect()
}

fn babble<R: Rng + ?Sized>(rng: &mut R, n: usize, fs: f64, talkers: usize) -> Vec<f64> {
    let vocab = vocabulary();
    let mut out = vec![0.0; n];
    for t in 0..talkers {
        let spk = sample_speaker(rng, format!("babble{t}"));
        let mut pos = rng.random_range(0..(0.3 * fs) as usize);
        while pos < n {
            let w = &vocab[rng.random_range(0..vocab.len())];
            let s = synth_word(w, &spk, rng, fs);
            let peak = s.iter().fold(0f64, |m, v| m.max(v.abs())).max(1e-12);
            for (i, v) in s.iter().enumerate() {
                if pos + i < n {
                    out[pos + i] += v / peak;
                }
            }
            pos += s.len() + rng.random_range(0..(0.15 * fs) as usize);
        }
    }
    out
}

fn impulses<R: Rng + ?Sized>(rng: &mut R, n: usize, fs: f64, rate_hz: f64, freq: (f64, f64), decay_s: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let mut t = 0usize;
    loop {
        t += (rng.random_range(0.2..1.8) * fs / rate_hz) as usize + 1;
        if t >= n {
            break;
        }
        let f = rng.random_range(freq.0..freq.1);
        let a = rng.random_range(0.3..1.0);
        let len = ((decay_s * 6.0 * fs) as usize).min(n - t);
        for i in 0..len {
            let tt = i as f64 / fs;
            out[t + i] += a * (-tt / decay_s).exp() * (2.0 * PI * f * tt).sin();
        }
    }
    out
}

/// Generates `n` samples of a noise category, normalized to unit RMS.
pub fn synth_noise<R: Rng + ?Sized>(category: &str, rng: &mut R, n: usize, fs: f64) -> Result<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let white: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    let t = |i: usize| i as f64 / fs;
    let x: Vec<f64> = match category {
        "white" => white,
        "pink" => pink_filter(&white),
        "brown" => one_pole(&white, 0.995),
        "babble" => babble(rng, n, fs, 6),
        "cafe" => {
            let b = babble(rng, n, fs, 4);
            let c = impulses(rng, n, fs, 3.0, (2000.0, 6000.0), 0.02);
            b.iter().zip(&c).map(|(a, b)| a + 2.0 * b).collect()
        }
        "bubble" => impulses(rng, n, fs, 25.0, (300.0, 1500.0), 0.01),
        "chirp" => {
            let mut ph = 0.0;
            (0..n)
                .map(|i| {
                    let f = 1000.0 + 800.0 * (2.0 * PI * 3.0 * t(i)).sin();
                    ph += 2.0 * PI * f / fs;
                    ph.sin() * (0.5 + 0.5 * (2.0 * PI * 0.7 * t(i)).sin()).powi(2)
                })
                .collect()
        }
        "clatter" => impulses(rng, n, fs, 6.0, (1500.0, 5000.0), 0.05),
        "engine" => {
            let f0 = rng.random_range(25.0..45.0);
            let rumble = one_pole(&white, 0.99);
            (0..n)
                .map(|i| {
                    let h: f64 = (1..8).map(|k| (2.0 * PI * f0 * k as f64 * t(i)).sin() / k as f64).sum();
                    h * (1.0 + 0.3 * (2.0 * PI * 1.5 * t(i)).sin()) + 3.0 * rumble[i]
                })
                .collect()
        }
        "fan" => {
            let blade = rng.random_range(80.0..160.0);
            let lp = one_pole(&white, 0.9);
            (0..n).map(|i| lp[i] + 0.3 * (2.0 * PI * blade * t(i)).sin()).collect()
        }
        "hum" => {
            let f = if rng.random_bool(0.5) { 50.0 } else { 60.0 };
            (0..n)
                .map(|i| {
                    (1..6)
                        .map(|k| (2.0 * PI * f * k as f64 * t(i)).sin() / k as f64)
                        .sum::<f64>()
                        + 0.05 * white[i]
                })
                .collect()
        }
        "keyboard" => impulses(rng, n, fs, 8.0, (3000.0, 7000.0), 0.004),
        "modulated" => (0..n)
            .map(|i| white[i] * (1.0 + (2.0 * PI * 4.0 * t(i)).sin()))
            .collect(),
        "rain" => {
            let drops = impulses(rng, n, fs, 120.0, (2000.0, 7000.0), 0.002);
            let bed = pink_filter(&white);
            drops.iter().zip(&bed).map(|(a, b)| a + 0.1 * b).collect()
        }
        "siren" => {
            let mut ph = 0.0;
            (0..n)
                .map(|i| {
                    let f = 700.0 + 300.0 * (2.0 * PI * 0.5 * t(i)).sin();
                    ph += 2.0 * PI * f / fs;
                    ph.sin() + 0.3 * (2.0 * ph).sin()
                })
                .collect()
        }
        "traffic" => {
            let b = one_pole(&white, 0.995);
            (0..n)
                .map(|i| b[i] * (1.0 + 0.8 * (2.0 * PI * 0.2 * t(i)).sin()))
                .collect()
        }
        "wind" => {
            let bp = bandpass(&white, 400.0, 600.0, fs);
            (0..n)
                .map(|i| bp[i] * (1.2 + (2.0 * PI * 0.3 * t(i)).sin() + 0.5 * (2.0 * PI * 0.11 * t(i)).sin()))
                .collect()
        }
        other => return Err(Error::invalid(format!("unknown noise category {other:?}"))),
    };
    let mean = x.iter().sum::<f64>() / n.max(1) as f64;
    let rms = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1) as f64).sqrt();
    if !(rms > 0.0) {
        return Err(Error::Dataset(format!("noise {category} came out silent")));
    }
    Ok(x.iter().map(|v| 0.1 * (v - mean) / rms).collect())
}

/// One `seconds`-long clip per category, seeded per category.
pub fn noise_pool(seed: u64, seconds: f64, sample_rate: u32) -> Result<NoisePool> {
    let fs = sample_rate as f64;
    let n = (seconds * fs).round() as usize;
    let mut clips = Vec::with_capacity(NOISE_CATEGORIES.len());
    for (i, cat) in NOISE_CATEGORIES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        clips.push(NoiseClip {
            category: cat.to_string(),
            samples: synth_noise(cat, &mut rng, n, fs)?,
        });
    }
    Ok(NoisePool { clips })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_are_distinct_and_fit_one_second() {
        let vocab = vocabulary();
        let mut names: Vec<_> = vocab.iter().map(|w| w.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let slow = Speaker {
            id: "s".into(),
            f0: 100.0,
            formant_scale: 1.0,
            rate: 0.8,
            tilt: 0.8,
            breathiness: 0.1,
        };
        for w in &vocab {
            let s = synth_word(w, &slow, &mut rng, 16_000.0);
            assert!(s.len() < 16_000 * 7 / 10, "{} is {} samples", w.name, s.len());
            assert!(s.iter().all(|v| v.is_finite()));
            assert!(s.iter().any(|v| v.abs() > 1e-3));
        }
    }

    #[test]
    fn clip_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spk = sample_speaker(&mut rng, "a".into());
        let c = utterance_clip(&find_word("yes").unwrap(), &spk, &mut rng, 16_000.0, 16_000);
        assert_eq!(c.len(), 16_000);
        assert!(c.iter().all(|v| v.abs() < 0.71));
    }

    #[test]
    fn every_noise_category_is_unit_scaled() {
        let pool = noise_pool(3, 0.5, 16_000).unwrap();
        assert_eq!(pool.categories().len(), 17);
        for c in &pool.clips {
            let rms = (c.samples.iter().map(|v| v * v).sum::<f64>() / c.samples.len() as f64).sqrt();
            assert!((rms - 0.1).abs() < 1e-9, "{} rms {rms}", c.category);
        }
    }

    #[test]
    fn desk_preset_balances_filler() {
        let c = CorpusConfig::desk(&["yes", "no"], 300, 0).unwrap();
        let filler: usize = c.words[2..].iter().map(|w| w.clips).sum();
        assert_eq!(filler, 300);
        assert_eq!(c.words.len(), 20);
        assert!(CorpusConfig::desk(&["nope"], 3, 0).is_err());
    }
}

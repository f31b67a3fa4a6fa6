//! Deterministic signal-processing kernels shared by rendering, feature
//! extraction and the streaming engine.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan_forward(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

fn plan_inverse(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
    Rect,
}

/// Framing parameters. Frames are never center-padded: frame `t` covers
/// samples `t*hop .. t*hop + window`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window_kind: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window: 256,
            hop: 160,
            fft_size: 256,
            window_kind: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.hop == 0 || self.fft_size == 0 {
            return Err(Error::invalid("stft sizes must be positive"));
        }
        if self.hop > self.window || self.window > self.fft_size {
            return Err(Error::invalid(format!(
                "stft requires hop <= window <= fft (got hop {}, window {}, fft {})",
                self.hop, self.window, self.fft_size
            )));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// `1 + floor((n - window) / hop)`, or 0 when the signal is shorter than
    /// one window.
    pub fn num_frames(&self, n: usize) -> usize {
        if n < self.window {
            0
        } else {
            1 + (n - self.window) / self.hop
        }
    }

    pub fn window_coefficients(&self) -> Vec<f64> {
        match self.window_kind {
            WindowKind::Rect => vec![1.0; self.window],
            // periodic Hann
            WindowKind::Hann => (0..self.window)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / self.window as f64).cos())
                .collect(),
        }
    }
}

/// Per-frame analysis: window, zero-pad to the FFT size, keep the one-sided
/// spectrum.
#[derive(Clone)]
pub struct FrameAnalyzer {
    config: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FrameAnalyzer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrameAnalyzer").field("config", &self.config).finish()
    }
}

impl FrameAnalyzer {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            window: config.window_coefficients(),
            fft: plan_forward(config.fft_size),
            config,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// `frame` must hold exactly `window` samples; `out` receives `F` bins.
    pub fn analyze(&self, frame: &[f64], out: &mut [Complex64]) {
        debug_assert_eq!(frame.len(), self.config.window);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.config.fft_size];
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
            b.re = x * w;
        }
        self.fft.process(&mut buf);
        out.copy_from_slice(&buf[..self.config.num_bins()]);
    }
}

/// Multi-channel complex spectrogram `X_m(f, t)`, stored channel-major then
/// frame-major: index `(m * T + t) * F + f`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    data: Vec<Complex64>,
    channels: usize,
    frames: usize,
    bins: usize,
    config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn new(data: Vec<Complex64>, channels: usize, frames: usize, config: StftConfig) -> Result<Self> {
        let bins = config.num_bins();
        if data.len() != channels * frames * bins {
            return Err(Error::Shape {
                op: "ComplexSpectrogram::new",
                lhs: vec![data.len()],
                rhs: vec![channels, frames, bins],
            });
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite("spectrogram".into()));
        }
        Ok(Self {
            data,
            channels,
            frames,
            bins,
            config,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn get(&self, m: usize, t: usize, f: usize) -> Complex64 {
        self.data[(m * self.frames + t) * self.bins + f]
    }

    pub fn frame(&self, m: usize, t: usize) -> &[Complex64] {
        let start = (m * self.frames + t) * self.bins;
        &self.data[start..start + self.bins]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }
}

/// Short-time Fourier transform of every channel.
pub fn stft(channels: &[Vec<f64>], config: &StftConfig) -> Result<ComplexSpectrogram> {
    let analyzer = FrameAnalyzer::new(*config)?;
    if channels.is_empty() {
        return Err(Error::invalid("stft of zero channels"));
    }
    let n = channels[0].len();
    if channels.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("stft channels differ in length"));
    }
    if n < config.window {
        return Err(Error::invalid(format!(
            "signal of {n} samples is shorter than one {}-sample window",
            config.window
        )));
    }
    let frames = config.num_frames(n);
    let bins = config.num_bins();
    let mut data = vec![Complex64::new(0.0, 0.0); channels.len() * frames * bins];
    for (m, ch) in channels.iter().enumerate() {
        for t in 0..frames {
            let start = t * config.hop;
            let out = &mut data[(m * frames + t) * bins..(m * frames + t + 1) * bins];
            analyzer.analyze(&ch[start..start + config.window], out);
        }
    }
    ComplexSpectrogram::new(data, channels.len(), frames, *config)
}

/// Floor added to filterbank energies before the log.
pub const FBANK_EPS: f64 = 1e-10;

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Dense filterbank matrix `[filter][bin]` applied to power spectra.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    /// Triangular filters equally spaced on the mel scale between `fmin`
    /// and `fmax`.
    pub fn new(n_mels: usize, fft_size: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Result<Self> {
        if n_mels == 0 || fmin < 0.0 || fmax <= fmin {
            return Err(Error::invalid("bad mel filterbank parameters"));
        }
        let bins = fft_size / 2 + 1;
        let lo = hz_to_mel(fmin);
        let hi = hz_to_mel(fmax);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let weights = (0..n_mels)
            .map(|j| {
                let (l, c, r) = (edges[j], edges[j + 1], edges[j + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= l || f >= r {
                            0.0
                        } else if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self { weights })
    }

    pub fn from_matrix(weights: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| w.len() != weights[0].len()) {
            return Err(Error::invalid("filterbank matrix must be non-empty and rectangular"));
        }
        Ok(Self { weights })
    }

    pub fn num_filters(&self) -> usize {
        self.weights.len()
    }

    pub fn num_bins(&self) -> usize {
        self.weights[0].len()
    }

    /// `log(W · |X|^2 + eps)` for one frame.
    pub fn log_energies(&self, spectrum: &[Complex64], out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(&self.weights) {
            let e: f64 = w.iter().zip(spectrum).map(|(w, x)| w * x.norm_sqr()).sum();
            *o = (e + FBANK_EPS).ln();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FbankConfig {
    pub stft: StftConfig,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub fmin_hz: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            n_mels: 40,
            sample_rate: 16_000,
            fmin_hz: 20.0,
        }
    }
}

impl FbankConfig {
    pub fn filterbank(&self) -> Result<MelFilterbank> {
        MelFilterbank::new(
            self.n_mels,
            self.stft.fft_size,
            self.sample_rate,
            self.fmin_hz,
            self.sample_rate as f64 / 2.0,
        )
    }
}

/// Log-mel energies, `[frame][mel]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FbankFeatures {
    pub data: Vec<f64>,
    pub frames: usize,
    pub n_mels: usize,
}

impl FbankFeatures {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }
}

pub fn fbank(signal: &[f64], config: &FbankConfig) -> Result<FbankFeatures> {
    fbank_with(signal, &config.stft, &config.filterbank()?)
}

pub fn fbank_with(signal: &[f64], stft_config: &StftConfig, bank: &MelFilterbank) -> Result<FbankFeatures> {
    if bank.num_bins() != stft_config.num_bins() {
        return Err(Error::Shape {
            op: "fbank",
            lhs: vec![bank.num_bins()],
            rhs: vec![stft_config.num_bins()],
        });
    }
    let spec = stft(&[signal.to_vec()], stft_config)?;
    let n_mels = bank.num_filters();
    let mut data = vec![0.0; spec.frames() * n_mels];
    for t in 0..spec.frames() {
        bank.log_energies(spec.frame(0, t), &mut data[t * n_mels..(t + 1) * n_mels]);
    }
    Ok(FbankFeatures {
        data,
        frames: spec.frames(),
        n_mels,
    })
}

/// Full linear convolution by direct summation.
pub fn convolve_direct(x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() || h.is_empty() {
        return Err(Error::invalid("convolution of an empty sequence"));
    }
    let mut y = vec![0.0; x.len() + h.len() - 1];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (yk, &hk) in y[i..i + h.len()].iter_mut().zip(h) {
            *yk += xi * hk;
        }
    }
    Ok(y)
}

/// Full linear convolution through zero-padded FFTs.
pub fn convolve_fft(x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() || h.is_empty() {
        return Err(Error::invalid("convolution of an empty sequence"));
    }
    let out_len = x.len() + h.len() - 1;
    let n = out_len.next_power_of_two();
    let fwd = plan_forward(n);
    let inv = plan_inverse(n);
    let mut a: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    a.resize(n, Complex64::new(0.0, 0.0));
    let mut b: Vec<Complex64> = h.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    b.resize(n, Complex64::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (ai, bi) in a.iter_mut().zip(&b) {
        *ai *= bi;
    }
    inv.process(&mut a);
    let scale = 1.0 / n as f64;
    Ok(a[..out_len].iter().map(|c| c.re * scale).collect())
}

/// Full linear convolution (`len = N + L - 1`), picking the cheaper path.
pub fn convolve(x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    if x.len().min(h.len()) <= 64 {
        convolve_direct(x, h)
    } else {
        convolve_fft(x, h)
    }
}

/// Mean power of a sequence.
pub fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// `10 log10(P_signal / P_noise)`.
pub fn snr_db(signal: &[f64], noise: &[f64]) -> f64 {
    10.0 * (power(signal) / power(noise)).log10()
}

/// Crops or tiles `x` to exactly `n` samples.
pub fn fit_length(x: &[f64], n: usize) -> Vec<f64> {
    x.iter().copied().cycle().take(n).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub channels: Vec<Vec<f64>>,
    /// Gain applied to the noise; 0 in the no-noise condition.
    pub noise_gain: f64,
    /// The scaled noise actually added.
    pub scaled_noise: Vec<Vec<f64>>,
}

/// Adds `noise` to `target` so that the power ratio on `ref_channel` equals
/// `snr_db`. Noise is cropped or tiled to the target length. `f64::INFINITY`
/// requests the no-noise condition.
pub fn mix_at_snr(target: &[Vec<f64>], noise: &[Vec<f64>], snr_db: f64, ref_channel: usize) -> Result<Mixture> {
    if target.is_empty() || ref_channel >= target.len() {
        return Err(Error::invalid("reference channel out of range"));
    }
    let n = target[0].len();
    if snr_db == f64::INFINITY {
        return Ok(Mixture {
            channels: target.to_vec(),
            noise_gain: 0.0,
            scaled_noise: vec![vec![0.0; n]; target.len()],
        });
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid(format!("snr {snr_db} dB is not usable")));
    }
    if noise.len() != target.len() {
        return Err(Error::invalid(format!(
            "target has {} channels but noise has {}",
            target.len(),
            noise.len()
        )));
    }
    if noise.iter().any(|c| c.is_empty()) {
        return Err(Error::invalid("empty noise channel"));
    }
    let noise: Vec<Vec<f64>> = noise.iter().map(|c| fit_length(c, n)).collect();
    let p_target = power(&target[ref_channel]);
    let p_noise = power(&noise[ref_channel]);
    if p_target <= 0.0 {
        return Err(Error::invalid("target is silent on the reference channel"));
    }
    if p_noise <= 0.0 {
        return Err(Error::invalid("noise is silent on the reference channel"));
    }
    let gain = (p_target / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled_noise: Vec<Vec<f64>> = noise.iter().map(|c| c.iter().map(|v| v * gain).collect()).collect();
    let channels = target
        .iter()
        .zip(&scaled_noise)
        .map(|(t, s)| t.iter().zip(s).map(|(a, b)| a + b).collect())
        .collect();
    Ok(Mixture {
        channels,
        noise_gain: gain,
        scaled_noise,
    })
}

//! Generalized sidelobe canceller: delay-and-sum beam, adjacent-difference
//! blocking matrix and an NLMS interference canceller.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roomsim::{ArrayGeometry, ZoneScheme, SPEED_OF_SOUND};

/// Half-width of the fractional-delay interpolator (81 taps).
pub const INTERP_HALF: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GscConfig {
    pub steering_deg: f64,
    pub taps: usize,
    pub mu: f64,
    pub delta: f64,
    pub sample_rate: u32,
    pub geometry: ArrayGeometry,
}

impl GscConfig {
    /// Defaults: 64 taps, mu 0.1, delta 1e-6, 16 kHz.
    pub fn new(geometry: ArrayGeometry, steering_deg: f64) -> Self {
        Self {
            steering_deg,
            taps: 64,
            mu: 0.1,
            delta: 1e-6,
            sample_rate: 16_000,
            geometry,
        }
    }

    /// Steers at the centre of `zone`.
    pub fn for_zone(geometry: ArrayGeometry, scheme: &ZoneScheme, zone: usize) -> Result<Self> {
        Ok(Self::new(geometry, scheme.zone_center(zone)?))
    }

    pub fn validate(&self) -> Result<()> {
        // mu = 0 freezes the canceller, which is useful for comparisons
        if !(0.0..2.0).contains(&self.mu) {
            return Err(Error::invalid(format!("NLMS step {} outside [0, 2)", self.mu)));
        }
        if self.taps == 0 || !(self.delta > 0.0) {
            return Err(Error::invalid("NLMS needs taps > 0 and delta > 0"));
        }
        if self.geometry.num_mics() < 2 {
            return Err(Error::invalid("GSC needs at least two microphones"));
        }
        Ok(())
    }
}

/// Far-field arrival delays in samples, `-(u . p_i) / c * fs`, shifted so the
/// earliest microphone has delay 0.
pub fn steering_delays(geometry: &ArrayGeometry, azimuth_deg: f64, fs: u32) -> Result<Vec<f64>> {
    if !(0.0..=360.0).contains(&azimuth_deg) {
        return Err(Error::invalid(format!(
            "steering azimuth {azimuth_deg} outside [0, 360]"
        )));
    }
    let (s, c) = azimuth_deg.to_radians().sin_cos();
    let raw: Vec<f64> = geometry
        .mics
        .iter()
        .map(|p| -(c * p[0] + s * p[1]) / SPEED_OF_SOUND * fs as f64)
        .collect();
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(raw.into_iter().map(|d| d - min).collect())
}

fn windowed_sinc(t: f64) -> f64 {
    let width = INTERP_HALF as f64 + 1.0;
    if t.abs() >= width {
        return 0.0;
    }
    let sinc = if t.abs() < 1e-12 {
        1.0
    } else {
        (PI * t).sin() / (PI * t)
    };
    sinc * 0.5 * (1.0 + (PI * t / width).cos())
}

/// Delays `x` by `delay` samples with a zero-phase windowed-sinc
/// interpolator. Integer delays are exact shifts; samples outside the input
/// are treated as zero.
pub fn fractional_delay(x: &[f64], delay: f64) -> Vec<f64> {
    if delay == 0.0 {
        return x.to_vec();
    }
    let shift = delay.floor() as i64;
    let frac = delay - shift as f64;
    if frac == 0.0 {
        return (0..x.len() as i64)
            .map(|n| {
                let m = n - shift;
                if m >= 0 && (m as usize) < x.len() {
                    x[m as usize]
                } else {
                    0.0
                }
            })
            .collect();
    }
    let half = INTERP_HALF as i64 + 1;
    // y[n] = sum_k x[n - shift - k] h(k - frac)
    let kernel: Vec<(i64, f64)> = (-half..=half).map(|k| (k, windowed_sinc(k as f64 - frac))).collect();
    let len = x.len() as i64;
    (0..len)
        .map(|n| {
            kernel
                .iter()
                .map(|&(k, h)| {
                    let m = n - shift - k;
                    if m >= 0 && m < len {
                        x[m as usize] * h
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}

fn check_channels(channels: &[Vec<f64>], delays: &[f64]) -> Result<usize> {
    if channels.is_empty() {
        return Err(Error::invalid("no channels"));
    }
    if channels.len() != delays.len() {
        return Err(Error::Shape {
            op: "beamform",
            lhs: vec![channels.len()],
            rhs: vec![delays.len()],
        });
    }
    let n = channels[0].len();
    if let Some(c) = channels.iter().find(|c| c.len() != n) {
        return Err(Error::Shape {
            op: "beamform",
            lhs: vec![n],
            rhs: vec![c.len()],
        });
    }
    Ok(n)
}

/// Time-aligns channels given their arrival delays: channel `i` is delayed
/// by `max(d) - d_i`, so the result lines up with the latest microphone.
pub fn align(channels: &[Vec<f64>], delays: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_channels(channels, delays)?;
    let max = delays.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(channels
        .iter()
        .zip(delays)
        .map(|(c, d)| fractional_delay(c, max - d))
        .collect())
}

/// Average of the aligned channels.
pub fn delay_and_sum(channels: &[Vec<f64>], delays: &[f64]) -> Result<Vec<f64>> {
    let aligned = align(channels, delays)?;
    Ok(mean_channels(&aligned))
}

fn mean_channels(aligned: &[Vec<f64>]) -> Vec<f64> {
    let m = aligned.len() as f64;
    let mut out = vec![0.0; aligned[0].len()];
    for c in aligned {
        for (o, v) in out.iter_mut().zip(c) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= m);
    out
}

fn adjacent_differences(aligned: &[Vec<f64>]) -> Vec<Vec<f64>> {
    aligned
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect())
        .collect()
}

/// `M - 1` noise references: differences of adjacent aligned channels.
pub fn blocking_matrix(channels: &[Vec<f64>], delays: &[f64]) -> Result<Vec<Vec<f64>>> {
    if channels.len() < 2 {
        return Err(Error::invalid("blocking matrix needs at least two channels"));
    }
    let aligned = align(channels, delays)?;
    Ok(adjacent_differences(&aligned))
}

/// Multichannel NLMS filter over `refs x taps` inputs.
#[derive(Debug, Clone)]
pub struct Nlms {
    taps: usize,
    mu: f64,
    delta: f64,
    weights: Vec<Vec<f64>>,
    history: Vec<Vec<f64>>,
    pos: usize,
    energy: f64,
}

impl Nlms {
    pub fn new(refs: usize, taps: usize, mu: f64, delta: f64) -> Self {
        Self {
            taps,
            mu,
            delta,
            weights: vec![vec![0.0; taps]; refs],
            history: vec![vec![0.0; taps]; refs],
            pos: 0,
            energy: 0.0,
        }
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().flatten().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// Shifts in one sample per reference.
    pub fn push(&mut self, x: &[f64]) {
        self.pos = (self.pos + self.taps - 1) % self.taps;
        for (h, &v) in self.history.iter_mut().zip(x) {
            let old = h[self.pos];
            self.energy += v * v - old * old;
            h[self.pos] = v;
        }
        // recompute once per wrap so rounding in the running sum cannot drift
        if self.pos == 0 {
            self.energy = self.history.iter().flatten().map(|v| v * v).sum();
        }
    }

    /// `sum_r sum_k w_r[k] x_r[n - k]` for the current history.
    pub fn output(&self) -> f64 {
        self.filter(&self.history)
    }

    /// Applies the current weights to another history laid out like this one.
    fn filter(&self, history: &[Vec<f64>]) -> f64 {
        let mut y = 0.0;
        for (w, h) in self.weights.iter().zip(history) {
            for k in 0..self.taps {
                y += w[k] * h[(self.pos + k) % self.taps];
            }
        }
        y
    }

    /// `w <- w + mu e x / (|x|^2 + delta)`.
    pub fn update(&mut self, error: f64) {
        let g = self.mu * error / (self.energy + self.delta);
        for (w, h) in self.weights.iter_mut().zip(&self.history) {
            for k in 0..self.taps {
                w[k] += g * h[(self.pos + k) % self.taps];
            }
        }
    }
}

/// GSC output; `components[j]` is component `j` of the input passed through
/// the same time-varying filters.
#[derive(Debug, Clone, PartialEq)]
pub struct GscOutput {
    pub output: Vec<f64>,
    pub components: Vec<Vec<f64>>,
}

/// Enhances `channels` toward `config.steering_deg`. The output is aligned
/// with the latest-arriving microphone and has the input's length.
pub fn gsc_process(channels: &[Vec<f64>], config: &GscConfig) -> Result<Vec<f64>> {
    Ok(gsc_process_tracked(channels, &[], config)?.output)
}

/// Like [`gsc_process`], additionally filtering each of `components` (whose
/// sum is `channels`) with the weights adapted on the mixture.
pub fn gsc_process_tracked(
    channels: &[Vec<f64>],
    components: &[Vec<Vec<f64>>],
    config: &GscConfig,
) -> Result<GscOutput> {
    config.validate()?;
    if channels.len() != config.geometry.num_mics() {
        return Err(Error::Shape {
            op: "gsc_process",
            lhs: vec![channels.len()],
            rhs: vec![config.geometry.num_mics()],
        });
    }
    let delays = steering_delays(&config.geometry, config.steering_deg, config.sample_rate)?;
    let n = check_channels(channels, &delays)?;
    let aligned = align(channels, &delays)?;
    let beam = mean_channels(&aligned);
    let refs = adjacent_differences(&aligned);

    let mut comp_beam = Vec::with_capacity(components.len());
    let mut comp_refs = Vec::with_capacity(components.len());
    for comp in components {
        if check_channels(comp, &delays)? != n {
            return Err(Error::Shape {
                op: "gsc_process",
                lhs: vec![n],
                rhs: vec![comp[0].len()],
            });
        }
        let a = align(comp, &delays)?;
        comp_beam.push(mean_channels(&a));
        comp_refs.push(adjacent_differences(&a));
    }

    let r = refs.len();
    let mut nlms = Nlms::new(r, config.taps, config.mu, config.delta);
    let mut comp_hist: Vec<Nlms> = components.iter().map(|_| Nlms::new(r, config.taps, 0.0, 1.0)).collect();
    let mut output = vec![0.0; n];
    let mut comp_out = vec![vec![0.0; n]; components.len()];
    let mut x = vec![0.0; r];
    for t in 0..n {
        for (xi, rf) in x.iter_mut().zip(&refs) {
            *xi = rf[t];
        }
        nlms.push(&x);
        for (j, hist) in comp_hist.iter_mut().enumerate() {
            for (xi, rf) in x.iter_mut().zip(&comp_refs[j]) {
                *xi = rf[t];
            }
            hist.push(&x);
            comp_out[j][t] = comp_beam[j][t] - nlms.filter(&hist.history);
        }
        let e = beam[t] - nlms.output();
        output[t] = e;
        nlms.update(e);
    }
    Ok(GscOutput {
        output,
        components: comp_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadside_and_endfire_delays() {
        let g = ArrayGeometry::linear(0.03);
        let d = steering_delays(&g, 90.0, 16000).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-12));
        let d = steering_delays(&g, 0.0, 16000).unwrap();
        let want = 0.03 / 343.0 * 16000.0;
        assert!(((d[0] - d[1]).abs() - want).abs() < 1e-12);
        assert!((want - 1.399).abs() < 1e-3);
        // source at +x reaches the +x mic first
        assert!(d[1] < d[0]);
        assert!(steering_delays(&g, 400.0, 16000).is_err());
    }

    #[test]
    fn triangle_delays_permute_under_rotation() {
        let g = ArrayGeometry::triangle(0.03);
        for az in [10.0, 47.0, 100.0] {
            let a = steering_delays(&g, az, 16000).unwrap();
            let b = steering_delays(&g, az + 120.0, 16000).unwrap();
            // mic i at angle 90 + 120 i; rotating the source by 120 moves mic i's role to mic i+1
            for i in 0..3 {
                assert!((a[i] - b[(i + 1) % 3]).abs() < 1e-9, "{az}: {a:?} {b:?}");
            }
        }
    }

    #[test]
    fn identical_channels_zero_delays_is_identity() {
        let x: Vec<f64> = (0..500).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let chans = vec![x.clone(), x.clone(), x.clone()];
        let y = delay_and_sum(&chans, &[0.0; 3]).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-9);
        }
        let refs = blocking_matrix(&chans, &[0.0; 3]).unwrap();
        assert_eq!(refs.len(), 2);
        assert!(refs.iter().flatten().all(|&v| v == 0.0));
        assert!(delay_and_sum(&[vec![0.0; 10], vec![0.0; 10]], &[0.0, 0.3])
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn integer_fractional_delay_is_a_shift() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(fractional_delay(&x, 2.0), vec![0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn length_mismatch_errors() {
        assert!(delay_and_sum(&[vec![0.0; 3], vec![0.0; 4]], &[0.0, 0.0]).is_err());
        assert!(blocking_matrix(&[vec![0.0; 3]], &[0.0]).is_err());
    }

    #[test]
    fn identical_channels_give_the_beam() {
        let x: Vec<f64> = (0..2000).map(|i| (i as f64 * 0.013).sin()).collect();
        let cfg = GscConfig::new(ArrayGeometry::linear(0.03), 90.0);
        let y = gsc_process(&[x.clone(), x.clone()], &cfg).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_step_keeps_filters_at_zero() {
        let a: Vec<f64> = (0..3000).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..3000).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cfg = GscConfig::new(ArrayGeometry::linear(0.03), 60.0);
        cfg.mu = 0.0;
        let chans = vec![a, b];
        let y = gsc_process(&chans, &cfg).unwrap();
        let delays = steering_delays(&cfg.geometry, 60.0, 16000).unwrap();
        let dsb = delay_and_sum(&chans, &delays).unwrap();
        assert_eq!(y, dsb);
    }

    #[test]
    fn config_validation() {
        let mut cfg = GscConfig::new(ArrayGeometry::linear(0.03), 90.0);
        cfg.mu = 2.5;
        assert!(cfg.validate().is_err());
        cfg.mu = 0.1;
        cfg.taps = 0;
        assert!(cfg.validate().is_err());
    }
}

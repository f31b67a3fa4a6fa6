//! Shoebox room simulation with the image-source method, direction-zone
//! labelling, scene sampling and multi-channel scene rendering.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioClip, ManifestEntry, RenderRecord, WavEncoding};
use crate::dsp::{self, StftConfig};
use crate::error::{Error, Result};

/// Speed of sound, m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;
/// Minimum distance between any source or array and a wall.
pub const WALL_MARGIN: f64 = 0.3;
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

pub type Point = [f64; 3];

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Shoebox room with uniform wall absorption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub dims: Point,
    pub rt60: f64,
    pub absorption: f64,
}

impl RoomSpec {
    /// Derives the absorption coefficient so that image-source responses in
    /// this room decay with the requested `rt60` (see
    /// [`calibrated_absorption`]).
    pub fn new(dims: Point, rt60: f64) -> Result<Self> {
        if dims.iter().any(|&d| !(d > 0.0)) || !(rt60 > 0.0) {
            return Err(Error::invalid("room dimensions and rt60 must be positive"));
        }
        Ok(Self {
            dims,
            rt60,
            absorption: calibrated_absorption(dims, rt60),
        })
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dims;
        2.0 * (x * y + x * z + y * z)
    }

    /// Pressure reflection coefficient `sqrt(1 - alpha)`.
    pub fn reflection(&self) -> f64 {
        (1.0 - self.absorption).max(0.0).sqrt()
    }

    pub fn contains(&self, p: &Point, margin: f64) -> bool {
        p.iter().zip(&self.dims).all(|(&c, &l)| c >= margin && c <= l - margin)
    }
}

/// `alpha = 0.1611 V / (S T60)`, clipped to `(0, 1]`.
pub fn sabine_absorption(dims: Point, rt60: f64) -> f64 {
    let [x, y, z] = dims;
    let v = x * y * z;
    let s = 2.0 * (x * y + x * z + y * z);
    (0.1611 * v / (s * rt60)).clamp(f64::MIN_POSITIVE, 1.0)
}

/// Decay time of the late image-source energy for uniform absorption
/// `alpha`, as a Schroeder fit over -5..-25 dB of a response truncated at
/// `t_end`.
///
/// An image in direction `u` at distance `c t` has undergone about
/// `c t sum_i |u_i| / L_i` reflections, and image density grows like the
/// spherical spreading loss shrinks, so the energy envelope is the
/// direction average of `exp(-k(u) t)` with
/// `k(u) = -ln(1 - alpha) c sum_i |u_i| / L_i`.
pub fn image_decay_t60(dims: Point, alpha: f64, t_end: f64) -> f64 {
    let lb = -(1.0 - alpha.min(1.0 - 1e-12)).ln() * SPEED_OF_SOUND;
    unit_decay_t60(&direction_rates(dims), lb * t_end) / lb
}

/// `sum_i |u_i| / L_i` over an equal-area grid on one octant.
fn direction_rates(dims: Point) -> Vec<f64> {
    const GRID: usize = 16;
    let mut rates = Vec::with_capacity(GRID * GRID);
    for i in 0..GRID {
        let z = (i as f64 + 0.5) / GRID as f64;
        let r = (1.0 - z * z).sqrt();
        for j in 0..GRID {
            let phi = (j as f64 + 0.5) / GRID as f64 * PI / 2.0;
            rates.push(r * phi.cos() / dims[0] + r * phi.sin() / dims[1] + z / dims[2]);
        }
    }
    rates
}

/// Decay time with the rate scale folded into time units.
fn unit_decay_t60(rates: &[f64], t_end: f64) -> f64 {
    const STEPS: usize = 240;
    let edc = |t: f64| -> f64 { rates.iter().map(|k| ((-k * t).exp() - (-k * t_end).exp()) / k).sum() };
    let e0 = edc(0.0);
    let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for step in 0..STEPS {
        let t = t_end * step as f64 / STEPS as f64;
        let db = 10.0 * (edc(t) / e0).log10();
        if db < -25.0 {
            break;
        }
        if db <= -5.0 {
            n += 1.0;
            sx += t;
            sy += db;
            sxx += t * t;
            sxy += t * db;
        }
    }
    if n < 2.0 {
        return 0.0;
    }
    -60.0 / ((n * sxy - sx * sy) / (n * sxx - sx * sx))
}

/// Absorption for which [`image_decay_t60`] equals `rt60`, with the response
/// truncated at the simulator's `1.2 rt60`.
///
/// Sabine's inversion overestimates the decay time of image-source
/// responses at high absorption, and elongated rooms decay more slowly along
/// their long axis than a diffuse field, so the coefficient is solved for
/// directly. In units of `x = -ln(1 - alpha) c rt60` the condition is the
/// fixed point `x = T(1.2 x)`, where `T` depends on the truncation only
/// weakly.
pub fn calibrated_absorption(dims: Point, rt60: f64) -> f64 {
    let rates = direction_rates(dims);
    let mut x = unit_decay_t60(&rates, 1e3);
    for _ in 0..20 {
        let next = unit_decay_t60(&rates, 1.2 * x);
        let done = (next - x).abs() < 1e-9 * x;
        x = next;
        if done {
            break;
        }
    }
    (1.0 - (-x / (rt60 * SPEED_OF_SOUND)).exp()).clamp(f64::MIN_POSITIVE, 1.0)
}

/// Uniform room sampling over 3-8 m x 3-5 m x 2.5-4 m, RT60 0.05-0.8 s.
pub fn sample_room<R: Rng + ?Sized>(rng: &mut R) -> RoomSpec {
    let dims = [
        rng.random_range(3.0..=8.0),
        rng.random_range(3.0..=5.0),
        rng.random_range(2.5..=4.0),
    ];
    let rt60 = rng.random_range(0.05..=0.8);
    RoomSpec::new(dims, rt60).expect("sampled ranges are positive")
}

/// Microphone layout in the array frame (metres, x along the array axis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub mics: Vec<Point>,
}

impl ArrayGeometry {
    pub fn new(mics: Vec<Point>) -> Result<Self> {
        if mics.is_empty() {
            return Err(Error::invalid("array needs at least one microphone"));
        }
        for i in 0..mics.len() {
            for j in i + 1..mics.len() {
                if dist(&mics[i], &mics[j]) < 1e-9 {
                    return Err(Error::invalid("microphone positions must be distinct"));
                }
            }
        }
        Ok(Self { mics })
    }

    /// Two microphones on the x axis, `spacing` apart.
    pub fn linear(spacing: f64) -> Self {
        Self {
            mics: vec![[-spacing / 2.0, 0.0, 0.0], [spacing / 2.0, 0.0, 0.0]],
        }
    }

    /// Equilateral triangle in the horizontal plane.
    pub fn triangle(side: f64) -> Self {
        let r = side / 3f64.sqrt();
        Self {
            mics: [90.0f64, 210.0, 330.0]
                .iter()
                .map(|a| {
                    let a = a.to_radians();
                    [r * a.cos(), r * a.sin(), 0.0]
                })
                .collect(),
        }
    }

    /// 3 cm linear pair or 3 cm triangle.
    pub fn preset(channels: usize) -> Result<Self> {
        match channels {
            2 => Ok(Self::linear(0.03)),
            3 => Ok(Self::triangle(0.03)),
            other => Err(Error::invalid(format!("no array preset for {other} channels"))),
        }
    }

    pub fn num_mics(&self) -> usize {
        self.mics.len()
    }

    pub fn radius(&self) -> f64 {
        self.mics.iter().map(|p| dist(p, &[0.0; 3])).fold(0.0, f64::max)
    }
}

/// `K` equal azimuth zones over a field of view. Intervals are left-closed;
/// the last one is also right-closed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneScheme {
    pub zones: usize,
    pub fov_deg: f64,
}

/// Zone label reserved for "no spatial prior".
pub const NO_PRIOR: usize = 0;

impl ZoneScheme {
    pub fn new(zones: usize, fov_deg: f64) -> Result<Self> {
        if zones == 0 || !(fov_deg > 0.0 && fov_deg <= 360.0) {
            return Err(Error::invalid("zone scheme needs K > 0 and 0 < FOV <= 360"));
        }
        Ok(Self { zones, fov_deg })
    }

    /// Six 30 degree zones over the front half-plane.
    pub fn front_half() -> Self {
        Self {
            zones: 6,
            fov_deg: 180.0,
        }
    }

    /// Twelve 30 degree zones over the full circle.
    pub fn full_circle() -> Self {
        Self {
            zones: 12,
            fov_deg: 360.0,
        }
    }

    /// Preset FOV per channel count; `zones` overrides K.
    pub fn for_channels(channels: usize, zones: Option<usize>) -> Result<Self> {
        let base = match channels {
            2 => Self::front_half(),
            3 => Self::full_circle(),
            other => return Err(Error::invalid(format!("no zone scheme for {other} channels"))),
        };
        Self::new(zones.unwrap_or(base.zones), base.fov_deg)
    }

    pub fn bin_width(&self) -> f64 {
        self.fov_deg / self.zones as f64
    }

    pub fn is_full_circle(&self) -> bool {
        self.fov_deg >= 360.0
    }

    /// Size of the label vocabulary including the no-prior token.
    pub fn vocab_size(&self) -> usize {
        self.zones + 1
    }

    /// Centre azimuth of zone `zone` (1-based).
    pub fn zone_center(&self, zone: usize) -> Result<f64> {
        if zone == NO_PRIOR || zone > self.zones {
            return Err(Error::invalid(format!("zone {zone} outside 1..={}", self.zones)));
        }
        Ok((zone as f64 - 0.5) * self.bin_width())
    }
}

/// Maps an azimuth to its 1-based zone; never returns the no-prior label.
pub fn azimuth_to_zone(azimuth_deg: f64, scheme: &ZoneScheme) -> Result<usize> {
    let in_range = if scheme.is_full_circle() {
        (0.0..360.0).contains(&azimuth_deg)
    } else {
        (0.0..=scheme.fov_deg).contains(&azimuth_deg)
    };
    if !in_range {
        return Err(Error::invalid(format!(
            "azimuth {azimuth_deg} outside the {} degree field of view",
            scheme.fov_deg
        )));
    }
    let idx = (azimuth_deg / scheme.bin_width()).floor() as usize;
    Ok(idx.min(scheme.zones - 1) + 1)
}

/// Image-source method knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsmOptions {
    /// Taps of the Hann-windowed sinc used for fractional delays.
    pub sinc_taps: usize,
    /// Images arriving later than this (seconds after time zero) are placed
    /// with a short `tail_taps` windowed sinc instead of the full one.
    pub sinc_horizon_s: f64,
    pub tail_taps: usize,
    /// Apply the Allen-Berkley 100 Hz high-pass. Without it the all-positive
    /// image sum builds up a DC component that decays slower than the room.
    pub highpass: bool,
}

impl Default for IsmOptions {
    fn default() -> Self {
        Self {
            sinc_taps: 81,
            sinc_horizon_s: 0.1,
            tail_taps: 9,
            highpass: true,
        }
    }
}

/// Number of samples a RIR must cover: `1.2 * rt60 * fs`.
pub fn rir_length(room: &RoomSpec, fs: u32) -> usize {
    (1.2 * room.rt60 * fs as f64).ceil() as usize
}

/// Adds a band-limited impulse of amplitude `amp` at fractional delay
/// `delay` (samples) using a Hann-windowed sinc of `taps` taps.
pub fn add_windowed_sinc(out: &mut [f64], delay: f64, amp: f64, taps: usize) {
    let half = (taps / 2) as i64;
    let width = half as f64 + 1.0;
    let base = delay.floor() as i64;
    let frac = delay - base as f64;
    let s = (PI * frac).sin();
    for k in -half..=half {
        let n = base + k;
        if n < 0 || n as usize >= out.len() {
            continue;
        }
        let t = k as f64 - frac;
        let sinc = if t.abs() < 1e-12 {
            1.0
        } else {
            // sin(pi (k - frac)) = (-1)^(k+1) sin(pi frac)
            let sign = if k.rem_euclid(2) == 0 { -1.0 } else { 1.0 };
            sign * s / (PI * t)
        };
        let w = 0.5 * (1.0 + (PI * t / width).cos());
        out[n as usize] += amp * sinc * w;
    }
}

/// Short windowed-sinc kernels tabulated at 1/256-sample fractional delays.
struct TailKernels {
    taps: usize,
    table: Vec<f64>,
}

impl TailKernels {
    const STEPS: usize = 256;

    fn new(taps: usize) -> Self {
        let taps = taps.max(1) | 1;
        let half = taps / 2;
        let mut table = vec![0.0; (Self::STEPS + 1) * taps];
        for q in 0..=Self::STEPS {
            let row = &mut table[q * taps..(q + 1) * taps];
            add_windowed_sinc(row, half as f64 + q as f64 / Self::STEPS as f64, 1.0, taps);
        }
        Self { taps, table }
    }

    fn add(&self, out: &mut [f64], delay: f64, amp: f64) {
        let half = self.taps / 2;
        let base = delay.floor();
        let q = ((delay - base) * Self::STEPS as f64).round() as usize;
        let start = base as i64 - half as i64;
        let row = &self.table[q * self.taps..(q + 1) * self.taps];
        for (k, &c) in row.iter().enumerate() {
            let n = start + k as i64;
            if n >= 0 && (n as usize) < out.len() {
                out[n as usize] += amp * c;
            }
        }
    }
}

/// Image-source impulse response from `source` to `mic` (room coordinates).
pub fn simulate_rir(room: &RoomSpec, source: &Point, mic: &Point, fs: u32) -> Result<Vec<f64>> {
    simulate_rir_with(room, source, mic, fs, &IsmOptions::default())
}

pub fn simulate_rir_with(room: &RoomSpec, source: &Point, mic: &Point, fs: u32, opts: &IsmOptions) -> Result<Vec<f64>> {
    if !room.contains(source, 0.0) || !room.contains(mic, 0.0) {
        return Err(Error::Simulation("source or microphone outside the room".into()));
    }
    let direct = dist(source, mic);
    if direct < 1e-6 {
        return Err(Error::Simulation("source and microphone coincide".into()));
    }
    let fs_f = fs as f64;
    let samples_per_metre = fs_f / SPEED_OF_SOUND;
    let len = rir_length(room, fs).max((direct * samples_per_metre).ceil() as usize + opts.sinc_taps);
    let mut h = vec![0.0; len];
    let max_dist = len as f64 / samples_per_metre;
    let horizon = opts.sinc_horizon_s * fs_f;
    let beta = room.reflection();

    let bound = |l: f64| (SPEED_OF_SOUND * 1.2 * room.rt60 / (2.0 * l)).ceil() as i64 + 1;
    let bounds = [bound(room.dims[0]), bound(room.dims[1]), bound(room.dims[2])];

    // Per-axis squared offsets and reflection counts for every (parity, n).
    let axis_terms = |axis: usize| -> Vec<(f64, i32)> {
        let l = room.dims[axis];
        let n_max = bounds[axis];
        let mut v = Vec::with_capacity(2 * (2 * n_max as usize + 1));
        for parity in 0..2i64 {
            for n in -n_max..=n_max {
                let img = (1 - 2 * parity) as f64 * source[axis] + 2.0 * n as f64 * l;
                let d = img - mic[axis];
                let refl = ((n - parity).abs() + n.abs()) as i32;
                v.push((d * d, refl));
            }
        }
        v
    };
    let xs = axis_terms(0);
    let ys = axis_terms(1);
    let zs = axis_terms(2);
    let max_d2 = max_dist * max_dist;
    let max_refl = 2 * (bounds[0] + bounds[1] + bounds[2]) as usize + 3;
    let gains: Vec<f64> = (0..=max_refl).map(|k| beta.powi(k as i32)).collect();
    let tail = TailKernels::new(opts.tail_taps);

    for &(dx2, rx) in &xs {
        if dx2 > max_d2 {
            continue;
        }
        for &(dy2, ry) in &ys {
            let dxy2 = dx2 + dy2;
            if dxy2 > max_d2 {
                continue;
            }
            for &(dz2, rz) in &zs {
                let d2 = dxy2 + dz2;
                if d2 > max_d2 {
                    continue;
                }
                let gain = gains[(rx + ry + rz) as usize];
                if gain == 0.0 {
                    continue;
                }
                let d = d2.sqrt();
                let amp = gain / (4.0 * PI * d);
                let delay = d * samples_per_metre;
                if delay <= horizon {
                    add_windowed_sinc(&mut h, delay, amp, opts.sinc_taps);
                } else {
                    tail.add(&mut h, delay, amp);
                }
            }
        }
    }
    if opts.highpass {
        allen_berkley_highpass(&mut h, fs);
    }
    Ok(h)
}

/// In-place 100 Hz high-pass from Allen and Berkley's image-method code.
pub fn allen_berkley_highpass(h: &mut [f64], fs: u32) {
    let w = 2.0 * PI * 100.0 / fs as f64;
    let r1 = (-w).exp();
    let b1 = 2.0 * r1 * w.cos();
    let b2 = -r1 * r1;
    let a1 = -(1.0 + r1);
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in h.iter_mut() {
        let y0 = b1 * y1 + b2 * y2 + *v;
        *v = y0 + a1 * y1 + r1 * y2;
        y2 = y1;
        y1 = y0;
    }
}

/// Multi-channel impulse responses, one per microphone, equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

pub fn simulate_array_rir(room: &RoomSpec, source: &Point, mics: &[Point], fs: u32) -> Result<Rir> {
    let mut channels = mics
        .iter()
        .map(|m| simulate_rir(room, source, m, fs))
        .collect::<Result<Vec<_>>>()?;
    let len = channels.iter().map(|c| c.len()).max().unwrap_or(0);
    for c in &mut channels {
        c.resize(len, 0.0);
    }
    Ok(Rir {
        channels,
        sample_rate: fs,
    })
}

/// Decay time from Schroeder backward integration, fitting the
/// -5 dB .. -25 dB span and extrapolating to 60 dB.
pub fn schroeder_t60(h: &[f64], fs: u32) -> Option<f64> {
    let mut edc = vec![0.0; h.len()];
    let mut acc = 0.0;
    for i in (0..h.len()).rev() {
        acc += h[i] * h[i];
        edc[i] = acc;
    }
    let total = edc.first().copied()?;
    if total <= 0.0 {
        return None;
    }
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / total).log10()).collect();
    let start = db.iter().position(|&v| v <= -5.0)?;
    let end = db.iter().position(|&v| v <= -25.0)?;
    if end <= start + 1 {
        return None;
    }
    let n = (end - start + 1) as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (i, &v) in db.iter().enumerate().take(end + 1).skip(start) {
        let t = i as f64 / fs as f64;
        sx += t;
        sy += v;
        sxx += t * t;
        sxy += t * v;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    if slope >= 0.0 {
        return None;
    }
    Some(-60.0 / slope)
}

/// A sampled acoustic scene: room, array pose, target and noise sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room: RoomSpec,
    pub array_center: Point,
    /// Rotation of the array frame about the vertical axis, degrees.
    pub array_orientation_deg: f64,
    pub target: Point,
    pub noise: Point,
    /// Target azimuth in the array frame, degrees.
    pub azimuth_deg: f64,
    pub noise_azimuth_deg: f64,
    pub zone: usize,
    pub distance: f64,
    pub scheme: ZoneScheme,
}

impl SceneSpec {
    /// Microphone positions in room coordinates.
    pub fn mic_positions(&self, geometry: &ArrayGeometry) -> Vec<Point> {
        let (s, c) = self.array_orientation_deg.to_radians().sin_cos();
        geometry
            .mics
            .iter()
            .map(|p| {
                [
                    self.array_center[0] + c * p[0] - s * p[1],
                    self.array_center[1] + s * p[0] + c * p[1],
                    self.array_center[2] + p[2],
                ]
            })
            .collect()
    }

    /// Azimuth of `point` in the array frame, normalized to the scheme's
    /// range.
    pub fn azimuth_of(&self, point: &Point) -> f64 {
        let dx = point[0] - self.array_center[0];
        let dy = point[1] - self.array_center[1];
        let (s, c) = self.array_orientation_deg.to_radians().sin_cos();
        let ax = c * dx + s * dy;
        let ay = -s * dx + c * dy;
        let mut az = ay.atan2(ax).to_degrees();
        if az < 0.0 {
            az += 360.0;
        }
        // snap round-off at the 0/360 seam
        if az >= 360.0 - 1e-9 {
            az = 0.0;
        }
        if !self.scheme.is_full_circle() && az > self.scheme.fov_deg && az < self.scheme.fov_deg + 1e-9 {
            az = self.scheme.fov_deg;
        }
        az
    }
}

fn place_source<R: Rng + ?Sized>(
    rng: &mut R,
    room: &RoomSpec,
    center: &Point,
    orientation_deg: f64,
    scheme: &ZoneScheme,
) -> Option<(Point, f64, f64)> {
    let az = if scheme.is_full_circle() {
        rng.random_range(0.0..scheme.fov_deg)
    } else {
        rng.random_range(0.0..=scheme.fov_deg)
    };
    let d = rng.random_range(0.5..=5.0);
    let height = rng.random_range(1.0..=1.8f64).min(room.dims[2] - WALL_MARGIN);
    let dz = height - center[2];
    if d <= dz.abs() {
        return None;
    }
    let r = (d * d - dz * dz).sqrt();
    let world = (orientation_deg + az).to_radians();
    let p = [center[0] + r * world.cos(), center[1] + r * world.sin(), height];
    room.contains(&p, WALL_MARGIN).then_some((p, az, d))
}

/// Samples array pose, target and noise positions inside `room`.
pub fn place_scene<R: Rng + ?Sized>(
    rng: &mut R,
    room: &RoomSpec,
    geometry: &ArrayGeometry,
    scheme: &ZoneScheme,
) -> Result<SceneSpec> {
    let margin = WALL_MARGIN + geometry.radius();
    if room.dims[0] <= 2.0 * margin || room.dims[1] <= 2.0 * margin || room.dims[2] < 1.0 + margin {
        return Err(Error::Simulation("room too small for the array margins".into()));
    }
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let center = [
            rng.random_range(margin..=room.dims[0] - margin),
            rng.random_range(margin..=room.dims[1] - margin),
            rng.random_range(1.0..=1.5f64.min(room.dims[2] - margin)),
        ];
        let orientation = rng.random_range(0.0..360.0);
        let Some((target, az, distance)) = place_source(rng, room, &center, orientation, scheme) else {
            continue;
        };
        let noise = (0..MAX_PLACEMENT_ATTEMPTS).find_map(|_| place_source(rng, room, &center, orientation, scheme));
        let Some((noise, noise_az, _)) = noise else {
            continue;
        };
        let mut scene = SceneSpec {
            room: *room,
            array_center: center,
            array_orientation_deg: orientation,
            target,
            noise,
            azimuth_deg: az,
            noise_azimuth_deg: noise_az,
            zone: 0,
            distance,
            scheme: *scheme,
        };
        // store the azimuth as realized by the stored positions
        scene.azimuth_deg = scene.azimuth_of(&target);
        scene.noise_azimuth_deg = scene.azimuth_of(&noise);
        scene.zone = azimuth_to_zone(scene.azimuth_deg, scheme)?;
        return Ok(scene);
    }
    Err(Error::Simulation(format!(
        "could not place sources in a {:?} room after {MAX_PLACEMENT_ATTEMPTS} attempts",
        room.dims
    )))
}

/// Output of [`render_scene`]. All signals share the clean clip's length.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub mixture: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
    pub snr_db: Option<f64>,
    /// Gain applied after mixing to avoid clipping (1 when untouched).
    pub normalization: f64,
}

fn spatialize(signal: &[f64], rir: &Rir) -> Result<Vec<Vec<f64>>> {
    rir.channels
        .iter()
        .map(|h| {
            let mut y = dsp::convolve(signal, h)?;
            y.truncate(signal.len());
            Ok(y)
        })
        .collect()
}

/// Spatializes `clean` from the scene's target position and `noise` from the
/// noise position, mixing at `snr_db` measured on channel 0 after
/// spatialization. `f64::INFINITY` or `noise = None` renders target only.
pub fn render_scene(
    clean: &[f64],
    noise: Option<&[f64]>,
    scene: &SceneSpec,
    geometry: &ArrayGeometry,
    snr_db: f64,
    fs: u32,
) -> Result<RenderedScene> {
    let mics = scene.mic_positions(geometry);
    let target_rir = simulate_array_rir(&scene.room, &scene.target, &mics, fs)?;
    let target = spatialize(clean, &target_rir)?;
    let (mut mixture, mut noise_sp, snr) = match noise {
        Some(n) if snr_db.is_finite() => {
            let noise_rir = simulate_array_rir(&scene.room, &scene.noise, &mics, fs)?;
            let fitted = dsp::fit_length(n, clean.len());
            let noise_sp = spatialize(&fitted, &noise_rir)?;
            let mix = dsp::mix_at_snr(&target, &noise_sp, snr_db, 0)?;
            (mix.channels, mix.scaled_noise, Some(snr_db))
        }
        _ => (target.clone(), vec![vec![0.0; clean.len()]; mics.len()], None),
    };
    let peak = mixture.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut target = target;
    let mut normalization = 1.0;
    if peak > 1.0 {
        normalization = 0.9 / peak;
        for sig in [&mut mixture, &mut target, &mut noise_sp] {
            sig.iter_mut().flatten().for_each(|v| *v *= normalization);
        }
    }
    Ok(RenderedScene {
        mixture,
        target,
        noise: noise_sp,
        snr_db: snr,
        normalization,
    })
}

/// A mono noise recording with its category name.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseClip {
    pub category: String,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct NoisePool {
    pub clips: Vec<NoiseClip>,
}

impl NoisePool {
    pub fn categories(&self) -> Vec<String> {
        let mut c: Vec<String> = self.clips.iter().map(|c| c.category.clone()).collect();
        c.sort();
        c.dedup();
        c
    }

    /// Loads `<root>/<category>/*.wav`, keeping channel 0 of each file.
    pub fn load_dir(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let mut cats: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|d| d.ok().map(|d| d.path()))
            .filter(|p| p.is_dir())
            .collect();
        cats.sort();
        let mut clips = Vec::new();
        for dir in cats {
            let category = dir.file_name().unwrap().to_string_lossy().into_owned();
            let mut files: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|d| d.ok().map(|d| d.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
                .collect();
            files.sort();
            for f in files {
                let clip = audio::read_wav(&f)?;
                clips.push(NoiseClip {
                    category: category.clone(),
                    samples: clip.channel_f64(0),
                });
            }
        }
        if clips.is_empty() {
            return Err(Error::Dataset(format!("no noise WAVs under {}", root.display())));
        }
        Ok(Self { clips })
    }

    pub fn save_dir(&self, root: impl AsRef<Path>, fs_hz: u32) -> Result<()> {
        let root = root.as_ref();
        for (i, clip) in self.clips.iter().enumerate() {
            let dir = root.join(&clip.category);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let audio = AudioClip::from_f64(std::slice::from_ref(&clip.samples), fs_hz)?;
            audio::write_wav(dir.join(format!("{i:04}.wav")), &audio, WavEncoding::Float32)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    /// SNR drawn uniformly from the configured range per utterance.
    Train,
    /// One fixed SNR for every utterance.
    Test,
}

/// Dataset rendering configuration (JSON file format of `render`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub mode: RenderMode,
    /// Fixed SNR for test mode; `null` renders without noise.
    pub snr_db: Option<f64>,
    pub snr_range: [f64; 2],
    pub channels: usize,
    pub zones: Option<usize>,
    pub seed: u64,
    pub sample_rate: u32,
    pub noise_train_categories: Vec<String>,
    pub noise_test_categories: Vec<String>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            mode: RenderMode::Train,
            snr_db: None,
            snr_range: [0.0, 10.0],
            channels: 2,
            zones: None,
            seed: 0,
            sample_rate: 16_000,
            noise_train_categories: Vec::new(),
            noise_test_categories: Vec::new(),
        }
    }
}

impl RenderConfig {
    pub fn scheme(&self) -> Result<ZoneScheme> {
        ZoneScheme::for_channels(self.channels, self.zones)
    }

    /// Categories usable in this mode. With no explicit lists, the first
    /// twelve sorted categories are for training and the rest for testing.
    pub fn categories_for_mode(&self, pool: &NoisePool) -> Result<Vec<String>> {
        let all = pool.categories();
        let (train, test) = if self.noise_train_categories.is_empty() && self.noise_test_categories.is_empty() {
            let k = 12.min(all.len().saturating_sub(1)).max(1);
            (all[..k.min(all.len())].to_vec(), all[k.min(all.len())..].to_vec())
        } else {
            (self.noise_train_categories.clone(), self.noise_test_categories.clone())
        };
        if let Some(c) = train.iter().find(|c| test.contains(c)) {
            return Err(Error::invalid(format!(
                "noise category {c:?} is in both train and test sets"
            )));
        }
        let wanted = match self.mode {
            RenderMode::Train => train,
            RenderMode::Test => test,
        };
        if let Some(c) = wanted.iter().find(|c| !all.contains(c)) {
            return Err(Error::Dataset(format!("noise category {c:?} missing from pool")));
        }
        Ok(wanted)
    }
}

/// Records rendered successfully plus per-file failures.
#[derive(Debug, Clone, Default)]
pub struct BuildReport {
    pub records: Vec<RenderRecord>,
    pub failures: Vec<(String, String)>,
}

fn snr_for<R: Rng + ?Sized>(config: &RenderConfig, rng: &mut R) -> f64 {
    match config.mode {
        RenderMode::Train => rng.random_range(config.snr_range[0]..=config.snr_range[1]),
        RenderMode::Test => config.snr_db.unwrap_or(f64::INFINITY),
    }
}

/// Renders every entry into `out_dir/wav/` as float32 multi-channel WAV and
/// writes `out_dir/manifest.jsonl`. Each entry draws from its own RNG stream
/// `(seed, index)`, so output does not depend on scheduling.
pub fn build_dataset(
    entries: &[ManifestEntry],
    noise_pool: &NoisePool,
    config: &RenderConfig,
    out_dir: impl AsRef<Path>,
) -> Result<BuildReport> {
    let out_dir = out_dir.as_ref();
    let scheme = config.scheme()?;
    let geometry = ArrayGeometry::preset(config.channels)?;
    let categories = config.categories_for_mode(noise_pool)?;
    let noise_idx: Vec<usize> = noise_pool
        .clips
        .iter()
        .enumerate()
        .filter(|(_, c)| categories.contains(&c.category))
        .map(|(i, _)| i)
        .collect();
    let needs_noise = config.mode == RenderMode::Train || config.snr_db.is_some();
    if needs_noise && noise_idx.is_empty() {
        return Err(Error::Dataset("noise pool is empty for this mode".into()));
    }
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let stft = StftConfig::default();

    let results: Vec<std::result::Result<RenderRecord, (String, String)>> = entries
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            let render = || -> Result<RenderRecord> {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(i as u64);
                let clean = audio::read_wav(&entry.path)?;
                if clean.sample_rate() != config.sample_rate {
                    return Err(Error::Dataset(format!(
                        "{} has rate {} Hz, expected {}",
                        entry.path,
                        clean.sample_rate(),
                        config.sample_rate
                    )));
                }
                let clean = clean.channel_f64(0);
                let room = sample_room(&mut rng);
                let scene = place_scene(&mut rng, &room, &geometry, &scheme)?;
                let snr = snr_for(config, &mut rng);
                let mut category = None;
                let noise = if snr.is_finite() {
                    let clip = &noise_pool.clips[noise_idx[rng.random_range(0..noise_idx.len())]];
                    category = Some(clip.category.clone());
                    let offset = rng.random_range(0..clip.samples.len());
                    let mut n = clip.samples[offset..].to_vec();
                    n.extend_from_slice(&clip.samples[..offset]);
                    Some(n)
                } else {
                    None
                };
                let rendered = render_scene(&clean, noise.as_deref(), &scene, &geometry, snr, config.sample_rate)?;
                let path = wav_dir.join(format!("{i:06}_{}.wav", entry.word));
                let clip = AudioClip::from_f64(&rendered.mixture, config.sample_rate)?;
                audio::write_wav(&path, &clip, WavEncoding::Float32)?;
                Ok(RenderRecord {
                    mixture_path: path.to_string_lossy().into_owned(),
                    source_path: entry.path.clone(),
                    word: entry.word.clone(),
                    class_index: entry.class_index,
                    split: entry.split,
                    zone: scene.zone,
                    azimuth_deg: scene.azimuth_deg,
                    snr_db: rendered.snr_db,
                    noise_category: category,
                    channels: config.channels,
                    valid_frames: stft.num_frames(clean.len()),
                    scene,
                })
            };
            render().map_err(|e| (entry.path.clone(), e.to_string()))
        })
        .collect();

    let mut report = BuildReport::default();
    for r in results {
        match r {
            Ok(rec) => report.records.push(rec),
            Err((path, msg)) => {
                log::error!("render failed for {path}: {msg}");
                report.failures.push((path, msg));
            }
        }
    }
    audio::save_records(&report.records, out_dir.join("manifest.jsonl"))?;
    Ok(report)
}

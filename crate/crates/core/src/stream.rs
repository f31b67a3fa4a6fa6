//! Frame-synchronous streaming inference.
//!
//! Every causal layer keeps exactly the left context it needs: the two
//! strided encoder stages hold their last `kt - 1` input rows and each MDTC
//! block holds `(k - 1) * dilation` past inputs. Output frames therefore
//! appear as soon as the audio that completes them arrives, and their
//! values agree with the offline forward pass up to float rounding.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dsp::{FbankConfig, FrameAnalyzer, MelFilterbank, StftConfig};
use crate::error::{Error, Result};
use crate::net::{compress, BlockIds, FrontIds, Model};
use crate::tensor::{gemm, Graph, ParamId, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmootherConfig {
    /// Trailing moving-average length in output frames.
    pub window: usize,
    /// Per-keyword thresholds; keywords without an entry use `default_threshold`.
    pub thresholds: Vec<f64>,
    pub default_threshold: f64,
    /// A keyword fires again only after its smoothed posterior has dropped
    /// below this level. Must lie below every threshold.
    pub rearm_level: f64,
    pub refractory_s: f64,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self {
            window: 10,
            thresholds: Vec::new(),
            default_threshold: 0.5,
            rearm_level: 0.2,
            refractory_s: 1.0,
        }
    }
}

impl SmootherConfig {
    pub fn threshold(&self, keyword: usize) -> f64 {
        self.thresholds.get(keyword).copied().unwrap_or(self.default_threshold)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::invalid("smoothing window must be at least 1"));
        }
        let bad = |t: f64| !(t > 0.0 && t < 1.0);
        if self.thresholds.iter().any(|&t| bad(t)) || bad(self.default_threshold) {
            return Err(Error::invalid("thresholds must lie in (0, 1)"));
        }
        let lowest = self.thresholds.iter().copied().fold(self.default_threshold, f64::min);
        if !(self.rearm_level >= 0.0 && self.rearm_level < lowest) {
            return Err(Error::invalid(
                "re-arm level must be non-negative and below every threshold",
            ));
        }
        if !(self.refractory_s >= 0.0) {
            return Err(Error::invalid("refractory period must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerEvent {
    pub keyword: usize,
    pub frame: usize,
    pub posterior: f64,
    pub time_s: f64,
}

/// Trailing moving average over `min(w, frames so far)` rows.
pub fn smooth_posteriors(raw: &[Vec<f64>], w: usize) -> Vec<Vec<f64>> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(raw.len());
    for t in 0..raw.len() {
        let lo = (t + 1).saturating_sub(w);
        let n = (t + 1 - lo) as f64;
        let dim = raw[t].len();
        let mut row = vec![0.0; dim];
        for r in &raw[lo..=t] {
            for (o, v) in row.iter_mut().zip(r) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|v| *v /= n);
        out.push(row);
    }
    out
}

/// Trigger state for one keyword. A detector fires when the value reaches
/// the threshold while armed and outside the refractory window; firing
/// disarms it until the value falls below the re-arm level. Keeping the
/// re-arm level fixed (rather than equal to the threshold) is what makes a
/// higher threshold never produce more events.
#[derive(Debug, Clone)]
struct Detector {
    armed: bool,
    last: Option<usize>,
}

impl Default for Detector {
    fn default() -> Self {
        Self {
            armed: true,
            last: None,
        }
    }
}

impl Detector {
    fn step(&mut self, frame: usize, value: f64, threshold: f64, rearm: f64, refractory_frames: f64) -> bool {
        if value < rearm {
            self.armed = true;
        }
        let clear = self.last.is_none_or(|l| (frame - l) as f64 >= refractory_frames);
        if self.armed && clear && value >= threshold {
            self.armed = false;
            self.last = Some(frame);
            true
        } else {
            false
        }
    }
}

/// Runs the trigger rule of [`StreamState`] over a whole trace. Event
/// times are `frame * frame_period_s`.
pub fn detect_triggers(
    smoothed: &[Vec<f64>],
    thresholds: &[f64],
    rearm_level: f64,
    refractory_s: f64,
    frame_period_s: f64,
) -> Vec<TriggerEvent> {
    let mut det = vec![Detector::default(); thresholds.len()];
    let refr = refractory_s / frame_period_s - 1e-9;
    let mut events = Vec::new();
    for (t, row) in smoothed.iter().enumerate() {
        for (j, d) in det.iter_mut().enumerate() {
            if d.step(t, row[j], thresholds[j], rearm_level, refr) {
                events.push(TriggerEvent {
                    keyword: j,
                    frame: t,
                    posterior: row[j],
                    time_s: t as f64 * frame_period_s,
                });
            }
        }
    }
    events
}

/// Posteriors of one output frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamFrame {
    pub frame: usize,
    /// Stream time (s) at which the frame became available.
    pub time_s: f64,
    pub classes: Vec<f64>,
    pub keywords: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub triggers: Vec<TriggerEvent>,
}

/// Ring of the last `len` feature vectors, oldest first; starts as zeros.
#[derive(Debug, Clone)]
struct History<T> {
    rows: VecDeque<Vec<T>>,
}

impl<T: Scalar> History<T> {
    fn new(len: usize, width: usize) -> Self {
        Self {
            rows: (0..len).map(|_| vec![T::zero(); width]).collect(),
        }
    }

    fn len(&self) -> usize {
        self.rows.len()
    }

    /// Row `lag` steps back (1 = the previous row).
    fn back(&self, lag: usize) -> &[T] {
        &self.rows[self.rows.len() - lag]
    }

    fn push(&mut self, row: Vec<T>) {
        if self.rows.is_empty() {
            return;
        }
        self.rows.pop_front();
        self.rows.push_back(row);
    }
}

/// Strided causal conv stage over rows of `[C, W]`.
#[derive(Debug, Clone)]
struct ConvStage<T> {
    prev: History<T>,
    count: usize,
}

#[derive(Debug, Clone)]
enum Front<T> {
    Spatial {
        stage1: ConvStage<T>,
        stage2: ConvStage<T>,
        embedding: Vec<T>,
        scales: Vec<f64>,
    },
    Fbank {
        bank: MelFilterbank,
    },
}

/// Per-stream state. The model is shared read-only.
#[derive(Debug, Clone)]
pub struct StreamState<T: Scalar> {
    model: Arc<Model<T>>,
    zone: usize,
    smoother: SmootherConfig,
    analyzer: FrameAnalyzer,
    stft: StftConfig,
    /// Samples not yet consumed by a full frame, per channel.
    pending: Vec<Vec<f64>>,
    samples_seen: usize,
    input_frames: usize,
    front: Front<T>,
    blocks: Vec<Vec<History<T>>>,
    out_frames: usize,
    smooth_ring: VecDeque<Vec<f64>>,
    detectors: Vec<Detector>,
}

fn data<T: Scalar>(model: &Model<T>, id: ParamId) -> &[T] {
    model.params.get(id).data()
}

impl<T: Scalar> StreamState<T> {
    /// Fresh state with zero caches; the direction embedding is computed once.
    pub fn new(model: Arc<Model<T>>, zone: usize, smoother: SmootherConfig) -> Result<Self> {
        smoother.validate()?;
        let cfg = &model.config;
        let stft = StftConfig::default();
        let front = match &model.ids.front {
            FrontIds::Spatial { .. } => {
                let mut g = Graph::new();
                let e = model.embed_direction(&mut g, &[zone])?;
                let enc = &cfg.encoder;
                let kt = enc.kernel.0;
                let c1 = 2 * enc.complex_channels;
                let f1 = (enc.freq_bins + 2 * (enc.kernel.1 / 2) - enc.kernel.1) / enc.strides[0].1 + 1;
                Front::Spatial {
                    stage1: ConvStage {
                        prev: History::new(kt - 1, 2 * enc.in_channels * enc.freq_bins),
                        count: 0,
                    },
                    stage2: ConvStage {
                        prev: History::new(kt - 1, c1 * f1),
                        count: 0,
                    },
                    embedding: g.value(e).data().to_vec(),
                    scales: cfg.input_scales(),
                }
            }
            FrontIds::Fbank { .. } => {
                let fc = FbankConfig::default();
                if fc.n_mels != cfg.fbank_dim {
                    return Err(Error::invalid("model fbank dim differs from the default filterbank"));
                }
                Front::Fbank { bank: fc.filterbank()? }
            }
        };
        let mc = &cfg.mdtc;
        let blocks = model
            .ids
            .blocks
            .iter()
            .map(|stack| {
                stack
                    .iter()
                    .map(|b| History::new((mc.kernel - 1) * b.dilation, mc.channels))
                    .collect()
            })
            .collect();
        Ok(Self {
            zone,
            analyzer: FrameAnalyzer::new(stft)?,
            stft,
            pending: vec![Vec::new(); cfg.mode.channels()],
            samples_seen: 0,
            input_frames: 0,
            front,
            blocks,
            out_frames: 0,
            smooth_ring: VecDeque::new(),
            detectors: vec![Detector::default(); cfg.num_keywords],
            smoother,
            model,
        })
    }

    pub fn zone(&self) -> usize {
        self.zone
    }

    /// Cached frames held by each backbone block, stack-major.
    pub fn cache_sizes(&self) -> Vec<usize> {
        self.blocks.iter().flatten().map(History::len).collect()
    }

    /// Output frames emitted so far.
    pub fn frames_emitted(&self) -> usize {
        self.out_frames
    }

    /// Seconds between output frames.
    pub fn frame_period_s(&self) -> f64 {
        (self.stft.hop * self.model.config.subsampling()) as f64 / 16_000.0
    }

    /// Feeds one chunk (`channels[m][n]`) and returns every output frame it
    /// completes.
    pub fn push(&mut self, chunk: &[Vec<f64>]) -> Result<Vec<StreamFrame>> {
        let m = self.pending.len();
        if chunk.len() != m {
            return Err(Error::invalid(format!(
                "chunk has {} channels, stream expects {m}",
                chunk.len()
            )));
        }
        let n = chunk[0].len();
        if chunk.iter().any(|c| c.len() != n) {
            return Err(Error::invalid("chunk channels differ in length"));
        }
        if n == 0 {
            return Err(Error::invalid("empty chunk"));
        }
        for (p, c) in self.pending.iter_mut().zip(chunk) {
            p.extend_from_slice(c);
        }
        self.samples_seen += n;
        let (win, hop) = (self.stft.window, self.stft.hop);
        let mut out = Vec::new();
        while self.pending[0].len() >= win {
            let bins = self.stft.num_bins();
            let mut spectra = vec![num_complex::Complex64::new(0.0, 0.0); m * bins];
            for (ch, p) in self.pending.iter().enumerate() {
                self.analyzer
                    .analyze(&p[..win], &mut spectra[ch * bins..(ch + 1) * bins]);
            }
            for p in &mut self.pending {
                p.drain(..hop);
            }
            // sample index that completed this frame
            let end = self.input_frames * hop + win;
            self.input_frames += 1;
            if let Some(h) = self.front_step(&spectra)? {
                out.push(self.backbone_step(h, end));
            }
        }
        Ok(out)
    }

    /// Returns the fused encoder row when the input frame completes one.
    fn front_step(&mut self, spectra: &[num_complex::Complex64]) -> Result<Option<Vec<T>>> {
        let model = Arc::clone(&self.model);
        let cfg = &model.config;
        match (&mut self.front, &model.ids.front) {
            (Front::Fbank { bank }, FrontIds::Fbank { proj_w, proj_b }) => {
                let mut mel = vec![0.0; bank.num_filters()];
                bank.log_energies(spectra, &mut mel);
                let x: Vec<T> = mel
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| T::from_f64_lossy(cfg.fbank_norm.as_ref().map_or(v, |n| n.apply(j, v))))
                    .collect();
                Ok(Some(linear_row(&x, data(&model, *proj_w), Some(data(&model, *proj_b)))))
            }
            (
                Front::Spatial {
                    stage1,
                    stage2,
                    embedding,
                    scales,
                },
                FrontIds::Spatial { encoder, .. },
            ) => {
                let enc = &cfg.encoder;
                let f = enc.freq_bins;
                let mch = enc.in_channels;
                // row layout: [re | im], each [M, F]
                let mut row = vec![T::zero(); 2 * mch * f];
                for (i, (c, s)) in spectra.iter().zip(scales.iter().cycle()).enumerate() {
                    let (r, im) = compress(c.re, c.im, cfg.magnitude_power);
                    row[i] = T::from_f64_lossy(r * s);
                    row[mch * f + i] = T::from_f64_lossy(im * s);
                }
                let (kt, kf) = enc.kernel;
                let (st1, sf1) = enc.strides[0];
                let f1 = (f + 2 * (kf / 2) - kf) / sf1 + 1;
                let cc = enc.complex_channels;
                let s1 = stage1.count;
                stage1.count += 1;
                if s1 % st1 != 0 {
                    stage1.prev.push(row);
                    return Ok(None);
                }
                let half = mch * f;
                let rows1 = window_rows(&stage1.prev, &row, kt);
                let re_rows: Vec<&[T]> = rows1.iter().map(|r| &r[..half]).collect();
                let im_rows: Vec<&[T]> = rows1.iter().map(|r| &r[half..]).collect();
                let cols_re = im2col_rows(&re_rows, mch, f, kf, sf1, f1);
                let cols_im = im2col_rows(&im_rows, mch, f, kf, sf1, f1);
                stage1.prev.push(row);
                let kk = mch * kt * kf;
                let (wr, wi) = (data(&model, encoder.c_w_re), data(&model, encoder.c_w_im));
                let mut rr = vec![T::zero(); cc * f1];
                let mut ii = vec![T::zero(); cc * f1];
                let mut ri = vec![T::zero(); cc * f1];
                let mut ir = vec![T::zero(); cc * f1];
                gemm(false, false, cc, f1, kk, wr, &cols_re, T::zero(), &mut rr);
                gemm(false, false, cc, f1, kk, wi, &cols_im, T::zero(), &mut ii);
                gemm(false, false, cc, f1, kk, wr, &cols_im, T::zero(), &mut ri);
                gemm(false, false, cc, f1, kk, wi, &cols_re, T::zero(), &mut ir);
                let (br, bi) = (data(&model, encoder.c_b_re), data(&model, encoder.c_b_im));
                let mut y1 = vec![T::zero(); 2 * cc * f1];
                for o in 0..cc {
                    for x in 0..f1 {
                        let i = o * f1 + x;
                        y1[i] = relu((rr[i] - ii[i]) + br[o]);
                        y1[cc * f1 + i] = relu((ri[i] + ir[i]) + bi[o]);
                    }
                }

                let (st2, sf2) = enc.strides[1];
                let c1 = 2 * cc;
                let f2 = (f1 + 2 * (kf / 2) - kf) / sf2 + 1;
                let s2 = stage2.count;
                stage2.count += 1;
                if s2 % st2 != 0 {
                    stage2.prev.push(y1);
                    return Ok(None);
                }
                let cols = im2col_rows(&window_rows(&stage2.prev, &y1, kt), c1, f1, kf, sf2, f2);
                stage2.prev.push(y1);
                let co = enc.conv_channels;
                let mut y2 = vec![T::zero(); co * f2];
                gemm(
                    false,
                    false,
                    co,
                    f2,
                    c1 * kt * kf,
                    data(&model, encoder.conv_w),
                    &cols,
                    T::zero(),
                    &mut y2,
                );
                let b2 = data(&model, encoder.conv_b);
                for o in 0..co {
                    for x in 0..f2 {
                        y2[o * f2 + x] = relu(y2[o * f2 + x] + b2[o]);
                    }
                }
                let h = linear_row(&y2, data(&model, encoder.proj_w), Some(data(&model, encoder.proj_b)));
                Ok(Some(h.iter().zip(embedding.iter()).map(|(a, b)| *a + *b).collect()))
            }
            _ => unreachable!("front state always matches the model"),
        }
    }

    fn block_step(&mut self, s: usize, b: usize, x: Vec<T>, ids: &BlockIds) -> Vec<T> {
        let model = Arc::clone(&self.model);
        let k = model.config.mdtc.kernel;
        let c = x.len();
        let hist = &mut self.blocks[s][b];
        let w = data(&model, ids.dw_w);
        let bias = data(&model, ids.dw_b);
        let mut dw = vec![T::zero(); c];
        for kk in 0..k {
            let shift = (k - 1 - kk) * ids.dilation;
            let src: &[T] = if shift == 0 { &x } else { hist.back(shift) };
            for ch in 0..c {
                dw[ch] += w[ch * k + kk] * src[ch];
            }
        }
        for ch in 0..c {
            dw[ch] += bias[ch];
        }
        hist.push(x.clone());
        let h = linear_row(&dw, data(&model, ids.pw1_w), Some(data(&model, ids.pw1_b)));
        let h: Vec<T> = h.into_iter().map(relu).collect();
        let h = linear_row(&h, data(&model, ids.pw2_w), Some(data(&model, ids.pw2_b)));
        h.iter().zip(&x).map(|(a, b)| *a + *b).collect()
    }

    fn backbone_step(&mut self, fused: Vec<T>, end_sample: usize) -> StreamFrame {
        let model = Arc::clone(&self.model);
        let mut h = fused;
        let mut total: Option<Vec<T>> = None;
        for (s, stack) in model.ids.blocks.iter().enumerate() {
            for (b, ids) in stack.iter().enumerate() {
                h = self.block_step(s, b, h, ids);
            }
            total = Some(match total {
                None => h.clone(),
                Some(t) => t.iter().zip(&h).map(|(a, b)| *a + *b).collect(),
            });
        }
        let feats = total.expect("at least one stack");
        let cls = linear_row(
            &feats,
            data(&model, model.ids.cls_w),
            Some(data(&model, model.ids.cls_b)),
        );
        let kw = linear_row(&feats, data(&model, model.ids.kw_w), Some(data(&model, model.ids.kw_b)));
        let classes = softmax_f64(&cls);
        let keywords: Vec<f64> = kw.iter().map(|v| sigmoid_f64(v.as_f64())).collect();

        let frame = self.out_frames;
        self.out_frames += 1;
        self.smooth_ring.push_back(keywords.clone());
        if self.smooth_ring.len() > self.smoother.window {
            self.smooth_ring.pop_front();
        }
        let n = self.smooth_ring.len() as f64;
        let mut smoothed = vec![0.0; keywords.len()];
        for r in &self.smooth_ring {
            for (o, v) in smoothed.iter_mut().zip(r) {
                *o += v;
            }
        }
        smoothed.iter_mut().for_each(|v| *v /= n);
        let time_s = end_sample as f64 / 16_000.0;
        let refr = self.smoother.refractory_s / self.frame_period_s() - 1e-9;
        let mut triggers = Vec::new();
        for (j, det) in self.detectors.iter_mut().enumerate() {
            if det.step(
                frame,
                smoothed[j],
                self.smoother.threshold(j),
                self.smoother.rearm_level,
                refr,
            ) {
                triggers.push(TriggerEvent {
                    keyword: j,
                    frame,
                    posterior: smoothed[j],
                    time_s,
                });
            }
        }
        StreamFrame {
            frame,
            time_s,
            classes,
            keywords,
            smoothed,
            triggers,
        }
    }
}

fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_f64<T: Scalar>(x: &[T]) -> Vec<f64> {
    let m = x.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v.as_f64() - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `x W + b` for `W: [in, out]`.
fn linear_row<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let n = w.len() / x.len();
    let mut y = vec![T::zero(); n];
    gemm(false, false, 1, n, x.len(), x, w, T::zero(), &mut y);
    if let Some(b) = b {
        for (o, bb) in y.iter_mut().zip(b) {
            *o += *bb;
        }
    }
    y
}

/// The `kt` rows ending at `current`, oldest first (zeros before the start).
fn window_rows<'a, T: Scalar>(prev: &'a History<T>, current: &'a [T], kt: usize) -> Vec<&'a [T]> {
    let mut rows: Vec<&[T]> = (1..kt).rev().map(|lag| prev.back(lag)).collect();
    rows.push(current);
    rows
}

/// Unfolds `kt` time rows of `[C, W]` into `[C * kt * kf, wo]` columns with
/// symmetric frequency padding, matching the offline im2col layout.
fn im2col_rows<T: Scalar>(rows: &[&[T]], c: usize, w: usize, kf: usize, stride: usize, wo: usize) -> Vec<T> {
    let kt = rows.len();
    let pad = kf / 2;
    let mut cols = vec![T::zero(); c * kt * kf * wo];
    for ch in 0..c {
        for (i, row) in rows.iter().enumerate() {
            let src = &row[ch * w..(ch + 1) * w];
            for j in 0..kf {
                let dst = &mut cols[((ch * kt + i) * kf + j) * wo..((ch * kt + i) * kf + j + 1) * wo];
                for (ox, d) in dst.iter_mut().enumerate() {
                    let ix = (ox * stride + j) as isize - pad as isize;
                    if ix >= 0 && (ix as usize) < w {
                        *d = src[ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Offline reference: per-frame posteriors of the whole recording.
pub fn offline_posteriors<T: Scalar>(
    model: &Model<T>,
    channels: &[Vec<f64>],
    zone: usize,
) -> Result<crate::net::FramePosteriors> {
    let spec = crate::data::FeatureSpec {
        model: model.config.clone(),
        prior: crate::data::Prior::Oracle,
        frontend: crate::data::Frontend::FirstChannel,
        zones: None,
    };
    let input = crate::data::featurize::<T>(channels, zone, &spec)?;
    model.posteriors(&input, zone)
}

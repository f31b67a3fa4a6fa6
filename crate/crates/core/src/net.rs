//! Keyword-spotting models: the multi-channel spatial model conditioned on a
//! direction zone, and the single-channel filterbank baseline.
//!
//! Both share the MDTC backbone (stacks of causal dilated depthwise
//! temporal-convolution blocks) and the two output heads: a C-way frame
//! classifier and one sigmoid unit per keyword.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{ComplexSpectrogram, FbankFeatures};
use crate::error::{Error, Result};
use crate::tensor::{ComplexVar, Conv2dSpec, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelMode {
    #[serde(rename = "spatial-2ch")]
    Spatial2ch,
    #[serde(rename = "spatial-3ch")]
    Spatial3ch,
    SingleChannel,
}

impl ModelMode {
    /// Microphone channels consumed by the model.
    pub fn channels(self) -> usize {
        match self {
            ModelMode::Spatial2ch => 2,
            ModelMode::Spatial3ch => 3,
            ModelMode::SingleChannel => 1,
        }
    }

    pub fn is_spatial(self) -> bool {
        self != ModelMode::SingleChannel
    }
}

/// Two-stage strided Conv2D subsampler over `[B, M, T, F]` spectrograms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialEncoderConfig {
    pub in_channels: usize,
    pub freq_bins: usize,
    /// Output channels of the complex stage (real + imaginary doubles it).
    pub complex_channels: usize,
    pub conv_channels: usize,
    pub kernel: (usize, usize),
    /// `(time, freq)` strides of the two stages.
    pub strides: [(usize, usize); 2],
    pub dim: usize,
}

impl SpatialEncoderConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            freq_bins: 129,
            complex_channels: 32,
            conv_channels: 64,
            kernel: (3, 3),
            strides: [(2, 2), (2, 2)],
            dim: 64,
        }
    }

    /// Left-only time padding and symmetric frequency padding.
    fn stage_spec(&self, stage: usize) -> Conv2dSpec {
        let (kt, kf) = self.kernel;
        Conv2dSpec::new(self.strides[stage], [kt - 1, 0, kf / 2, kf / 2])
    }

    fn stage_out(&self, stage: usize, t: usize, f: usize) -> (usize, usize) {
        let (kt, kf) = self.kernel;
        let spec = self.stage_spec(stage);
        crate::tensor::conv2d_output_size(t, f, kt, kf, &spec).unwrap_or((0, 0))
    }

    /// Frames out for `t` frames in.
    pub fn output_frames(&self, t: usize) -> usize {
        let (t1, f1) = self.stage_out(0, t, self.freq_bins);
        self.stage_out(1, t1, f1).0
    }

    /// Frequency bins after both stages.
    pub fn output_bins(&self) -> usize {
        let (t1, f1) = self.stage_out(0, 16, self.freq_bins);
        self.stage_out(1, t1, f1).1
    }

    /// Product of the time strides.
    pub fn subsampling(&self) -> usize {
        self.strides[0].0 * self.strides[1].0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdtcConfig {
    pub stacks: usize,
    pub blocks: usize,
    pub channels: usize,
    pub kernel: usize,
    /// Dilation of each block within a stack.
    pub dilations: Vec<usize>,
}

impl Default for MdtcConfig {
    fn default() -> Self {
        Self {
            stacks: 4,
            blocks: 4,
            channels: 64,
            kernel: 5,
            dilations: vec![1, 2, 4, 8],
        }
    }
}

impl MdtcConfig {
    /// Frames of context seen by one output frame.
    pub fn receptive_field(&self) -> usize {
        1 + self.stacks * self.dilations.iter().map(|d| (self.kernel - 1) * d).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: ModelMode,
    /// Number of direction zones K; the embedding table has K + 1 rows.
    pub zones: usize,
    pub dim: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub num_classes: usize,
    pub num_keywords: usize,
    pub encoder: SpatialEncoderConfig,
    pub fbank_dim: usize,
    pub mdtc: MdtcConfig,
    /// Spectrogram magnitude exponent applied before the encoder
    /// (`X |X|^(p-1)`); 1 keeps the raw STFT.
    pub magnitude_power: f64,
    /// Multiplier applied to the compressed spectrogram, fitted on
    /// training data so inputs have unit RMS.
    #[serde(default = "one")]
    pub input_scale: f64,
    /// Optional per-frequency-bin multiplier on top of `input_scale`,
    /// shared by all channels so inter-channel phase and level are kept.
    #[serde(default)]
    pub bin_scale: Option<Vec<f64>>,
    /// Per-dimension normalization of filterbank inputs, fitted on
    /// training data.
    #[serde(default)]
    pub fbank_norm: Option<FeatureNorm>,
    pub init_seed: u64,
}

fn one() -> f64 {
    1.0
}

/// Per-dimension affine feature normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    /// Fits mean and standard deviation over all rows of `frames`.
    pub fn fit<'a>(dim: usize, frames: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for row in frames {
            if row.len() != dim {
                return Err(Error::invalid(format!(
                    "feature row of {} values, expected {dim}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::invalid("cannot fit a normalization on zero frames"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, j: usize, v: f64) -> f64 {
        (v - self.mean[j]) / self.std[j]
    }
}

impl ModelConfig {
    pub fn spatial(channels: usize, zones: usize, num_classes: usize, num_keywords: usize) -> Result<Self> {
        let mode = match channels {
            2 => ModelMode::Spatial2ch,
            3 => ModelMode::Spatial3ch,
            c => return Err(Error::invalid(format!("no spatial model for {c} channels"))),
        };
        Ok(Self {
            mode,
            zones,
            dim: 64,
            mlp_hidden: 64,
            dropout: 0.1,
            num_classes,
            num_keywords,
            encoder: SpatialEncoderConfig::new(channels),
            fbank_dim: 40,
            mdtc: MdtcConfig::default(),
            magnitude_power: 0.5,
            input_scale: 1.0,
            bin_scale: None,
            fbank_norm: None,
            init_seed: 0,
        })
    }

    pub fn single_channel(num_classes: usize, num_keywords: usize) -> Self {
        Self {
            mode: ModelMode::SingleChannel,
            zones: 0,
            encoder: SpatialEncoderConfig::new(1),
            ..Self::spatial(2, 6, num_classes, num_keywords).expect("2ch preset")
        }
    }

    /// Effective multiplier of each frequency bin of the spatial input.
    pub fn input_scales(&self) -> Vec<f64> {
        match &self.bin_scale {
            Some(b) => b.iter().map(|v| v * self.input_scale).collect(),
            None => vec![self.input_scale; self.encoder.freq_bins],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("model config: {m}")));
        if self.num_classes < 2 || self.dim == 0 || self.mlp_hidden == 0 {
            return bad("need at least two classes and positive dims");
        }
        if self.mdtc.channels != self.dim {
            return bad("backbone channels must equal the model dim");
        }
        if self.mdtc.dilations.is_empty() || self.mdtc.dilations.len() != self.mdtc.blocks {
            return bad("one dilation per block");
        }
        if self.mdtc.dilations.contains(&0) || self.mdtc.kernel == 0 {
            return bad("dilations and kernel must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout outside [0, 1)");
        }
        if !(self.magnitude_power > 0.0) || !(self.input_scale > 0.0) || !self.input_scale.is_finite() {
            return bad("magnitude power and input scale must be positive");
        }
        if let Some(b) = &self.bin_scale {
            if b.len() != self.encoder.freq_bins || b.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return bad("bin scale needs one positive value per frequency bin");
            }
        }
        if let Some(n) = &self.fbank_norm {
            if n.mean.len() != self.fbank_dim || n.std.len() != self.fbank_dim {
                return bad("fbank normalization does not match the fbank dim");
            }
        }
        if self.mode.is_spatial() {
            if self.encoder.in_channels != self.mode.channels() {
                return bad("encoder input channels do not match the mode");
            }
            if self.zones == 0 {
                return bad("spatial model needs K >= 1 zones");
            }
        }
        Ok(())
    }

    /// Frames produced for `t` input STFT frames.
    pub fn output_frames(&self, t: usize) -> usize {
        if self.mode.is_spatial() {
            self.encoder.output_frames(t)
        } else {
            t
        }
    }

    /// Input frames per output frame.
    pub fn subsampling(&self) -> usize {
        if self.mode.is_spatial() {
            self.encoder.subsampling()
        } else {
            1
        }
    }
}

/// Parameter handles of one MDTC block.
#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub pw1_w: ParamId,
    pub pw1_b: ParamId,
    pub pw2_w: ParamId,
    pub pw2_b: ParamId,
    pub dilation: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderIds {
    pub c_w_re: ParamId,
    pub c_w_im: ParamId,
    pub c_b_re: ParamId,
    pub c_b_im: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct EmbeddingIds {
    pub table: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

#[derive(Debug, Clone)]
pub enum FrontIds {
    Spatial {
        encoder: EncoderIds,
        embedding: EmbeddingIds,
    },
    Fbank {
        proj_w: ParamId,
        proj_b: ParamId,
    },
}

#[derive(Debug, Clone)]
pub struct ParamIds {
    pub front: FrontIds,
    pub blocks: Vec<Vec<BlockIds>>,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
    pub kw_w: ParamId,
    pub kw_b: ParamId,
}

/// Network input for a batch.
#[derive(Debug, Clone)]
pub enum ModelInput<T> {
    /// Real and imaginary STFT parts, `[B, M, T, F]`.
    Spatial { re: Tensor<T>, im: Tensor<T> },
    /// Log-mel features, `[B, T, n_mels]`.
    Fbank(Tensor<T>),
}

impl<T: Scalar> ModelInput<T> {
    pub fn frames(&self) -> usize {
        match self {
            ModelInput::Spatial { re, .. } => re.shape()[2],
            ModelInput::Fbank(x) => x.shape()[1],
        }
    }

    pub fn batch(&self) -> usize {
        match self {
            ModelInput::Spatial { re, .. } => re.shape()[0],
            ModelInput::Fbank(x) => x.shape()[0],
        }
    }
}

/// Builds `[1, M, T, F]` real/imaginary tensors from a spectrogram,
/// applying the magnitude exponent and then `scale`.
pub fn spatial_input<T: Scalar>(spec: &ComplexSpectrogram, magnitude_power: f64, scales: &[f64]) -> ModelInput<T> {
    let (m, t, f) = (spec.channels(), spec.frames(), spec.bins());
    assert_eq!(scales.len(), f, "one scale per frequency bin");
    let mut re = Vec::with_capacity(m * t * f);
    let mut im = Vec::with_capacity(m * t * f);
    for (c, s) in spec.data().iter().zip(scales.iter().cycle()) {
        let (r, i) = compress(c.re, c.im, magnitude_power);
        re.push(T::from_f64_lossy(r * s));
        im.push(T::from_f64_lossy(i * s));
    }
    ModelInput::Spatial {
        re: Tensor::new(&[1, m, t, f], re).expect("spectrogram layout"),
        im: Tensor::new(&[1, m, t, f], im).expect("spectrogram layout"),
    }
}

/// `X |X|^(p-1)`.
pub fn compress(re: f64, im: f64, p: f64) -> (f64, f64) {
    if p == 1.0 {
        return (re, im);
    }
    let mag = (re * re + im * im).sqrt();
    if mag == 0.0 {
        return (0.0, 0.0);
    }
    let s = mag.powf(p - 1.0);
    (re * s, im * s)
}

/// Builds a `[1, T, n_mels]` input, applying `norm` when given.
pub fn fbank_input<T: Scalar>(feats: &FbankFeatures, norm: Option<&FeatureNorm>) -> ModelInput<T> {
    let n = feats.n_mels;
    let data = feats
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| T::from_f64_lossy(norm.map_or(v, |nm| nm.apply(i % n, v))))
        .collect();
    ModelInput::Fbank(Tensor::new(&[1, feats.frames, n], data).expect("fbank layout"))
}

/// Stacks single-utterance inputs of equal length into a batch.
pub fn stack_inputs<T: Scalar>(inputs: &[ModelInput<T>]) -> Result<ModelInput<T>> {
    let first = inputs.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let cat = |ts: Vec<&Tensor<T>>| -> Result<Tensor<T>> {
        let mut shape = ts[0].shape().to_vec();
        if ts.iter().any(|t| t.shape()[1..] != shape[1..]) {
            return Err(Error::Shape {
                op: "stack_inputs",
                lhs: shape.clone(),
                rhs: ts
                    .iter()
                    .find(|t| t.shape()[1..] != shape[1..])
                    .unwrap()
                    .shape()
                    .to_vec(),
            });
        }
        shape[0] = ts.iter().map(|t| t.shape()[0]).sum();
        Tensor::new(&shape, ts.iter().flat_map(|t| t.data().iter().copied()).collect())
    };
    match first {
        ModelInput::Spatial { .. } => {
            let mut res = Vec::new();
            let mut ims = Vec::new();
            for i in inputs {
                match i {
                    ModelInput::Spatial { re, im } => {
                        res.push(re);
                        ims.push(im);
                    }
                    ModelInput::Fbank(_) => return Err(Error::invalid("mixed input kinds in batch")),
                }
            }
            Ok(ModelInput::Spatial {
                re: cat(res)?,
                im: cat(ims)?,
            })
        }
        ModelInput::Fbank(_) => {
            let mut xs = Vec::new();
            for i in inputs {
                match i {
                    ModelInput::Fbank(x) => xs.push(x),
                    ModelInput::Spatial { .. } => return Err(Error::invalid("mixed input kinds in batch")),
                }
            }
            Ok(ModelInput::Fbank(cat(xs)?))
        }
    }
}

/// Graph handles produced by [`Model::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    /// Encoder (or front-end projection) output `[B, T', d]`.
    pub encoded: Var,
    /// Encoded features after adding the direction embedding.
    pub fused: Var,
    pub backbone: Var,
    pub class_logits: Var,
    pub keyword_logits: Var,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub ids: ParamIds,
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
            .collect(),
    )
    .expect("init shape")
}

/// Kaiming-uniform bound for ReLU layers.
fn he(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Glorot-uniform bound.
fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl<T: Scalar> Model<T> {
    /// Builds and randomly initializes a model (seeded by `config.init_seed`).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut p = ParamStore::new();
        let d = config.dim;
        let zeros = |n: usize| Tensor::<T>::zeros(&[n]);

        let front = if config.mode.is_spatial() {
            let e = &config.encoder;
            let (kt, kf) = e.kernel;
            let m = e.in_channels;
            let cc = e.complex_channels;
            let fan1 = 2 * m * kt * kf;
            let encoder = EncoderIds {
                c_w_re: p.add("enc.cconv.w_re", uniform(&mut rng, &[cc, m, kt, kf], he(fan1))),
                c_w_im: p.add("enc.cconv.w_im", uniform(&mut rng, &[cc, m, kt, kf], he(fan1))),
                c_b_re: p.add("enc.cconv.b_re", zeros(cc)),
                c_b_im: p.add("enc.cconv.b_im", zeros(cc)),
                conv_w: p.add(
                    "enc.conv.w",
                    uniform(&mut rng, &[e.conv_channels, 2 * cc, kt, kf], he(2 * cc * kt * kf)),
                ),
                conv_b: p.add("enc.conv.b", zeros(e.conv_channels)),
                proj_w: {
                    let fan = e.conv_channels * e.output_bins();
                    p.add("enc.proj.w", uniform(&mut rng, &[fan, d], glorot(fan, d)))
                },
                proj_b: p.add("enc.proj.b", zeros(d)),
            };
            let v = config.zones + 1;
            let h = config.mlp_hidden;
            let embedding = EmbeddingIds {
                table: p.add("emb.table", uniform(&mut rng, &[v, d], 3f64.sqrt())),
                fc1_w: p.add("emb.fc1.w", uniform(&mut rng, &[d, h], he(d))),
                fc1_b: p.add("emb.fc1.b", zeros(h)),
                fc2_w: p.add("emb.fc2.w", uniform(&mut rng, &[h, d], glorot(h, d))),
                fc2_b: p.add("emb.fc2.b", zeros(d)),
                ln_g: p.add("emb.ln.g", Tensor::full(&[d], T::one())),
                ln_b: p.add("emb.ln.b", zeros(d)),
            };
            FrontIds::Spatial { encoder, embedding }
        } else {
            let f = config.fbank_dim;
            FrontIds::Fbank {
                proj_w: p.add("front.proj.w", uniform(&mut rng, &[f, d], glorot(f, d))),
                proj_b: p.add("front.proj.b", zeros(d)),
            }
        };

        let mc = &config.mdtc;
        let c = mc.channels;
        let mut blocks = Vec::with_capacity(mc.stacks);
        for s in 0..mc.stacks {
            let mut stack = Vec::with_capacity(mc.blocks);
            for (b, &dil) in mc.dilations.iter().enumerate() {
                let name = |part: &str| format!("mdtc.s{s}.b{b}.{part}");
                stack.push(BlockIds {
                    dw_w: p.add(name("dw.w"), uniform(&mut rng, &[c, mc.kernel], he(mc.kernel))),
                    dw_b: p.add(name("dw.b"), zeros(c)),
                    pw1_w: p.add(name("pw1.w"), uniform(&mut rng, &[c, c], he(c))),
                    pw1_b: p.add(name("pw1.b"), zeros(c)),
                    // small residual branch at init keeps the 16-block sum tame
                    pw2_w: p.add(name("pw2.w"), uniform(&mut rng, &[c, c], 0.25 * glorot(c, c))),
                    pw2_b: p.add(name("pw2.b"), zeros(c)),
                    dilation: dil,
                });
            }
            blocks.push(stack);
        }

        let ids = ParamIds {
            front,
            blocks,
            // heads start near zero so initial posteriors are close to uniform
            cls_w: p.add(
                "head.cls.w",
                uniform(&mut rng, &[d, config.num_classes], 0.1 * glorot(d, config.num_classes)),
            ),
            cls_b: p.add("head.cls.b", zeros(config.num_classes)),
            kw_w: p.add(
                "head.kw.w",
                uniform(&mut rng, &[d, config.num_keywords], 0.1 * glorot(d, 1)),
            ),
            kw_b: p.add("head.kw.b", zeros(config.num_keywords)),
        };
        Ok(Self { config, params: p, ids })
    }

    /// Number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Appends one sigmoid keyword unit (d weights + 1 bias), zero-initialized.
    pub fn add_keyword_head(&mut self) {
        let d = self.config.dim;
        let n = self.config.num_keywords;
        let w = self.params.get(self.ids.kw_w).clone();
        let mut nw = Tensor::zeros(&[d, n + 1]);
        for r in 0..d {
            nw.data_mut()[r * (n + 1)..r * (n + 1) + n].copy_from_slice(&w.data()[r * n..(r + 1) * n]);
        }
        *self.params.get_mut(self.ids.kw_w) = nw;
        let mut b = self.params.get(self.ids.kw_b).data().to_vec();
        b.push(T::zero());
        *self.params.get_mut(self.ids.kw_b) = Tensor::new(&[n + 1], b).expect("bias");
        self.config.num_keywords += 1;
    }

    /// Converts parameters to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    fn encoder_ids(&self) -> Result<(&EncoderIds, &EmbeddingIds)> {
        match &self.ids.front {
            FrontIds::Spatial { encoder, embedding } => Ok((encoder, embedding)),
            FrontIds::Fbank { .. } => Err(Error::invalid("single-channel model has no spatial encoder")),
        }
    }

    /// Stage-1 complex convolution (pre-ReLU), `[B, 2 * Cc, T1, F1]`.
    pub fn encoder_stage1(&self, g: &mut Graph<T>, re: Tensor<T>, im: Tensor<T>) -> Result<Var> {
        let (enc, _) = self.encoder_ids()?;
        let cfg = &self.config.encoder;
        if re.shape().len() != 4 || re.shape()[1] != cfg.in_channels || re.shape()[3] != cfg.freq_bins {
            return Err(Error::Shape {
                op: "spatial_encoder",
                lhs: re.shape().to_vec(),
                rhs: vec![0, cfg.in_channels, 0, cfg.freq_bins],
            });
        }
        if re.shape()[2] == 0 {
            return Err(Error::invalid("spatial encoder needs at least one frame"));
        }
        let x = ComplexVar {
            re: g.input(re),
            im: g.input(im),
        };
        let (wr, wi) = (g.param(&self.params, enc.c_w_re), g.param(&self.params, enc.c_w_im));
        let (br, bi) = (g.param(&self.params, enc.c_b_re), g.param(&self.params, enc.c_b_im));
        let y = g.complex_conv2d(x, wr, wi, Some((br, bi)), cfg.stage_spec(0))?;
        g.concat(&[y.re, y.im], 1)
    }

    /// Spatial encoder: `[B, M, T, F]` complex input to `H: [B, T', d]`.
    pub fn encode(&self, g: &mut Graph<T>, re: Tensor<T>, im: Tensor<T>) -> Result<Var> {
        let (enc, _) = self.encoder_ids()?;
        let cfg = &self.config.encoder;
        let s1 = self.encoder_stage1(g, re, im)?;
        let s1 = g.relu(s1);
        let w = g.param(&self.params, enc.conv_w);
        let b = g.param(&self.params, enc.conv_b);
        let s2 = g.conv2d(s1, w, Some(b), cfg.stage_spec(1))?;
        let s2 = g.relu(s2);
        let [bn, c, t2, f2]: [usize; 4] = g.shape(s2).try_into().expect("rank 4");
        let s2 = g.permute(s2, &[0, 2, 1, 3])?;
        let flat = g.reshape(s2, &[bn, t2, c * f2])?;
        let w = g.param(&self.params, enc.proj_w);
        let b = g.param(&self.params, enc.proj_b);
        g.linear(flat, w, Some(b))
    }

    /// Direction embedding `e: [B, d]` for one zone label per batch item.
    pub fn embed_direction(&self, g: &mut Graph<T>, zones: &[usize]) -> Result<Var> {
        let (_, emb) = self.encoder_ids()?;
        if let Some(&z) = zones.iter().find(|&&z| z > self.config.zones) {
            return Err(Error::invalid(format!(
                "zone label {z} outside 0..={}",
                self.config.zones
            )));
        }
        let table = g.param(&self.params, emb.table);
        let e = g.embedding(table, zones)?;
        let (w1, b1) = (g.param(&self.params, emb.fc1_w), g.param(&self.params, emb.fc1_b));
        let h = g.linear(e, w1, Some(b1))?;
        let h = g.relu(h);
        let (w2, b2) = (g.param(&self.params, emb.fc2_w), g.param(&self.params, emb.fc2_b));
        let h = g.linear(h, w2, Some(b2))?;
        let h = g.dropout(h, self.config.dropout)?;
        let (lg, lb) = (g.param(&self.params, emb.ln_g), g.param(&self.params, emb.ln_b));
        g.layer_norm(h, lg, lb, LN_EPS)
    }

    /// `H + e` broadcast over time.
    pub fn fuse(&self, g: &mut Graph<T>, h: Var, e: Var) -> Result<Var> {
        g.add_broadcast_time(h, e)
    }

    /// One causal depthwise temporal-convolution block with residual.
    pub fn block_forward(&self, g: &mut Graph<T>, x: Var, ids: &BlockIds) -> Result<Var> {
        let p = &self.params;
        let (w, b) = (g.param(p, ids.dw_w), g.param(p, ids.dw_b));
        let h = g.conv1d_depthwise(x, w, ids.dilation)?;
        let h = g.add_bias(h, b, 2)?;
        let (w, b) = (g.param(p, ids.pw1_w), g.param(p, ids.pw1_b));
        let h = g.linear(h, w, Some(b))?;
        let h = g.relu(h);
        let (w, b) = (g.param(p, ids.pw2_w), g.param(p, ids.pw2_b));
        let h = g.linear(h, w, Some(b))?;
        g.add(h, x)
    }

    /// MDTC backbone: stacks in series, stack outputs summed.
    pub fn backbone(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut h = x;
        let mut outs = Vec::with_capacity(self.ids.blocks.len());
        for stack in &self.ids.blocks {
            for ids in stack {
                h = self.block_forward(g, h, ids)?;
            }
            outs.push(h);
        }
        g.add_n(&outs)
    }

    /// Class logits `[B, T', C]` and keyword logits `[B, T', K]`.
    pub fn heads(&self, g: &mut Graph<T>, feats: Var) -> Result<(Var, Var)> {
        let p = &self.params;
        let (w, b) = (g.param(p, self.ids.cls_w), g.param(p, self.ids.cls_b));
        let cls = g.linear(feats, w, Some(b))?;
        let (w, b) = (g.param(p, self.ids.kw_w), g.param(p, self.ids.kw_b));
        let kw = g.linear(feats, w, Some(b))?;
        Ok((cls, kw))
    }

    /// Full forward pass. `zones` holds one label per batch item and is
    /// ignored by the single-channel model.
    pub fn forward(&self, g: &mut Graph<T>, input: &ModelInput<T>, zones: &[usize]) -> Result<ModelOutput> {
        let (encoded, fused) = match (input, &self.ids.front) {
            (ModelInput::Spatial { re, im }, FrontIds::Spatial { .. }) => {
                if zones.len() != re.shape()[0] {
                    return Err(Error::Shape {
                        op: "forward",
                        lhs: re.shape().to_vec(),
                        rhs: vec![zones.len()],
                    });
                }
                let h = self.encode(g, re.clone(), im.clone())?;
                let e = self.embed_direction(g, zones)?;
                (h, self.fuse(g, h, e)?)
            }
            (ModelInput::Fbank(x), FrontIds::Fbank { proj_w, proj_b }) => {
                if x.shape().len() != 3 || x.shape()[2] != self.config.fbank_dim {
                    return Err(Error::Shape {
                        op: "forward",
                        lhs: x.shape().to_vec(),
                        rhs: vec![0, 0, self.config.fbank_dim],
                    });
                }
                let xv = g.input(x.clone());
                let (w, b) = (g.param(&self.params, *proj_w), g.param(&self.params, *proj_b));
                let h = g.linear(xv, w, Some(b))?;
                (h, h)
            }
            _ => return Err(Error::invalid("input kind does not match the model mode")),
        };
        let backbone = self.backbone(g, fused)?;
        let (class_logits, keyword_logits) = self.heads(g, backbone)?;
        Ok(ModelOutput {
            encoded,
            fused,
            backbone,
            class_logits,
            keyword_logits,
        })
    }

    /// Evaluation-mode forward returning per-frame class posteriors
    /// (softmax) and keyword posteriors (sigmoid) for a single utterance,
    /// each as `[T'][..]` rows.
    pub fn posteriors(&self, input: &ModelInput<T>, zone: usize) -> Result<FramePosteriors> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, input, &[zone])?;
        let cls = g.softmax(out.class_logits);
        let kw = g.sigmoid(out.keyword_logits);
        let rows = |v: Var, n: usize| -> Vec<Vec<f64>> {
            g.value(v)
                .data()
                .chunks(n)
                .map(|r| r.iter().map(|x| x.as_f64()).collect())
                .collect()
        };
        Ok(FramePosteriors {
            classes: rows(cls, self.config.num_classes),
            keywords: rows(kw, self.config.num_keywords.max(1)),
        })
    }
}

/// Layer-norm epsilon used by the direction embedding.
pub const LN_EPS: f64 = 1e-5;

/// Per-frame posteriors of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePosteriors {
    pub classes: Vec<Vec<f64>>,
    pub keywords: Vec<Vec<f64>>,
}

const MAGIC: &[u8; 8] = b"SKWSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything stored in a checkpoint besides the tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub step: u64,
    pub rng: Option<ChaCha8Rng>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Writes a checkpoint: magic, version, JSON header, tensor index, then
/// little-endian f32 data.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, header: &CheckpointHeader, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if header.config != model.config {
        return Err(Error::Checkpoint("header config differs from the model".into()));
    }
    let json = serde_json::to_vec(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in model.params.iter() {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        offset += t.len() as u64;
    }
    for (_, t) in model.params.iter() {
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Loads a checkpoint, rebuilding the model from its embedded config.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(Model<T>, CheckpointHeader)> {
    load_impl(path.as_ref(), None)
}

/// Loads tensors into a model built from `config`; any tensor whose shape
/// disagrees is reported by name.
pub fn load_checkpoint_as<T: Scalar>(
    path: impl AsRef<Path>,
    config: &ModelConfig,
) -> Result<(Model<T>, CheckpointHeader)> {
    load_impl(path.as_ref(), Some(config))
}

fn load_impl<T: Scalar>(path: &Path, config: Option<&ModelConfig>) -> Result<(Model<T>, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = r.u64()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let count = r.u32()? as usize;
    let mut index = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name =
            String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        index.push(IndexEntry { name, shape, offset });
    }
    let data_start = r.pos;
    let total: usize = index.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bytes.len() < data_start + 4 * total {
        return Err(Error::Checkpoint(format!(
            "truncated: tensor data needs {} bytes, file has {}",
            4 * total,
            bytes.len() - data_start
        )));
    }
    let mut model = Model::<T>::new(config.cloned().unwrap_or_else(|| header.config.clone()))?;
    if index.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            index.len(),
            model.params.len()
        )));
    }
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.name(id).to_string();
        let entry = index
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let want = model.params.get(id).shape().to_vec();
        if entry.shape != want {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {:?} in checkpoint, model expects {want:?}",
                entry.shape
            )));
        }
        let n: usize = want.iter().product();
        let start = data_start + 4 * entry.offset;
        let raw = bytes
            .get(start..start + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated data for tensor {name}")))?;
        let vals: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        *model.params.get_mut(id) = Tensor::new(&want, vals)?;
    }
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn receptive_field_formula() {
        assert_eq!(MdtcConfig::default().receptive_field(), 241);
    }

    #[test]
    fn output_frames() {
        let e = SpatialEncoderConfig::new(2);
        assert_eq!(e.output_frames(98), 25);
        assert_eq!(e.output_frames(99), 25);
        assert_eq!(e.output_frames(1), 1);
        assert_eq!(e.output_bins(), 33);
        for t in 1..300 {
            assert_eq!(e.output_frames(t), t.div_ceil(4));
        }
    }

    #[test]
    fn compression_keeps_phase() {
        let (r, i) = compress(3.0, 4.0, 0.5);
        assert!((r.hypot(i) - 5f64.sqrt()).abs() < 1e-12);
        assert!((i / r - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(compress(0.0, 0.0, 0.3), (0.0, 0.0));
    }
}

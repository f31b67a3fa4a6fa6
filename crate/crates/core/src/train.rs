//! Frame-level objectives, Adam, and the training loop.
//!
//! Every utterance label is replicated over its valid output frames. The
//! objective is the masked frame cross-entropy of the C-way head plus
//! `bce_weight` times the binary cross-entropy of the keyword heads.
//!
//! Batches are split into per-utterance shards whose gradients are summed
//! in index order, so results do not depend on thread scheduling.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::eval::utterance_prediction;
use crate::net::{save_checkpoint, stack_inputs, CheckpointHeader, Model, ModelConfig, ModelInput};
use crate::tensor::{Graph, ParamGrads, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Weight of the keyword-head BCE term.
    pub bce_weight: f64,
    pub precision: Precision,
    /// Save `epoch_<n>.ckpt` every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Largest random delay (samples) applied to training audio each time
    /// an utterance is drawn; 0 disables. Only used when `fit_augmented`
    /// gets an augmenter.
    pub max_shift: usize,
    /// Random speed factor drawn from `1 ± speed_perturb` per draw; 0
    /// disables. Also used only with an augmenter.
    pub speed_perturb: f64,
    /// Cosine learning-rate decay from `adam.lr` to `adam.lr * final_lr_ratio`
    /// over all steps; 1 keeps the rate constant.
    pub final_lr_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 8,
            epochs: 20,
            seed: 0,
            bce_weight: 0.5,
            precision: Precision::F32,
            checkpoint_every: 0,
            grad_clip: Some(5.0),
            max_shift: 640,
            speed_perturb: 0.1,
            final_lr_ratio: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr > 0.0) || !self.adam.lr.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.bce_weight >= 0.0) {
            return Err(Error::invalid("bce weight must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(0.0..0.5).contains(&self.speed_perturb) {
            return Err(Error::invalid("speed perturbation must lie in [0, 0.5)"));
        }
        if !(self.final_lr_ratio > 0.0 && self.final_lr_ratio <= 1.0) {
            return Err(Error::invalid("final lr ratio must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// A padded batch: inputs stacked to the longest utterance, per-frame class
/// labels, and a prefix-true validity mask, both flattened to `[B * T']`.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub input: ModelInput<T>,
    pub zones: Vec<usize>,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
    /// Output frames per row.
    pub frames: usize,
}

fn pad_frames<T: Scalar>(input: &ModelInput<T>, frames: usize) -> Result<ModelInput<T>> {
    let pad = |t: &Tensor<T>, axis: usize| -> Result<Tensor<T>> {
        let s = t.shape();
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut shape = s.to_vec();
        shape[axis] = frames;
        let mut data = vec![T::zero(); outer * frames * inner];
        for o in 0..outer {
            let src = &t.data()[o * s[axis] * inner..(o + 1) * s[axis] * inner];
            data[o * frames * inner..o * frames * inner + src.len()].copy_from_slice(src);
        }
        Tensor::new(&shape, data)
    };
    Ok(match input {
        ModelInput::Spatial { re, im } => ModelInput::Spatial {
            re: pad(re, 2)?,
            im: pad(im, 2)?,
        },
        ModelInput::Fbank(x) => ModelInput::Fbank(pad(x, 1)?),
    })
}

impl<T: Scalar> Batch<T> {
    /// Zero-pads examples to a common length. Causality of the model keeps
    /// the valid frames unaffected by the padding.
    pub fn collate(examples: &[&Example<T>], config: &ModelConfig) -> Result<Self> {
        let t_in = examples
            .iter()
            .map(|e| e.frames)
            .max()
            .ok_or_else(|| Error::invalid("empty batch"))?;
        let frames = config.output_frames(t_in);
        let mut inputs = Vec::with_capacity(examples.len());
        let mut labels = Vec::with_capacity(examples.len() * frames);
        let mut mask = Vec::with_capacity(examples.len() * frames);
        for e in examples {
            if e.class >= config.num_classes {
                return Err(Error::invalid(format!(
                    "class {} outside {} classes",
                    e.class, config.num_classes
                )));
            }
            inputs.push(pad_frames(&e.input, t_in)?);
            let valid = config.output_frames(e.frames);
            labels.extend((0..frames).map(|_| e.class));
            mask.extend((0..frames).map(|t| t < valid));
        }
        Ok(Self {
            input: stack_inputs(&inputs)?,
            zones: examples.iter().map(|e| e.zone).collect(),
            labels,
            mask,
            frames,
        })
    }
}

/// Keyword targets: 1 where the frame label equals keyword `j`.
pub fn keyword_targets(labels: &[usize], num_keywords: usize) -> Vec<f64> {
    labels
        .iter()
        .flat_map(|&l| (0..num_keywords).map(move |j| if l == j { 1.0 } else { 0.0 }))
        .collect()
}

fn require_valid(mask: &[bool]) -> Result<usize> {
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::invalid("every frame of the batch is masked")),
        n => Ok(n),
    }
}

/// Mean softmax cross-entropy over valid frames.
pub fn frame_ce_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
    require_valid(mask)?;
    g.cross_entropy(logits, labels, mask, None)
}

/// Mean binary cross-entropy over valid frames and keywords.
pub fn bce_aux_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
    require_valid(mask)?;
    let k = *g.shape(logits).last().unwrap();
    g.bce_with_logits(logits, &keyword_targets(labels, k), mask, None)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of valid frames whose argmax matches the label, with the
/// matching count and the valid count.
pub fn frame_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize], mask: &[bool]) -> (f64, usize, usize) {
    let c = *logits.shape().last().unwrap();
    let mut hit = 0;
    let mut n = 0;
    for (r, row) in logits.data().chunks(c).enumerate() {
        if mask[r] {
            n += 1;
            hit += usize::from(argmax(row) == labels[r]);
        }
    }
    (if n == 0 { 0.0 } else { hit as f64 / n as f64 }, hit, n)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = T::from_f64_lossy(c.lr * bc2.sqrt() / bc1);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let eps = T::from_f64_lossy(c.eps * bc2.sqrt());
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for (((p, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + ob1 * *g;
                *v = b2 * *v + ob2 * *g * *g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub ce: f64,
    pub bce: f64,
    pub frame_acc: f64,
    pub grad_norm: f64,
}

struct Shard<T> {
    grads: ParamGrads<T>,
    ce: f64,
    bce: f64,
    hit: usize,
    valid: usize,
}

/// Dropout RNG for one utterance of one step.
fn shard_rng(seed: u64, step: u64, item: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d20f);
    r.set_stream((step << 24) | item as u64);
    r
}

/// Forward and backward for one utterance. Losses are normalized by the
/// batch-wide valid-frame count so shard gradients add up to the batch
/// gradient.
fn shard<T: Scalar>(
    model: &Model<T>,
    ex: &Example<T>,
    rng: Option<ChaCha8Rng>,
    total_valid: usize,
    bce_weight: f64,
) -> Result<Shard<T>> {
    let cfg = &model.config;
    let mut g = match rng {
        Some(r) => Graph::train(r),
        None => Graph::new(),
    };
    let out = model.forward(&mut g, &ex.input, &[ex.zone])?;
    let frames = g.shape(out.class_logits)[1];
    let labels = vec![ex.class; frames];
    let mask = vec![true; frames];
    let ce = g.cross_entropy(out.class_logits, &labels, &mask, Some(total_valid as f64))?;
    let k = cfg.num_keywords;
    let bce = if k > 0 {
        Some(g.bce_with_logits(
            out.keyword_logits,
            &keyword_targets(&labels, k),
            &mask,
            Some((total_valid * k) as f64),
        )?)
    } else {
        None
    };
    let loss = match bce {
        Some(b) if bce_weight > 0.0 => {
            let s = g.scale(b, bce_weight);
            g.add(ce, s)?
        }
        _ => ce,
    };
    let grads = g.backward(loss)?;
    let (_, hit, valid) = frame_accuracy(g.value(out.class_logits), &labels, &mask);
    Ok(Shard {
        ce: g.value(ce).item().as_f64(),
        bce: bce.map_or(0.0, |b| g.value(b).item().as_f64()),
        grads,
        hit,
        valid,
    })
}

/// One optimization step on `batch`. `batch_id` only labels errors.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    batch: &[&Example<T>],
    adam: &mut Adam<T>,
    config: &TrainConfig,
    batch_id: u64,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let step = adam.steps();
    let total_valid: usize = batch.iter().map(|e| model.config.output_frames(e.frames)).sum();
    let m: &Model<T> = model;
    let shards: Vec<Shard<T>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            shard(
                m,
                ex,
                Some(shard_rng(config.seed, step, i)),
                total_valid,
                config.bce_weight,
            )
        })
        .collect::<Result<_>>()?;

    let mut iter = shards.into_iter();
    let first = iter.next().expect("non-empty batch");
    let (mut grads, mut ce, mut bce, mut hit, mut valid) = (first.grads, first.ce, first.bce, first.hit, first.valid);
    for s in iter {
        grads.accumulate(&s.grads);
        ce += s.ce;
        bce += s.bce;
        hit += s.hit;
        valid += s.valid;
    }
    let loss = ce + config.bce_weight * bce;
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss} at step {step} (batch {batch_id})"
        )));
    }
    let grad_norm = grads.norm();
    if let Some(clip) = config.grad_clip {
        if grad_norm > clip {
            grads.scale(T::from_f64_lossy(clip / grad_norm));
        }
    }
    adam.step(&mut model.params, &grads);
    Ok(StepMetrics {
        step: step + 1,
        loss,
        ce,
        bce,
        frame_acc: hit as f64 / valid.max(1) as f64,
        grad_norm,
    })
}

/// Summary of an evaluation-mode pass over a set of examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub ce: f64,
    pub frame_acc: f64,
    pub utterance_acc: f64,
}

/// Mean frame CE, frame accuracy and utterance accuracy, deterministic.
pub fn evaluate_set<T: Scalar>(model: &Model<T>, examples: &[Example<T>]) -> Result<SetMetrics> {
    if examples.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let rows: Vec<(f64, usize, usize, bool)> = examples
        .par_iter()
        .map(|ex| {
            let mut g = Graph::new();
            let out = model.forward(&mut g, &ex.input, &[ex.zone])?;
            let frames = g.shape(out.class_logits)[1];
            let labels = vec![ex.class; frames];
            let mask = vec![true; frames];
            let ce = g.cross_entropy(out.class_logits, &labels, &mask, Some(1.0))?;
            let (_, hit, n) = frame_accuracy(g.value(out.class_logits), &labels, &mask);
            let p = g.softmax(out.class_logits);
            let c = model.config.num_classes;
            let post: Vec<Vec<f64>> = g
                .value(p)
                .data()
                .chunks(c)
                .map(|r| r.iter().map(|v| v.as_f64()).collect())
                .collect();
            Ok((
                g.value(ce).item().as_f64(),
                hit,
                n,
                utterance_prediction(&post) == ex.class,
            ))
        })
        .collect::<Result<_>>()?;
    let frames: usize = rows.iter().map(|r| r.2).sum();
    Ok(SetMetrics {
        ce: rows.iter().map(|r| r.0).sum::<f64>() / frames as f64,
        frame_acc: rows.iter().map(|r| r.1).sum::<usize>() as f64 / frames as f64,
        utterance_acc: rows.iter().filter(|r| r.3).count() as f64 / rows.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_frame_acc: f64,
    pub valid: Option<SetMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose weights were kept (lowest validation CE, else the last).
    pub best_epoch: Option<usize>,
    pub steps: u64,
}

/// Where `fit` writes logs and checkpoints.
pub struct FitOutput<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<&'a Path>,
}

impl FitOutput<'_> {
    pub fn none() -> Self {
        Self {
            log: None,
            checkpoint_dir: None,
        }
    }
}

fn header<T: Scalar>(model: &Model<T>, step: u64, rng: &ChaCha8Rng, meta: serde_json::Value) -> CheckpointHeader {
    CheckpointHeader {
        config: model.config.clone(),
        step,
        rng: Some(rng.clone()),
        meta,
    }
}

/// Produces a fresh input for a training example each time it is drawn.
pub trait Augment<T: Scalar>: Sync {
    /// Number of examples the augmenter holds audio for.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// New input for `train[index]`.
    fn augment(&self, index: usize, example: &Example<T>, rng: &mut ChaCha8Rng) -> Result<ModelInput<T>>;
}

/// Per-draw augmentation stream, independent of thread scheduling.
fn augment_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa46_5eed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Learning rate for `step` (0-based) of `total` under the cosine decay.
pub fn scheduled_lr(config: &TrainConfig, step: usize, total: usize) -> f64 {
    let lr = config.adam.lr;
    if config.final_lr_ratio == 1.0 || total <= 1 {
        return lr;
    }
    let frac = step.min(total - 1) as f64 / (total - 1) as f64;
    let floor = lr * config.final_lr_ratio;
    floor + 0.5 * (lr - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Uniform delay in `0..=max`.
pub fn draw_shift(rng: &mut ChaCha8Rng, max: usize) -> usize {
    rng.random_range(0..=max)
}

/// Uniform speed factor in `[1 - delta, 1 + delta]`.
pub fn draw_speed(rng: &mut ChaCha8Rng, delta: f64) -> f64 {
    if delta == 0.0 {
        1.0
    } else {
        rng.random_range(1.0 - delta..=1.0 + delta)
    }
}

/// Trains `model` on `train`, keeping the weights with the lowest
/// validation CE. With zero epochs the initial model is returned untouched.
pub fn fit<T: Scalar>(
    model: Model<T>,
    train: &[Example<T>],
    valid: &[Example<T>],
    config: &TrainConfig,
    out: FitOutput<'_>,
) -> Result<(Model<T>, FitReport)> {
    fit_augmented(model, train, valid, config, out, None)
}

/// [`fit`] with inputs regenerated by `augment` on every draw.
pub fn fit_augmented<T: Scalar>(
    mut model: Model<T>,
    train: &[Example<T>],
    valid: &[Example<T>],
    config: &TrainConfig,
    mut out: FitOutput<'_>,
    augment: Option<&dyn Augment<T>>,
) -> Result<(Model<T>, FitReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("no training examples".into()));
    }
    if let Some(a) = augment {
        if a.len() != train.len() {
            return Err(Error::invalid(format!(
                "augmenter holds {} utterances, training set has {}",
                a.len(),
                train.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.adam, &model.params);
    let mut report = FitReport {
        epochs: Vec::new(),
        best_epoch: None,
        steps: 0,
    };
    let mut best: Option<(f64, Model<T>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let total_steps = config.epochs * train.len().div_ceil(config.batch_size);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut acc_sum, mut batches) = (0.0, 0.0, 0usize);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let fresh: Vec<Example<T>> = match augment {
                Some(a) => chunk
                    .par_iter()
                    .map(|&i| {
                        let ex = &train[i];
                        let input = a.augment(i, ex, &mut augment_rng(config.seed, epoch, i))?;
                        Ok(Example {
                            id: ex.id.clone(),
                            frames: input.frames(),
                            input,
                            zone: ex.zone,
                            class: ex.class,
                        })
                    })
                    .collect::<Result<_>>()?,
                None => Vec::new(),
            };
            let batch: Vec<&Example<T>> = if augment.is_some() {
                fresh.iter().collect()
            } else {
                chunk.iter().map(|&i| &train[i]).collect()
            };
            adam.config.lr = scheduled_lr(config, adam.steps() as usize, total_steps);
            let m = train_step(&mut model, &batch, &mut adam, config, bi as u64)?;
            loss_sum += m.loss;
            acc_sum += m.frame_acc;
            batches += 1;
            if let Some(w) = out.log.as_deref_mut() {
                let line = serde_json::to_string(&m).map_err(|e| Error::invalid(e.to_string()))?;
                writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
            }
        }
        let vm = if valid.is_empty() {
            None
        } else {
            Some(evaluate_set(&model, valid)?)
        };
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_frame_acc: acc_sum / batches as f64,
            valid: vm,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:.3} valid {:?}",
            stats.train_loss,
            stats.train_frame_acc,
            vm
        );
        report.epochs.push(stats);
        report.steps = adam.steps();
        let score = vm.map_or(f64::NEG_INFINITY, |v| v.ce);
        if best.as_ref().is_none_or(|(b, _)| score < *b) || vm.is_none() {
            best = Some((score, model.clone()));
            report.best_epoch = Some(epoch);
        }
        if let Some(dir) = out.checkpoint_dir {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                let meta = serde_json::json!({ "epoch": epoch });
                save_checkpoint(
                    &model,
                    &header(&model, adam.steps(), &rng, meta),
                    dir.join(format!("epoch_{epoch}.ckpt")),
                )?;
            }
        }
    }
    let model = best.map_or(model, |(_, m)| m);
    if let Some(dir) = out.checkpoint_dir {
        let meta = serde_json::json!({ "best_epoch": report.best_epoch, "epochs": config.epochs });
        save_checkpoint(&model, &header(&model, report.steps, &rng, meta), dir.join("best.ckpt"))?;
    }
    Ok((model, report))
}

/// Frame CE for a padded batch in one graph; used to check masking.
pub fn batch_ce<T: Scalar>(model: &Model<T>, batch: &Batch<T>) -> Result<f64> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &batch.input, &batch.zones)?;
    let l = frame_ce_loss(&mut g, out.class_logits, &batch.labels, &batch.mask)?;
    Ok(g.value(l).item().as_f64())
}

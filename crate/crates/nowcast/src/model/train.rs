//! Training and inference pipelines: sample preparation (interpolation,
//! flips, crops, padding), batch-pooled loss, AdamW, the validation-driven
//! learning-rate schedule with early stopping, and checkpoint I/O.

use super::unet::{
    backward_sample, forward_sample, init_params, zeros_like, Arch, ModelError, UNetConfig,
};
use crate::augment::{
    avg_pool_target, center_crop, crop_input, crop_target, geometric, tfi, upsample_restore,
    AugmentError, FlipKind, Sample, SampleExt,
};
use crate::binning::{decode, RainBins, NUM_BINS};
use crate::dataio::{
    load_sample_ext, read_checkpoint, write_checkpoint, DataError, ManifestEntry,
};
use crate::losses::{loss_with_grad, softmax_bins, LossConfig, LossError};
use crate::metrics::{evaluate, MetricsError, ScoreReport};
use crate::model::layers::pad_spatial;
use crate::tensor::{sample_beta, RngState, Tensor};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid training setup: {0}")]
    Invalid(String),
}

/// Spatial geometry of the crop / pad / restore chain. The network consumes
/// `input_crop`-sized inputs padded up to the next multiple of 2^depth, the
/// loss and decode run on the central `patch_side` window, and block
/// upsampling by `upsample_factor` restores target resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineConfig {
    pub input_crop: usize,
    pub patch_side: usize,
    pub upsample_factor: usize,
}

impl PipelineConfig {
    /// Equal-resolution 32x32 geometry for fast experiments.
    pub fn desk() -> Self {
        PipelineConfig { input_crop: 32, patch_side: 32, upsample_factor: 1 }
    }

    /// 126 input crop, 42 output patch, x6 restore to 252.
    pub fn geometry() -> Self {
        PipelineConfig { input_crop: 126, patch_side: 42, upsample_factor: 6 }
    }

    /// Network-facing side length: input_crop rounded up to a multiple of
    /// 2^depth so pooling halves cleanly.
    pub fn pad_side(&self, depth: usize) -> usize {
        let m = 1usize << depth;
        (self.input_crop + m - 1) / m * m
    }

    pub fn validate(&self, depth: usize) -> Result<(), TrainError> {
        if self.input_crop == 0 || self.patch_side == 0 || self.upsample_factor == 0 {
            return Err(TrainError::Invalid(
                "pipeline sides and upsample factor must be positive".into(),
            ));
        }
        if self.patch_side > self.pad_side(depth) {
            return Err(TrainError::Invalid(format!(
                "patch side {} exceeds padded network side {}",
                self.patch_side,
                self.pad_side(depth)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Multiplied into the learning rate whenever validation loss worsens.
    pub lr_decay: f64,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub tfi: bool,
    pub flips: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 0.02,
            batch_size: 8,
            max_epochs: 90,
            lr_decay: 0.9,
            patience: 10,
            seed: 0,
            loss: LossConfig::default(),
            tfi: true,
            flips: true,
        }
    }
}

impl TrainConfig {
    /// Short schedule with a larger step size, sized for the 32x32 synthetic
    /// task where the full 90-epoch schedule is unnecessary.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 2e-3,
            max_epochs: 30,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(TrainError::Invalid(
                "learning rate must be > 0 and weight decay >= 0".into(),
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(TrainError::Invalid("lr decay must be in (0,1]".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::Invalid(
                "batch size and epoch count must be positive".into(),
            ));
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mcsi: f64,
    pub lr: f64,
}

/// Parameters plus Adam moments and schedule state; everything needed to
/// resume or run inference.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub cfg: UNetConfig,
    pub pipeline: PipelineConfig,
    pub params: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
    pub step: u64,
    pub epoch: u32,
    pub best_val_loss: f64,
    pub lr: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl ModelState {
    pub fn init(
        cfg: UNetConfig,
        pipeline: PipelineConfig,
        lr: f64,
        seed: u64,
    ) -> Result<ModelState, TrainError> {
        cfg.validate()?;
        pipeline.validate(cfg.depth)?;
        let mut rng = RngState::from_seed(seed).derive(0xC0DE);
        let params = init_params(&cfg, &mut rng);
        let adam_m = zeros_like(&params);
        let adam_v = zeros_like(&params);
        Ok(ModelState {
            cfg,
            pipeline,
            params,
            adam_m,
            adam_v,
            step: 0,
            epoch: 0,
            best_val_loss: f64::INFINITY,
            lr,
        })
    }

    /// One AdamW update: decoupled weight decay, then the bias-corrected
    /// moment step. Moments are carried in f32 but updated in f64.
    pub fn adamw_step(&mut self, grads: &BTreeMap<String, Tensor>, weight_decay: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        let lr = self.lr;
        for (name, p) in self.params.iter_mut() {
            let g = grads[name].data();
            let m = self.adam_m.get_mut(name).expect("moment entry").data_mut();
            let v = self.adam_v.get_mut(name).expect("moment entry").data_mut();
            for i in 0..g.len() {
                let gi = f64::from(g[i]);
                let mi = ADAM_BETA1 * f64::from(m[i]) + (1.0 - ADAM_BETA1) * gi;
                let vi = ADAM_BETA2 * f64::from(v[i]) + (1.0 - ADAM_BETA2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
                let decayed = f64::from(p.data()[i]) * (1.0 - lr * weight_decay);
                p.data_mut()[i] = (decayed - lr * update) as f32;
            }
        }
    }
}

/// Permutes (F, C, H, W) to (C, F, H, W) for the 3D network.
fn frames_to_channels_last(x: &Tensor) -> Tensor {
    let s = x.shape().to_vec();
    let (f, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let mut out = vec![0.0f32; x.len()];
    for fi in 0..f {
        for ci in 0..c {
            let src = (fi * c + ci) * plane;
            let dst = (ci * f + fi) * plane;
            out[dst..dst + plane].copy_from_slice(&x.data()[src..src + plane]);
        }
    }
    Tensor::new(vec![c, f, h, w], out)
}

/// Crops and pads satellite inputs (F, C, H, W) into the network layout:
/// (F*C, p, p) for the 2D variant, (C, F, p, p) for the 3D one.
fn network_input(
    inputs: &Tensor,
    cfg: &UNetConfig,
    pipeline: &PipelineConfig,
) -> Result<Tensor, TrainError> {
    let cropped = crop_input(inputs, pipeline.input_crop)?;
    let padded = pad_spatial(&cropped, pipeline.pad_side(cfg.depth));
    let s = padded.shape().to_vec();
    match cfg.arch {
        Arch::UNet2d => Ok(padded
            .reshape(vec![s[0] * s[1], s[2], s[3]])
            .expect("same element count")),
        Arch::UNet3d => Ok(frames_to_channels_last(&padded)),
    }
}

/// Radar truth cropped to the restored extent and pooled down to patch
/// resolution; the (T, patch, patch) rate field the loss compares against.
fn target_rates(targets: &Tensor, pipeline: &PipelineConfig) -> Result<Tensor, TrainError> {
    let crop = crop_target(targets, pipeline.patch_side * pipeline.upsample_factor)?;
    Ok(avg_pool_target(&crop, pipeline.upsample_factor))
}

/// Central patch of the raw (T*6, p, p) network output, as (T, 6, s, s).
fn logits_patch(
    logits: &Tensor,
    timesteps: usize,
    pipeline: &PipelineConfig,
) -> Result<Tensor, TrainError> {
    let cropped = center_crop(logits, pipeline.patch_side)?;
    let s = pipeline.patch_side;
    Ok(cropped
        .reshape(vec![timesteps, NUM_BINS, s, s])
        .expect("same element count"))
}

/// Scatters a patch gradient back into the full padded logits plane, the
/// adjoint of the center crop.
fn embed_patch_grad(
    grad_patch: &Tensor,
    out_channels: usize,
    pad: usize,
) -> Tensor {
    let s = grad_patch.shape();
    let side = s[s.len() - 1];
    let off = (pad - side) / 2;
    let mut out = Tensor::zeros(vec![out_channels, pad, pad]);
    for c in 0..out_channels {
        for y in 0..side {
            let src = (c * side + y) * side;
            let dst = (c * pad + y + off) * pad + off;
            out.data_mut()[dst..dst + side]
                .copy_from_slice(&grad_patch.data()[src..src + side]);
        }
    }
    out
}

fn stack(tensors: &[Tensor]) -> Tensor {
    let inner = &tensors[0].shape()[1..];
    let lead: usize = tensors.iter().map(|t| t.shape()[0]).sum();
    let mut shape = vec![lead];
    shape.extend_from_slice(inner);
    let mut data = Vec::with_capacity(tensors.iter().map(Tensor::len).sum());
    for t in tensors {
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

fn check_geometry(
    samples: &[SampleExt],
    cfg: &UNetConfig,
    pipeline: &PipelineConfig,
) -> Result<(), TrainError> {
    let first = &samples[0];
    let (f_in, bands) = (first.frames_in(), first.inputs.shape()[1]);
    let t_out = first.timesteps();
    for s in samples {
        if s.inputs.shape() != first.inputs.shape() || s.targets.shape() != first.targets.shape() {
            return Err(TrainError::Invalid(format!(
                "mixed sample geometry: {:?}/{:?} vs {:?}/{:?}",
                s.inputs.shape(),
                s.targets.shape(),
                first.inputs.shape(),
                first.targets.shape()
            )));
        }
    }
    let want_in = match cfg.arch {
        Arch::UNet2d => f_in * bands,
        Arch::UNet3d => bands,
    };
    if cfg.in_channels != want_in {
        return Err(TrainError::Invalid(format!(
            "model expects {} input channels but the data provides {} ({} frames x {} bands)",
            cfg.in_channels, want_in, f_in, bands
        )));
    }
    if cfg.arch == Arch::UNet3d && cfg.frames_in != f_in {
        return Err(TrainError::Invalid(format!(
            "model expects {} input frames but the data provides {f_in}",
            cfg.frames_in
        )));
    }
    if cfg.out_channels != t_out * NUM_BINS {
        return Err(TrainError::Invalid(format!(
            "model emits {} channels but {t_out} target steps need {}",
            cfg.out_channels,
            t_out * NUM_BINS
        )));
    }
    let radar_side = first.targets.shape()[1].min(first.targets.shape()[2]);
    if pipeline.patch_side * pipeline.upsample_factor > radar_side {
        return Err(TrainError::Invalid(format!(
            "restored extent {} exceeds radar side {radar_side}",
            pipeline.patch_side * pipeline.upsample_factor
        )));
    }
    Ok(())
}

/// Drops the trailing interpolation frames; bitwise identical to the stored
/// leading frames.
fn plain_sample(ext: &SampleExt) -> Sample {
    tfi(ext, 0.0).expect("lambda 0 is always valid")
}

fn load_all(base: &Path, entries: &[ManifestEntry]) -> Result<Vec<SampleExt>, TrainError> {
    entries
        .iter()
        .map(|e| load_sample_ext(base, e).map_err(TrainError::from))
        .collect()
}

/// Trains on the manifest entries under `base`, returning the best-validation
/// model and the per-epoch history.
pub fn train(
    base: &Path,
    train_entries: &[ManifestEntry],
    val_entries: &[ManifestEntry],
    cfg: &UNetConfig,
    pipeline: &PipelineConfig,
    tcfg: &TrainConfig,
    bins: &RainBins,
) -> Result<(ModelState, Vec<EpochStats>), TrainError> {
    tcfg.validate()?;
    if train_entries.is_empty() || val_entries.is_empty() {
        return Err(TrainError::Invalid(
            "need at least one training and one validation sample".into(),
        ));
    }
    let train_set = load_all(base, train_entries)?;
    let val_set = load_all(base, val_entries)?;
    let mut all = train_set.clone();
    all.extend(val_set.iter().cloned());
    check_geometry(&all, cfg, pipeline)?;
    drop(all);

    let timesteps = train_set[0].timesteps();
    let mut state = ModelState::init(cfg.clone(), *pipeline, tcfg.learning_rate, tcfg.seed)?;

    // clean validation tensors, fixed for the whole run
    let mut val_inputs = Vec::with_capacity(val_set.len());
    let mut val_rates = Vec::with_capacity(val_set.len());
    let mut val_truth = Vec::with_capacity(val_set.len());
    for ext in &val_set {
        let s = plain_sample(ext);
        val_inputs.push(network_input(&s.inputs, cfg, pipeline)?);
        val_rates.push(target_rates(&s.targets, pipeline)?);
        val_truth.push(crop_target(
            &s.targets,
            pipeline.patch_side * pipeline.upsample_factor,
        )?);
    }

    let root = RngState::from_seed(tcfg.seed);
    let mut history = Vec::new();
    let mut best: Option<ModelState> = None;
    let mut best_epoch = 0u32;
    let mut prev_val_loss = f64::INFINITY;

    for epoch in 0..tcfg.max_epochs as u32 {
        let mut er = root.derive(u64::from(epoch) + 1);
        let order = er.shuffled_indices(train_set.len());
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let mut patches = Vec::with_capacity(chunk.len());
            let mut rates = Vec::with_capacity(chunk.len());
            let mut caches = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let ext = &train_set[idx];
                let lam = if tcfg.tfi {
                    sample_beta(&mut er, 1.0, 1.0).expect("valid beta parameters") as f32
                } else {
                    0.0
                };
                let flip = if tcfg.flips {
                    FlipKind::ALL[er.uniform_usize(FlipKind::ALL.len())]
                } else {
                    FlipKind::Identity
                };
                let s = geometric(&tfi(ext, lam.clamp(0.0, 1.0))?, flip);
                let x = network_input(&s.inputs, cfg, pipeline)?;
                let (logits, cache) = forward_sample(&state.params, cfg, &x, true, &mut er)?;
                patches.push(logits_patch(&logits, timesteps, pipeline)?);
                rates.push(target_rates(&s.targets, pipeline)?);
                caches.push(cache);
            }
            let pooled_logits = stack(&patches);
            let pooled_rates = stack(&rates);
            let res = loss_with_grad(&pooled_logits, &pooled_rates, bins, &tcfg.loss)?;
            loss_sum += res.value;
            batches += 1;

            let mut grads = zeros_like(&state.params);
            let per_sample = timesteps * NUM_BINS * pipeline.patch_side * pipeline.patch_side;
            for (i, cache) in caches.iter().enumerate() {
                let gslice = &res.grad_logits.data()[i * per_sample..(i + 1) * per_sample];
                let gpatch = Tensor::new(
                    vec![
                        timesteps * NUM_BINS,
                        pipeline.patch_side,
                        pipeline.patch_side,
                    ],
                    gslice.to_vec(),
                );
                let gfull = embed_patch_grad(
                    &gpatch,
                    cfg.out_channels,
                    pipeline.pad_side(cfg.depth),
                );
                backward_sample(&state.params, cfg, cache, &gfull, &mut grads)?;
            }
            state.adamw_step(&grads, tcfg.weight_decay);
        }
        let train_loss = loss_sum / batches as f64;

        let (val_loss, val_mcsi) =
            validate(&state, &val_inputs, &val_rates, &val_truth, timesteps, bins, &tcfg.loss)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_mcsi,
            lr: state.lr,
        });
        state.epoch = epoch;

        if val_loss < state.best_val_loss {
            state.best_val_loss = val_loss;
            best_epoch = epoch;
            best = Some(state.clone());
        } else if epoch - best_epoch >= tcfg.patience as u32 {
            break;
        }
        if val_loss > prev_val_loss {
            state.lr *= tcfg.lr_decay;
        }
        prev_val_loss = val_loss;
    }

    let best = best.expect("at least one epoch ran");
    Ok((best, history))
}

#[allow(clippy::too_many_arguments)]
fn validate(
    state: &ModelState,
    val_inputs: &[Tensor],
    val_rates: &[Tensor],
    val_truth: &[Tensor],
    timesteps: usize,
    bins: &RainBins,
    loss_cfg: &LossConfig,
) -> Result<(f64, f64), TrainError> {
    let mut eval_rng = RngState::from_seed(0);
    let mut patches = Vec::with_capacity(val_inputs.len());
    let mut preds = Vec::with_capacity(val_inputs.len());
    for x in val_inputs {
        let (logits, _) = forward_sample(&state.params, &state.cfg, x, false, &mut eval_rng)?;
        let patch = logits_patch(&logits, timesteps, &state.pipeline)?;
        let probs = softmax_bins(&patch)?;
        preds.push(upsample_restore(
            &decode(&probs, bins),
            state.pipeline.upsample_factor,
        ));
        patches.push(patch);
    }
    let res = loss_with_grad(&stack(&patches), &stack(val_rates), bins, loss_cfg)?;
    let report = evaluate(&preds, val_truth, bins)?;
    Ok((res.value, report.mcsi))
}

/// Full-resolution forecast for one input sequence (frames_in, C, H, W):
/// crop, pad, forward, decode the central patch, restore by block upsampling.
/// Output shape (T, patch*factor, patch*factor).
pub fn predict(
    state: &ModelState,
    inputs: &Tensor,
    bins: &RainBins,
) -> Result<Tensor, TrainError> {
    if inputs.rank() != 4 {
        return Err(TrainError::Invalid(format!(
            "prediction input must be rank 4 (frames, bands, h, w), got {:?}",
            inputs.shape()
        )));
    }
    let timesteps = state.cfg.out_channels / NUM_BINS;
    let x = network_input(inputs, &state.cfg, &state.pipeline)?;
    let mut eval_rng = RngState::from_seed(0);
    let (logits, _) = forward_sample(&state.params, &state.cfg, &x, false, &mut eval_rng)?;
    let patch = logits_patch(&logits, timesteps, &state.pipeline)?;
    let probs = softmax_bins(&patch)?;
    Ok(upsample_restore(
        &decode(&probs, bins),
        state.pipeline.upsample_factor,
    ))
}

/// Scores a trained model against the truth tensors of a manifest.
pub fn score_model(
    state: &ModelState,
    base: &Path,
    entries: &[ManifestEntry],
    bins: &RainBins,
) -> Result<ScoreReport, TrainError> {
    let mut preds = Vec::with_capacity(entries.len());
    let mut truths = Vec::with_capacity(entries.len());
    for entry in entries {
        let ext = load_sample_ext(base, entry)?;
        let s = plain_sample(&ext);
        preds.push(predict(state, &s.inputs, bins)?);
        truths.push(crop_target(
            &s.targets,
            state.pipeline.patch_side * state.pipeline.upsample_factor,
        )?);
    }
    Ok(evaluate(&preds, &truths, bins)?)
}

fn meta_string(state: &ModelState) -> String {
    let mut m = String::new();
    let _ = writeln!(m, "arch={}", state.cfg.arch.as_str());
    let _ = writeln!(m, "in_channels={}", state.cfg.in_channels);
    let _ = writeln!(m, "frames_in={}", state.cfg.frames_in);
    let _ = writeln!(m, "out_channels={}", state.cfg.out_channels);
    let _ = writeln!(m, "depth={}", state.cfg.depth);
    let _ = writeln!(m, "base_width={}", state.cfg.base_width);
    let _ = writeln!(m, "dropout={}", state.cfg.dropout);
    let _ = writeln!(m, "input_crop={}", state.pipeline.input_crop);
    let _ = writeln!(m, "patch_side={}", state.pipeline.patch_side);
    let _ = writeln!(m, "upsample_factor={}", state.pipeline.upsample_factor);
    let _ = writeln!(m, "step={}", state.step);
    let _ = writeln!(m, "epoch={}", state.epoch);
    let _ = writeln!(m, "best_val_loss={}", state.best_val_loss);
    let _ = writeln!(m, "lr={}", state.lr);
    m
}

pub fn save_checkpoint(path: &Path, state: &ModelState) -> Result<(), TrainError> {
    let mut tensors = BTreeMap::new();
    for (k, v) in &state.params {
        tensors.insert(format!("param/{k}"), v.clone());
    }
    for (k, v) in &state.adam_m {
        tensors.insert(format!("adam_m/{k}"), v.clone());
    }
    for (k, v) in &state.adam_v {
        tensors.insert(format!("adam_v/{k}"), v.clone());
    }
    write_checkpoint(path, &meta_string(state), &tensors)?;
    Ok(())
}

fn meta_get<'a>(
    meta: &'a BTreeMap<&'a str, &'a str>,
    key: &str,
) -> Result<&'a str, TrainError> {
    meta.get(key)
        .copied()
        .ok_or_else(|| ModelError::Malformed(format!("checkpoint metadata lacks `{key}`")).into())
}

fn meta_parse<T: std::str::FromStr>(
    meta: &BTreeMap<&str, &str>,
    key: &str,
) -> Result<T, TrainError> {
    meta_get(meta, key)?.parse().map_err(|_| {
        ModelError::Malformed(format!("checkpoint metadata `{key}` is not a valid number")).into()
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState, TrainError> {
    let (metadata, tensors) = read_checkpoint(path)?;
    let meta: BTreeMap<&str, &str> = metadata
        .lines()
        .filter_map(|l| l.split_once('='))
        .collect();
    let cfg = UNetConfig {
        arch: Arch::parse(meta_get(&meta, "arch")?)?,
        in_channels: meta_parse(&meta, "in_channels")?,
        frames_in: meta_parse(&meta, "frames_in")?,
        out_channels: meta_parse(&meta, "out_channels")?,
        depth: meta_parse(&meta, "depth")?,
        base_width: meta_parse(&meta, "base_width")?,
        dropout: meta_parse(&meta, "dropout")?,
    };
    cfg.validate()?;
    let pipeline = PipelineConfig {
        input_crop: meta_parse(&meta, "input_crop")?,
        patch_side: meta_parse(&meta, "patch_side")?,
        upsample_factor: meta_parse(&meta, "upsample_factor")?,
    };
    pipeline.validate(cfg.depth)?;

    let reference = init_params(&cfg, &mut RngState::from_seed(0));
    let mut groups: [BTreeMap<String, Tensor>; 3] =
        [BTreeMap::new(), BTreeMap::new(), BTreeMap::new()];
    for (name, t) in tensors {
        let (prefix, rest) = name.split_once('/').ok_or_else(|| {
            ModelError::Malformed(format!("unprefixed checkpoint tensor `{name}`"))
        })?;
        let slot = match prefix {
            "param" => 0,
            "adam_m" => 1,
            "adam_v" => 2,
            other => {
                return Err(ModelError::Malformed(format!(
                    "unknown checkpoint tensor group `{other}`"
                ))
                .into())
            }
        };
        match reference.get(rest) {
            Some(r) if r.shape() == t.shape() => {}
            Some(r) => {
                return Err(ModelError::Geometry(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    r.shape()
                ))
                .into())
            }
            None => {
                return Err(ModelError::Geometry(format!(
                    "tensor `{name}` does not belong to this architecture"
                ))
                .into())
            }
        }
        groups[slot].insert(rest.to_string(), t);
    }
    for (group, label) in groups.iter().zip(["param", "adam_m", "adam_v"]) {
        if group.len() != reference.len() {
            return Err(ModelError::Geometry(format!(
                "checkpoint holds {} `{label}` tensors, expected {}",
                group.len(),
                reference.len()
            ))
            .into());
        }
    }
    let [params, adam_m, adam_v] = groups;
    Ok(ModelState {
        cfg,
        pipeline,
        params,
        adam_m,
        adam_v,
        step: meta_parse(&meta, "step")?,
        epoch: meta_parse(&meta, "epoch")?,
        best_val_loss: meta_parse(&meta, "best_val_loss")?,
        lr: meta_parse(&meta, "lr")?,
    })
}

/// Finite-difference check of the whole chain: network forward, patch crop,
/// loss, loss gradient, network backward. Probes `probes` random weights and
/// returns the max relative error. `grad_bias` is added to every analytic
/// derivative so a deliberately wrong gradient can be demonstrated to fail.
pub fn end_to_end_grad_check(seed: u64, probes: usize, grad_bias: f64) -> f64 {
    let cfg = UNetConfig {
        arch: Arch::UNet2d,
        in_channels: 2,
        frames_in: 1,
        out_channels: 2 * NUM_BINS,
        depth: 1,
        base_width: 2,
        dropout: 0.0,
    };
    let pipeline = PipelineConfig { input_crop: 8, patch_side: 8, upsample_factor: 1 };
    let bins = RainBins::default();
    let loss_cfg = LossConfig::default();
    let timesteps = 2;
    let mut rng = RngState::from_seed(seed);
    let params = init_params(&cfg, &mut rng);
    let x = Tensor::new(
        vec![2, 8, 8],
        (0..128).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
    );
    let rates = Tensor::new(
        vec![timesteps, 8, 8],
        (0..timesteps * 64)
            .map(|_| bins.representatives[rng.uniform_usize(NUM_BINS)])
            .collect(),
    );

    let loss_of = |p: &BTreeMap<String, Tensor>| -> (f64, Option<(Tensor, super::unet::SampleCache)>) {
        let (logits, cache) =
            forward_sample(p, &cfg, &x, false, &mut RngState::from_seed(0)).expect("forward");
        let patch = logits_patch(&logits, timesteps, &pipeline).expect("patch");
        let res = loss_with_grad(&patch, &rates, &bins, &loss_cfg).expect("loss");
        (res.value, Some((res.grad_logits, cache)))
    };

    let (_, pair) = loss_of(&params);
    let (grad_logits, cache) = pair.unwrap();
    let gpatch = grad_logits
        .reshape(vec![timesteps * NUM_BINS, 8, 8])
        .expect("same element count");
    let gfull = embed_patch_grad(&gpatch, cfg.out_channels, pipeline.pad_side(cfg.depth));
    let mut grads = zeros_like(&params);
    backward_sample(&params, &cfg, &cache, &gfull, &mut grads).expect("backward");

    let names: Vec<String> = params.keys().cloned().collect();
    let mut probe_rng = RngState::from_seed(seed ^ 0x5EED);
    let step = 1e-2f32;
    let mut max_rel = 0.0f64;
    for _ in 0..probes {
        let name = &names[probe_rng.uniform_usize(names.len())];
        let i = probe_rng.uniform_usize(params[name].len());
        let mut pp = params.clone();
        pp.get_mut(name).unwrap().data_mut()[i] += step;
        let (vp, _) = loss_of(&pp);
        let mut pm = params.clone();
        pm.get_mut(name).unwrap().data_mut()[i] -= step;
        let (vm, _) = loss_of(&pm);
        let numeric = (vp - vm) / (2.0 * f64::from(step));
        let analytic = f64::from(grads[name].data()[i]) + grad_bias;
        let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    max_rel
}

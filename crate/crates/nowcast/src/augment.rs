//! Training-time augmentation: temporal frame interpolation, flips, center
//! crops and the block upsampling that restores full-resolution predictions.

use crate::tensor::{lerp, Tensor};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("mixing factor {0} outside [0,1]")]
    LambdaOutOfRange(f32),
    #[error("crop side {side} exceeds image size {h}x{w}")]
    CropTooLarge { side: usize, h: usize, w: usize },
    #[error("malformed sample: {0}")]
    Malformed(String),
}

/// Paired satellite input sequence (F_in, C, H_s, W_s) and radar target
/// sequence (T, H_r, W_r).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub region_id: u32,
    pub start_index: u32,
}

/// A sample extended with one trailing input frame and one trailing target
/// frame, enabling interpolation one fractional step forward.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleExt {
    /// (F_in + 1, C, H_s, W_s)
    pub inputs: Tensor,
    /// (T + 1, H_r, W_r)
    pub targets: Tensor,
    pub region_id: u32,
    pub start_index: u32,
}

impl SampleExt {
    pub fn frames_in(&self) -> usize {
        self.inputs.shape()[0] - 1
    }

    pub fn timesteps(&self) -> usize {
        self.targets.shape()[0] - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipKind {
    Identity,
    VFlip,
    HFlip,
    VHFlip,
}

impl FlipKind {
    pub const ALL: [FlipKind; 4] =
        [FlipKind::Identity, FlipKind::VFlip, FlipKind::HFlip, FlipKind::VHFlip];
}

fn frame_slice(t: &Tensor, frame: usize) -> Tensor {
    let shape = t.shape();
    let frame_len: usize = shape[1..].iter().product();
    let data = t.data()[frame * frame_len..(frame + 1) * frame_len].to_vec();
    Tensor::new(shape[1..].to_vec(), data)
}

fn stack_frames(frames: &[Tensor]) -> Tensor {
    let inner = frames[0].shape().to_vec();
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(&inner);
    let mut data = Vec::with_capacity(frames.len() * frames[0].len());
    for f in frames {
        data.extend_from_slice(f.data());
    }
    Tensor::new(shape, data)
}

/// Temporal frame interpolation: shifts both input and target sequences by
/// the same fractional step lam, blending each frame with its successor.
pub fn tfi(ext: &SampleExt, lam: f32) -> Result<Sample, AugmentError> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(AugmentError::LambdaOutOfRange(lam));
    }
    let f_in = ext.frames_in();
    let t_out = ext.timesteps();
    if f_in == 0 || t_out == 0 {
        return Err(AugmentError::Malformed(
            "extended sample needs at least 2 input and 2 target frames".into(),
        ));
    }
    let mut in_frames = Vec::with_capacity(f_in);
    for f in 0..f_in {
        let a = frame_slice(&ext.inputs, f);
        let b = frame_slice(&ext.inputs, f + 1);
        in_frames.push(lerp(&a, &b, lam).expect("adjacent frames share a shape"));
    }
    let mut tgt_frames = Vec::with_capacity(t_out);
    for t in 0..t_out {
        let a = frame_slice(&ext.targets, t);
        let b = frame_slice(&ext.targets, t + 1);
        tgt_frames.push(lerp(&a, &b, lam).expect("adjacent frames share a shape"));
    }
    Ok(Sample {
        inputs: stack_frames(&in_frames),
        targets: stack_frames(&tgt_frames),
        region_id: ext.region_id,
        start_index: ext.start_index,
    })
}

/// Flips the last two axes of a tensor of any rank >= 2.
pub fn flip_spatial(t: &Tensor, kind: FlipKind) -> Tensor {
    if kind == FlipKind::Identity {
        return t.clone();
    }
    let shape = t.shape().to_vec();
    let rank = shape.len();
    let (h, w) = (shape[rank - 2], shape[rank - 1]);
    let planes: usize = shape[..rank - 2].iter().product();
    let (fv, fh) = match kind {
        FlipKind::Identity => (false, false),
        FlipKind::VFlip => (true, false),
        FlipKind::HFlip => (false, true),
        FlipKind::VHFlip => (true, true),
    };
    let mut out = vec![0.0f32; t.len()];
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h {
            let si = if fv { h - 1 - i } else { i };
            for j in 0..w {
                let sj = if fh { w - 1 - j } else { j };
                out[base + i * w + j] = t.data()[base + si * w + sj];
            }
        }
    }
    Tensor::new(shape, out)
}

/// Applies the same spatial flip to inputs and targets; metadata unchanged.
pub fn geometric(s: &Sample, kind: FlipKind) -> Sample {
    Sample {
        inputs: flip_spatial(&s.inputs, kind),
        targets: flip_spatial(&s.targets, kind),
        region_id: s.region_id,
        start_index: s.start_index,
    }
}

/// Center crop of the last two axes to side x side, floor offsets.
pub fn center_crop(t: &Tensor, side: usize) -> Result<Tensor, AugmentError> {
    let shape = t.shape().to_vec();
    let rank = shape.len();
    let (h, w) = (shape[rank - 2], shape[rank - 1]);
    if side > h || side > w {
        return Err(AugmentError::CropTooLarge { side, h, w });
    }
    let (oy, ox) = ((h - side) / 2, (w - side) / 2);
    let planes: usize = shape[..rank - 2].iter().product();
    let mut out = Vec::with_capacity(planes * side * side);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..side {
            let row = base + (oy + i) * w + ox;
            out.extend_from_slice(&t.data()[row..row + side]);
        }
    }
    let mut out_shape = shape[..rank - 2].to_vec();
    out_shape.push(side);
    out_shape.push(side);
    Ok(Tensor::new(out_shape, out))
}

/// Center crop of satellite inputs (F,C,H,W) -> (F,C,side,side).
pub fn crop_input(inputs: &Tensor, side: usize) -> Result<Tensor, AugmentError> {
    center_crop(inputs, side)
}

/// Center crop of radar targets (T,H,W) -> (T,side,side).
pub fn crop_target(targets: &Tensor, side: usize) -> Result<Tensor, AugmentError> {
    center_crop(targets, side)
}

/// Nearest-neighbor block replication of each timestep.
pub fn upsample_restore(patch: &Tensor, factor: usize) -> Tensor {
    assert!(factor >= 1);
    if factor == 1 {
        return patch.clone();
    }
    let shape = patch.shape();
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0f32; t * oh * ow];
    for ti in 0..t {
        for i in 0..oh {
            for j in 0..ow {
                out[ti * oh * ow + i * ow + j] =
                    patch.data()[ti * h * w + (i / factor) * w + (j / factor)];
            }
        }
    }
    Tensor::new(vec![t, oh, ow], out)
}

/// Average-pools each timestep of (T,H,W) with a factor x factor window.
/// Inverse-direction companion of `upsample_restore`, used to build
/// satellite-resolution training targets from radar-resolution truth.
pub fn avg_pool_target(targets: &Tensor, factor: usize) -> Tensor {
    assert!(factor >= 1);
    if factor == 1 {
        return targets.clone();
    }
    let shape = targets.shape();
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0f32; t * oh * ow];
    for ti in 0..t {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0f64;
                for di in 0..factor {
                    for dj in 0..factor {
                        acc += f64::from(
                            targets.data()[ti * h * w + (i * factor + di) * w + j * factor + dj],
                        );
                    }
                }
                out[ti * oh * ow + i * ow + j] = (acc * norm) as f32;
            }
        }
    }
    Tensor::new(vec![t, oh, ow], out)
}

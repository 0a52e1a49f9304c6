//! U-Net assembly: parameter layout, per-sample forward with activation
//! cache, and the matching backward pass.
//!
//! Layer list for depth D, base width B (widths w_l = B * 2^l):
//!   enc{l}:   conv1 (prev -> w_l), conv2 (w_l -> w_l), each 3x3 + ReLU,
//!             then dropout and 2x2 max-pool
//!   bottleneck: conv1 (w_{D-1} -> w_D), conv2 (w_D -> w_D)
//!   dec{l}:   nearest x2 upsample, concat skip, conv1 (w_{l+1}+w_l -> w_l),
//!             conv2 (w_l -> w_l)
//!   head:     1x1 conv (w_0 -> out_channels), no activation
//! The 3D variant swaps 3x3 convs for 3x3x3 over an explicit time axis,
//! pools and upsamples spatially only, and flattens time into channels
//! before the head.

use super::layers::*;
use crate::tensor::{RngState, Tensor};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("spatial size {h}x{w} must be divisible by {required}")]
    IndivisibleSpatial { h: usize, w: usize, required: usize },
    #[error("input shape {got:?} does not match expected {expected:?}")]
    InputShape { got: Vec<usize>, expected: Vec<usize> },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint geometry mismatch: {0}")]
    Geometry(String),
    #[error("{0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    UNet2d,
    UNet3d,
}

impl Arch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::UNet2d => "unet2d",
            Arch::UNet3d => "unet3d",
        }
    }

    pub fn parse(s: &str) -> Result<Arch, ModelError> {
        match s {
            "unet2d" => Ok(Arch::UNet2d),
            "unet3d" => Ok(Arch::UNet3d),
            other => Err(ModelError::InvalidConfig(format!("unknown arch `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub arch: Arch,
    /// 2D: stacked frames x bands. 3D: bands only.
    pub in_channels: usize,
    /// Time extent of the 3D variant; the 2D path ignores it.
    pub frames_in: usize,
    /// T * 6 logit channels.
    pub out_channels: usize,
    pub depth: usize,
    pub base_width: usize,
    pub dropout: f32,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.depth < 1 || self.base_width < 1 {
            return Err(ModelError::InvalidConfig(
                "depth and base_width must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig("dropout must be in [0,1)".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(ModelError::InvalidConfig("channel counts must be >= 1".into()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kernel {
    /// 2D kxk kernel (1x1 for the head).
    Plane(usize),
    /// 3D 3xkxk kernel.
    Volume(usize),
}

struct LayerSpec {
    name: String,
    cout: usize,
    cin: usize,
    kernel: Kernel,
}

impl LayerSpec {
    fn weight_shape(&self) -> Vec<usize> {
        match self.kernel {
            Kernel::Plane(k) => vec![self.cout, self.cin, k, k],
            Kernel::Volume(k) => vec![self.cout, self.cin, 3, k, k],
        }
    }

    fn fan_in(&self) -> usize {
        match self.kernel {
            Kernel::Plane(k) => self.cin * k * k,
            Kernel::Volume(k) => self.cin * 3 * k * k,
        }
    }
}

fn layer_specs(cfg: &UNetConfig) -> Vec<LayerSpec> {
    let conv = |name: String, cin: usize, cout: usize| {
        let kernel = match cfg.arch {
            Arch::UNet2d => Kernel::Plane(3),
            Arch::UNet3d => Kernel::Volume(3),
        };
        LayerSpec { name, cout, cin, kernel }
    };
    let mut specs = Vec::new();
    let mut prev = cfg.in_channels;
    for l in 0..cfg.depth {
        let w = cfg.width(l);
        specs.push(conv(format!("enc{l}.conv1"), prev, w));
        specs.push(conv(format!("enc{l}.conv2"), w, w));
        prev = w;
    }
    let wb = cfg.width(cfg.depth);
    specs.push(conv("bottleneck.conv1".into(), prev, wb));
    specs.push(conv("bottleneck.conv2".into(), wb, wb));
    for l in (0..cfg.depth).rev() {
        let w = cfg.width(l);
        specs.push(conv(format!("dec{l}.conv1"), cfg.width(l + 1) + w, w));
        specs.push(conv(format!("dec{l}.conv2"), w, w));
    }
    let head_in = match cfg.arch {
        Arch::UNet2d => cfg.base_width,
        Arch::UNet3d => cfg.base_width * cfg.frames_in,
    };
    specs.push(LayerSpec {
        name: "head".into(),
        cout: cfg.out_channels,
        cin: head_in,
        kernel: Kernel::Plane(1),
    });
    specs
}

/// Total number of trainable scalars, from the layer list alone.
pub fn parameter_count(cfg: &UNetConfig) -> usize {
    layer_specs(cfg)
        .iter()
        .map(|s| s.weight_shape().iter().product::<usize>() + s.cout)
        .sum()
}

/// Fan-in-scaled uniform weights, zero biases; deterministic given the rng.
pub fn init_params(cfg: &UNetConfig, rng: &mut RngState) -> BTreeMap<String, Tensor> {
    let mut params = BTreeMap::new();
    for spec in layer_specs(cfg) {
        let limit = 1.0 / (spec.fan_in() as f32).sqrt();
        let shape = spec.weight_shape();
        let n: usize = shape.iter().product();
        let weight = Tensor::new(
            shape,
            (0..n).map(|_| rng.uniform_range(-limit, limit)).collect(),
        );
        params.insert(format!("{}.weight", spec.name), weight);
        params.insert(format!("{}.bias", spec.name), Tensor::zeros(vec![spec.cout]));
    }
    params
}

pub fn zeros_like(params: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    params
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
        .collect()
}

struct BlockCache {
    input: Tensor,
    relu1: Tensor,
    relu2: Tensor,
    drop_mask: Option<Vec<f32>>,
}

pub struct SampleCache {
    enc: Vec<BlockCache>,
    pool_shapes: Vec<Vec<usize>>,
    pool_indices: Vec<Vec<u32>>,
    bottleneck: BlockCache,
    dec: Vec<BlockCache>,
    head_input: Tensor,
    reshaped_3d: bool,
}

fn conv_any(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    if w.rank() == 5 {
        conv3d_forward(x, w, b)
    } else {
        conv2d_forward(x, w, b)
    }
}

fn conv_any_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    grad_x: Option<&mut Tensor>,
    grad_w: &mut Tensor,
    grad_b: &mut Tensor,
) {
    if w.rank() == 5 {
        conv3d_backward(x, w, grad_out, grad_x, grad_w, grad_b)
    } else {
        conv2d_backward(x, w, grad_out, grad_x, grad_w, grad_b)
    }
}

#[allow(clippy::too_many_arguments)]
fn block_forward(
    params: &BTreeMap<String, Tensor>,
    name: &str,
    input: Tensor,
    dropout: f32,
    train_mode: bool,
    rng: &mut RngState,
) -> (Tensor, BlockCache) {
    let w1 = &params[&format!("{name}.conv1.weight")];
    let b1 = &params[&format!("{name}.conv1.bias")];
    let w2 = &params[&format!("{name}.conv2.weight")];
    let b2 = &params[&format!("{name}.conv2.bias")];
    let relu1 = relu_forward(&conv_any(&input, w1, b1));
    let relu2 = relu_forward(&conv_any(&relu1, w2, b2));
    let (out, drop_mask) = if train_mode && dropout > 0.0 {
        let (o, m) = dropout_forward(&relu2, dropout, rng);
        (o, Some(m))
    } else {
        (relu2.clone(), None)
    };
    (out, BlockCache { input, relu1, relu2, drop_mask })
}

fn block_backward(
    params: &BTreeMap<String, Tensor>,
    grads: &mut BTreeMap<String, Tensor>,
    name: &str,
    cache: &BlockCache,
    grad_out: &Tensor,
) -> Tensor {
    let g = match &cache.drop_mask {
        Some(mask) => dropout_backward(mask, grad_out),
        None => grad_out.clone(),
    };
    let g2 = relu_backward(&cache.relu2, &g);
    let w2 = &params[&format!("{name}.conv2.weight")];
    let mut g_relu1 = Tensor::zeros(cache.relu1.shape().to_vec());
    conv_backward_into(grads, &cache.relu1, w2, &g2, Some(&mut g_relu1), &format!("{name}.conv2"));
    let g1 = relu_backward(&cache.relu1, &g_relu1);
    let w1 = &params[&format!("{name}.conv1.weight")];
    let mut g_input = Tensor::zeros(cache.input.shape().to_vec());
    conv_backward_into(grads, &cache.input, w1, &g1, Some(&mut g_input), &format!("{name}.conv1"));
    g_input
}

fn conv_backward_into(
    grads: &mut BTreeMap<String, Tensor>,
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    grad_x: Option<&mut Tensor>,
    name: &str,
) {
    let mut gw = Tensor::zeros(w.shape().to_vec());
    let mut gb = Tensor::zeros(vec![w.shape()[0]]);
    conv_any_backward(x, w, grad_out, grad_x, &mut gw, &mut gb);
    accumulate_grad(grads, &format!("{name}.weight"), &gw);
    accumulate_grad(grads, &format!("{name}.bias"), &gb);
}

fn accumulate_grad(grads: &mut BTreeMap<String, Tensor>, key: &str, add: &Tensor) {
    let slot = grads.get_mut(key).expect("grad entry");
    for (a, &b) in slot.data_mut().iter_mut().zip(add.data()) {
        *a += b;
    }
}

/// Forward pass for one sample. 2D input: (in_channels, h, w); 3D input:
/// (in_channels, frames_in, h, w). Output logits: (out_channels, h, w).
pub fn forward_sample(
    params: &BTreeMap<String, Tensor>,
    cfg: &UNetConfig,
    input: &Tensor,
    train_mode: bool,
    rng: &mut RngState,
) -> Result<(Tensor, SampleCache), ModelError> {
    cfg.validate()?;
    let expected: Vec<usize> = match cfg.arch {
        Arch::UNet2d => vec![cfg.in_channels],
        Arch::UNet3d => vec![cfg.in_channels, cfg.frames_in],
    };
    if input.shape().len() != expected.len() + 2
        || input.shape()[..expected.len()] != expected[..]
    {
        return Err(ModelError::InputShape {
            got: input.shape().to_vec(),
            expected,
        });
    }
    let rank = input.rank();
    let (h, w) = (input.shape()[rank - 2], input.shape()[rank - 1]);
    let required = 1usize << cfg.depth;
    if h % required != 0 || w % required != 0 {
        return Err(ModelError::IndivisibleSpatial { h, w, required });
    }

    let mut enc = Vec::with_capacity(cfg.depth);
    let mut pool_shapes = Vec::with_capacity(cfg.depth);
    let mut pool_indices = Vec::with_capacity(cfg.depth);
    let mut x = input.clone();
    for l in 0..cfg.depth {
        let (out, cache) =
            block_forward(params, &format!("enc{l}"), x, cfg.dropout, train_mode, rng);
        pool_shapes.push(out.shape().to_vec());
        let (pooled, idx) = maxpool2_forward(&out);
        enc.push(cache);
        pool_indices.push(idx);
        x = pooled;
    }
    let (mut x, bottleneck) =
        block_forward(params, "bottleneck", x, cfg.dropout, train_mode, rng);
    let mut dec = Vec::with_capacity(cfg.depth);
    for l in (0..cfg.depth).rev() {
        let up = upsample2_forward(&x);
        // the skip is the pre-pool encoder output; rebuild it from the cache
        let skip = match &enc[l].drop_mask {
            Some(mask) => Tensor::new(
                enc[l].relu2.shape().to_vec(),
                enc[l]
                    .relu2
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| v * m)
                    .collect(),
            ),
            None => enc[l].relu2.clone(),
        };
        let joined = concat_channels(&up, &skip);
        let (out, cache) =
            block_forward(params, &format!("dec{l}"), joined, cfg.dropout, train_mode, rng);
        dec.push(cache);
        x = out;
    }
    let (head_input, reshaped_3d) = match cfg.arch {
        Arch::UNet2d => (x, false),
        Arch::UNet3d => {
            // (w0, F, H, W) -> (w0*F, H, W); the layout already matches
            let shape = x.shape().to_vec();
            (
                x.reshape(vec![shape[0] * shape[1], shape[2], shape[3]])
                    .expect("same element count"),
                true,
            )
        }
    };
    let logits = conv2d_forward(
        &head_input,
        &params["head.weight"],
        &params["head.bias"],
    );
    Ok((
        logits,
        SampleCache {
            enc,
            pool_shapes,
            pool_indices,
            bottleneck,
            dec,
            head_input,
            reshaped_3d,
        },
    ))
}

/// Reverse pass; accumulates parameter gradients into `grads`.
pub fn backward_sample(
    params: &BTreeMap<String, Tensor>,
    cfg: &UNetConfig,
    cache: &SampleCache,
    grad_logits: &Tensor,
    grads: &mut BTreeMap<String, Tensor>,
) -> Result<(), ModelError> {
    if grad_logits.shape()[0] != cfg.out_channels {
        return Err(ModelError::InputShape {
            got: grad_logits.shape().to_vec(),
            expected: vec![cfg.out_channels],
        });
    }
    let mut g_head_in = Tensor::zeros(cache.head_input.shape().to_vec());
    conv_backward_into(
        grads,
        &cache.head_input,
        &params["head.weight"],
        grad_logits,
        Some(&mut g_head_in),
        "head",
    );
    let mut g = if cache.reshaped_3d {
        let shape = cache.dec.last().map(|c| c.relu2.shape().to_vec()).unwrap();
        g_head_in.reshape(shape).expect("same element count")
    } else {
        g_head_in
    };
    // decoder caches were pushed deepest-first: dec[i] holds level depth-1-i.
    // Backward walks levels 0, 1, ..., depth-1 away from the head.
    let mut g_skips: Vec<Option<Tensor>> = vec![None; cfg.depth];
    for l in 0..cfg.depth {
        let block = &cache.dec[cfg.depth - 1 - l];
        let g_joined = block_backward(params, grads, &format!("dec{l}"), block, &g);
        let up_channels = block.input.shape()[0] - cache.enc[l].relu2.shape()[0];
        let (g_up, g_skip) = split_channels(&g_joined, up_channels);
        g_skips[l] = Some(g_skip);
        g = upsample2_backward(&g_up);
    }
    g = block_backward(params, grads, "bottleneck", &cache.bottleneck, &g);
    for l in (0..cfg.depth).rev() {
        // both the pool branch and the skip branch consumed the block output
        // after dropout, so their gradients add before block_backward, which
        // applies the mask once
        let mut g_out = maxpool2_backward(&cache.pool_shapes[l], &cache.pool_indices[l], &g);
        if let Some(gs) = &g_skips[l] {
            for (a, &b) in g_out.data_mut().iter_mut().zip(gs.data()) {
                *a += b;
            }
        }
        g = block_backward(params, grads, &format!("enc{l}"), &cache.enc[l], &g_out);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> UNetConfig {
        UNetConfig {
            arch: Arch::UNet2d,
            in_channels: 1,
            frames_in: 1,
            out_channels: 6,
            depth: 1,
            base_width: 1,
            dropout: 0.0,
        }
    }

    #[test]
    fn parameter_count_hand_checked_depth1_width1() {
        // enc0: 1->1 (10) + 1->1 (10); bottleneck: 1->2 (20) + 2->2 (38);
        // dec0: 3->1 (28) + 1->1 (10); head 1x1 1->6 (12). Total 128.
        assert_eq!(parameter_count(&tiny_cfg()), 128);
    }

    #[test]
    fn init_matches_count_and_is_deterministic() {
        let cfg = UNetConfig {
            arch: Arch::UNet2d,
            in_channels: 12,
            frames_in: 4,
            out_channels: 24,
            depth: 3,
            base_width: 16,
            dropout: 0.0,
        };
        let params = init_params(&cfg, &mut RngState::from_seed(0));
        let total: usize = params.values().map(|t| t.len()).sum();
        assert_eq!(total, parameter_count(&cfg));
        let again = init_params(&cfg, &mut RngState::from_seed(0));
        assert_eq!(params, again);
        for (name, t) in &params {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} not zero");
            }
        }
    }

    #[test]
    fn forward_shape_contract() {
        let cfg = UNetConfig {
            arch: Arch::UNet2d,
            in_channels: 44,
            frames_in: 4,
            out_channels: 96,
            depth: 3,
            base_width: 4,
            dropout: 0.0,
        };
        let params = init_params(&cfg, &mut RngState::from_seed(1));
        let x = Tensor::zeros(vec![44, 32, 32]);
        let (logits, _) =
            forward_sample(&params, &cfg, &x, false, &mut RngState::from_seed(0)).unwrap();
        assert_eq!(logits.shape(), &[96, 32, 32]);
    }

    #[test]
    fn forward_rejects_indivisible_sizes() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, &mut RngState::from_seed(0));
        let x = Tensor::zeros(vec![1, 7, 8]);
        assert_eq!(
            forward_sample(&params, &cfg, &x, false, &mut RngState::from_seed(0))
                .map(|_| ())
                .unwrap_err(),
            ModelError::IndivisibleSpatial { h: 7, w: 8, required: 2 }
        );
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let cfg = tiny_cfg();
        let params: BTreeMap<String, Tensor> = init_params(&cfg, &mut RngState::from_seed(0))
            .into_iter()
            .map(|(k, v)| (k, Tensor::zeros(v.shape().to_vec())))
            .collect();
        let x = Tensor::filled(vec![1, 8, 8], 3.0);
        let (logits, _) =
            forward_sample(&params, &cfg, &x, false, &mut RngState::from_seed(0)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = UNetConfig { dropout: 0.5, ..tiny_cfg() };
        let params = init_params(&cfg, &mut RngState::from_seed(3));
        let x = Tensor::new(vec![1, 8, 8], (0..64).map(|v| v as f32 * 0.1).collect());
        let (a, _) = forward_sample(&params, &cfg, &x, false, &mut RngState::from_seed(1)).unwrap();
        let (b, _) = forward_sample(&params, &cfg, &x, false, &mut RngState::from_seed(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unet3d_matches_logits_shape() {
        let cfg2 = UNetConfig {
            arch: Arch::UNet2d,
            in_channels: 12,
            frames_in: 4,
            out_channels: 24,
            depth: 2,
            base_width: 4,
            dropout: 0.0,
        };
        let cfg3 = UNetConfig { arch: Arch::UNet3d, in_channels: 3, ..cfg2.clone() };
        let p2 = init_params(&cfg2, &mut RngState::from_seed(0));
        let p3 = init_params(&cfg3, &mut RngState::from_seed(0));
        let x2 = Tensor::zeros(vec![12, 16, 16]);
        let x3 = Tensor::zeros(vec![3, 4, 16, 16]);
        let (l2, _) = forward_sample(&p2, &cfg2, &x2, false, &mut RngState::from_seed(0)).unwrap();
        let (l3, _) = forward_sample(&p3, &cfg3, &x3, false, &mut RngState::from_seed(0)).unwrap();
        assert_eq!(l2.shape(), l3.shape());
    }

    fn scalar_loss(logits: &Tensor, coef: &[f32]) -> f64 {
        logits
            .data()
            .iter()
            .zip(coef)
            .map(|(&y, &c)| f64::from(y) * f64::from(c))
            .sum()
    }

    /// ReLU sign patterns and pool argmax choices. The network is piecewise
    /// linear; central differences are only valid when both perturbed runs
    /// stay on the same linear piece.
    fn activation_signature(cache: &SampleCache) -> Vec<u32> {
        let mut sig = Vec::new();
        let mut push_block = |b: &BlockCache| {
            for t in [&b.relu1, &b.relu2] {
                sig.extend(t.data().iter().map(|&v| u32::from(v > 0.0)));
            }
        };
        for b in &cache.enc {
            push_block(b);
        }
        push_block(&cache.bottleneck);
        for b in &cache.dec {
            push_block(b);
        }
        for idx in &cache.pool_indices {
            sig.extend_from_slice(idx);
        }
        sig
    }

    fn end_to_end_check(cfg: &UNetConfig, input_shape: Vec<usize>) {
        let mut rng = RngState::from_seed(5);
        let params = init_params(cfg, &mut rng);
        let n_in: usize = input_shape.iter().product();
        let x = Tensor::new(
            input_shape,
            (0..n_in).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
        );
        let (logits, cache) =
            forward_sample(&params, cfg, &x, false, &mut RngState::from_seed(0)).unwrap();
        let coef: Vec<f32> = (0..logits.len()).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let grad_logits = Tensor::new(logits.shape().to_vec(), coef.clone());
        let mut grads = zeros_like(&params);
        backward_sample(&params, cfg, &cache, &grad_logits, &mut grads).unwrap();

        // probe random weights with central differences, skipping probes that
        // kick an activation across a kink
        let mut probe_rng = RngState::from_seed(9);
        let names: Vec<String> = params.keys().cloned().collect();
        let mut checked = 0;
        let mut attempts = 0;
        let mut max_rel = 0.0f64;
        while checked < 50 && attempts < 500 {
            attempts += 1;
            let name = &names[probe_rng.uniform_usize(names.len())];
            let len = params[name].len();
            let i = probe_rng.uniform_usize(len);
            let h = 1e-2f32;
            let mut pp = params.clone();
            pp.get_mut(name).unwrap().data_mut()[i] += h;
            let (lp, cp) =
                forward_sample(&pp, cfg, &x, false, &mut RngState::from_seed(0)).unwrap();
            let mut pm = params.clone();
            pm.get_mut(name).unwrap().data_mut()[i] -= h;
            let (lm, cm) =
                forward_sample(&pm, cfg, &x, false, &mut RngState::from_seed(0)).unwrap();
            if activation_signature(&cp) != activation_signature(&cm) {
                continue;
            }
            let num = (scalar_loss(&lp, &coef) - scalar_loss(&lm, &coef)) / (2.0 * f64::from(h));
            let ana = f64::from(grads[name].data()[i]);
            let rel = (ana - num).abs() / num.abs().max(1.0);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
        assert!(checked >= 30, "only {checked} smooth probes in {attempts} attempts");
        assert!(max_rel < 1e-2, "max rel error {max_rel}");
    }

    #[test]
    fn backward_matches_finite_differences_2d() {
        let cfg = UNetConfig {
            arch: Arch::UNet2d,
            in_channels: 2,
            frames_in: 1,
            out_channels: 6,
            depth: 1,
            base_width: 2,
            dropout: 0.0,
        };
        end_to_end_check(&cfg, vec![2, 8, 8]);
    }

    #[test]
    fn backward_matches_finite_differences_3d() {
        let cfg = UNetConfig {
            arch: Arch::UNet3d,
            in_channels: 2,
            frames_in: 3,
            out_channels: 6,
            depth: 1,
            base_width: 2,
            dropout: 0.0,
        };
        end_to_end_check(&cfg, vec![2, 3, 8, 8]);
    }

    #[test]
    fn zero_upstream_gradient_zero_param_gradients() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, &mut RngState::from_seed(2));
        let x = Tensor::filled(vec![1, 8, 8], 1.0);
        let (logits, cache) =
            forward_sample(&params, &cfg, &x, false, &mut RngState::from_seed(0)).unwrap();
        let grad_logits = Tensor::zeros(logits.shape().to_vec());
        let mut grads = zeros_like(&params);
        backward_sample(&params, &cfg, &cache, &grad_logits, &mut grads).unwrap();
        for (name, g) in &grads {
            assert!(g.data().iter().all(|&v| v == 0.0), "{name} nonzero");
        }
    }

    #[test]
    fn doubling_upstream_doubles_gradients() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, &mut RngState::from_seed(2));
        let mut rng = RngState::from_seed(8);
        let x = Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.uniform()).collect());
        let (logits, cache) =
            forward_sample(&params, &cfg, &x, false, &mut RngState::from_seed(0)).unwrap();
        let g1 = Tensor::new(
            logits.shape().to_vec(),
            (0..logits.len()).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
        );
        let g2 = g1.map(|v| 2.0 * v);
        let (logits2, cache2) =
            forward_sample(&params, &cfg, &x, false, &mut RngState::from_seed(0)).unwrap();
        assert_eq!(logits, logits2);
        let mut grads1 = zeros_like(&params);
        backward_sample(&params, &cfg, &cache, &g1, &mut grads1).unwrap();
        let mut grads2 = zeros_like(&params);
        backward_sample(&params, &cfg, &cache2, &g2, &mut grads2).unwrap();
        for (name, g) in &grads1 {
            for (a, b) in g.data().iter().zip(grads2[name].data()) {
                assert!((2.0 * a - b).abs() <= 1e-4 * b.abs().max(1e-3), "{name}");
            }
        }
    }
}

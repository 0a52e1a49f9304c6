//! Layer primitives with explicit forward/backward passes. All activations
//! are (C, H, W) tensors; the 3D variant threads a time axis as (C, F, H, W)
//! through the same convolution kernels.

use crate::tensor::{RngState, Tensor};

/// 2D convolution, stride 1, zero padding k/2 so spatial size is preserved.
/// x: (Cin,H,W), w: (Cout,Cin,k,k), b: (Cout).
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    debug_assert_eq!(w.shape()[1], cin);
    let pad = (k / 2) as isize;
    let mut out = vec![0.0f32; cout * h * wd];
    for co in 0..cout {
        let base_o = co * h * wd;
        let bias = b.data()[co];
        for v in &mut out[base_o..base_o + h * wd] {
            *v = bias;
        }
        for ci in 0..cin {
            let base_i = ci * h * wd;
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let wv = w.data()[((co * cin + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy.max(0)) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (wd as isize - dx.max(0)) as usize;
                    for y in y0..y1 {
                        let src = base_i + ((y as isize + dy) as usize) * wd;
                        let dst = base_o + y * wd;
                        for xc in x0..x1 {
                            out[dst + xc] += wv * x.data()[src + (xc as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, h, wd], out)
}

/// Accumulates conv2d gradients. `grad_x`, `grad_w`, `grad_b` are added into.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    grad_x: Option<&mut Tensor>,
    grad_w: &mut Tensor,
    grad_b: &mut Tensor,
) {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    for co in 0..cout {
        let base_o = co * h * wd;
        let mut acc = 0.0f64;
        for &g in &grad_out.data()[base_o..base_o + h * wd] {
            acc += f64::from(g);
        }
        grad_b.data_mut()[co] += acc as f32;
    }
    let gx = grad_x.map(|g| g.data_mut());
    let mut gx = gx;
    for co in 0..cout {
        let base_o = co * h * wd;
        for ci in 0..cin {
            let base_i = ci * h * wd;
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let widx = ((co * cin + ci) * k + ky) * k + kx;
                    let wv = w.data()[widx];
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy.max(0)) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (wd as isize - dx.max(0)) as usize;
                    let mut wacc = 0.0f32;
                    for y in y0..y1 {
                        let src = base_i + ((y as isize + dy) as usize) * wd;
                        let dst = base_o + y * wd;
                        if let Some(gx) = gx.as_deref_mut() {
                            for xc in x0..x1 {
                                let g = grad_out.data()[dst + xc];
                                wacc += g * x.data()[src + (xc as isize + dx) as usize];
                                gx[src + (xc as isize + dx) as usize] += wv * g;
                            }
                        } else {
                            for xc in x0..x1 {
                                let g = grad_out.data()[dst + xc];
                                wacc += g * x.data()[src + (xc as isize + dx) as usize];
                            }
                        }
                    }
                    grad_w.data_mut()[widx] += wacc;
                }
            }
        }
    }
}

/// 3D convolution with a 3-deep time kernel, zero padded on every axis.
/// x: (Cin,F,H,W), w: (Cout,Cin,3,k,k), b: (Cout).
pub fn conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (cin, f, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kt, k) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    debug_assert_eq!(kt, 3);
    let pad = (k / 2) as isize;
    let plane = h * wd;
    let mut out = vec![0.0f32; cout * f * plane];
    for co in 0..cout {
        let bias = b.data()[co];
        for v in &mut out[co * f * plane..(co + 1) * f * plane] {
            *v = bias;
        }
        for ci in 0..cin {
            for dt in 0..kt {
                let ofs = dt as isize - 1;
                for fo in 0..f {
                    let fi = fo as isize + ofs;
                    if fi < 0 || fi >= f as isize {
                        continue;
                    }
                    let base_i = (ci * f + fi as usize) * plane;
                    let base_o = (co * f + fo) * plane;
                    for ky in 0..k {
                        let dy = ky as isize - pad;
                        for kx in 0..k {
                            let dx = kx as isize - pad;
                            let wv = w.data()[(((co * cin + ci) * kt + dt) * k + ky) * k + kx];
                            let y0 = (-dy).max(0) as usize;
                            let y1 = (h as isize - dy.max(0)) as usize;
                            let x0 = (-dx).max(0) as usize;
                            let x1 = (wd as isize - dx.max(0)) as usize;
                            for y in y0..y1 {
                                let src = base_i + ((y as isize + dy) as usize) * wd;
                                let dst = base_o + y * wd;
                                for xc in x0..x1 {
                                    out[dst + xc] +=
                                        wv * x.data()[src + (xc as isize + dx) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, f, h, wd], out)
}

pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    grad_x: Option<&mut Tensor>,
    grad_w: &mut Tensor,
    grad_b: &mut Tensor,
) {
    let (cin, f, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kt, k) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let pad = (k / 2) as isize;
    let plane = h * wd;
    for co in 0..cout {
        let mut acc = 0.0f64;
        for &g in &grad_out.data()[co * f * plane..(co + 1) * f * plane] {
            acc += f64::from(g);
        }
        grad_b.data_mut()[co] += acc as f32;
    }
    let mut gx = grad_x.map(|g| g.data_mut());
    for co in 0..cout {
        for ci in 0..cin {
            for dt in 0..kt {
                let ofs = dt as isize - 1;
                for fo in 0..f {
                    let fi = fo as isize + ofs;
                    if fi < 0 || fi >= f as isize {
                        continue;
                    }
                    let base_i = (ci * f + fi as usize) * plane;
                    let base_o = (co * f + fo) * plane;
                    for ky in 0..k {
                        let dy = ky as isize - pad;
                        for kx in 0..k {
                            let dx = kx as isize - pad;
                            let widx = (((co * cin + ci) * kt + dt) * k + ky) * k + kx;
                            let wv = w.data()[widx];
                            let y0 = (-dy).max(0) as usize;
                            let y1 = (h as isize - dy.max(0)) as usize;
                            let x0 = (-dx).max(0) as usize;
                            let x1 = (wd as isize - dx.max(0)) as usize;
                            let mut wacc = 0.0f32;
                            for y in y0..y1 {
                                let src = base_i + ((y as isize + dy) as usize) * wd;
                                let dst = base_o + y * wd;
                                if let Some(gx) = gx.as_deref_mut() {
                                    for xc in x0..x1 {
                                        let g = grad_out.data()[dst + xc];
                                        wacc += g * x.data()[src + (xc as isize + dx) as usize];
                                        gx[src + (xc as isize + dx) as usize] += wv * g;
                                    }
                                } else {
                                    for xc in x0..x1 {
                                        let g = grad_out.data()[dst + xc];
                                        wacc += g * x.data()[src + (xc as isize + dx) as usize];
                                    }
                                }
                            }
                            grad_w.data_mut()[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Masks the gradient where the forward output was zero.
pub fn relu_backward(out: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor::new(
        grad_out.shape().to_vec(),
        grad_out
            .data()
            .iter()
            .zip(out.data())
            .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
            .collect(),
    )
}

/// 2x2 max pooling over the last two axes, returning argmax offsets for the
/// backward scatter. Works for both (C,H,W) and (C,F,H,W).
pub fn maxpool2_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let shape = x.shape().to_vec();
    let rank = shape.len();
    let (h, w) = (shape[rank - 2], shape[rank - 1]);
    let planes: usize = shape[..rank - 2].iter().product();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; planes * oh * ow];
    let mut idx = vec![0u32; planes * oh * ow];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_at = 0u32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let at = base + (oy * 2 + dy) * w + ox * 2 + dx;
                        if x.data()[at] > best {
                            best = x.data()[at];
                            best_at = at as u32;
                        }
                    }
                }
                out[p * oh * ow + oy * ow + ox] = best;
                idx[p * oh * ow + oy * ow + ox] = best_at;
            }
        }
    }
    let mut out_shape = shape[..rank - 2].to_vec();
    out_shape.push(oh);
    out_shape.push(ow);
    (Tensor::new(out_shape, out), idx)
}

pub fn maxpool2_backward(input_shape: &[usize], indices: &[u32], grad_out: &Tensor) -> Tensor {
    let mut grad = Tensor::zeros(input_shape.to_vec());
    for (i, &at) in indices.iter().enumerate() {
        grad.data_mut()[at as usize] += grad_out.data()[i];
    }
    grad
}

/// Nearest-neighbor x2 upsampling of the last two axes.
pub fn upsample2_forward(x: &Tensor) -> Tensor {
    let shape = x.shape().to_vec();
    let rank = shape.len();
    let (h, w) = (shape[rank - 2], shape[rank - 1]);
    let planes: usize = shape[..rank - 2].iter().product();
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0f32; planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for x2 in 0..ow {
                out[p * oh * ow + y * ow + x2] = x.data()[p * h * w + (y / 2) * w + x2 / 2];
            }
        }
    }
    let mut out_shape = shape[..rank - 2].to_vec();
    out_shape.push(oh);
    out_shape.push(ow);
    Tensor::new(out_shape, out)
}

pub fn upsample2_backward(grad_out: &Tensor) -> Tensor {
    let shape = grad_out.shape().to_vec();
    let rank = shape.len();
    let (oh, ow) = (shape[rank - 2], shape[rank - 1]);
    let planes: usize = shape[..rank - 2].iter().product();
    let (h, w) = (oh / 2, ow / 2);
    let mut out = vec![0.0f32; planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            for x2 in 0..ow {
                out[p * h * w + (y / 2) * w + x2 / 2] += grad_out.data()[p * oh * ow + y * ow + x2];
            }
        }
    }
    let mut out_shape = shape[..rank - 2].to_vec();
    out_shape.push(h);
    out_shape.push(w);
    Tensor::new(out_shape, out)
}

/// Concatenates along axis 0 (channels).
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let mut shape = a.shape().to_vec();
    debug_assert_eq!(&a.shape()[1..], &b.shape()[1..]);
    shape[0] += b.shape()[0];
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

pub fn split_channels(grad: &Tensor, first: usize) -> (Tensor, Tensor) {
    let shape = grad.shape();
    let inner: usize = shape[1..].iter().product();
    let mut sa = shape.to_vec();
    sa[0] = first;
    let mut sb = shape.to_vec();
    sb[0] = shape[0] - first;
    let a = Tensor::new(sa, grad.data()[..first * inner].to_vec());
    let b = Tensor::new(sb, grad.data()[first * inner..].to_vec());
    (a, b)
}

/// Inverted dropout: kept elements are scaled by 1/(1-p). Returns the output
/// and the multiplicative mask for the backward pass.
pub fn dropout_forward(x: &Tensor, p: f32, rng: &mut RngState) -> (Tensor, Vec<f32>) {
    debug_assert!((0.0..1.0).contains(&p));
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<f32> = (0..x.len())
        .map(|_| if rng.uniform() < p { 0.0 } else { scale })
        .collect();
    let out = Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
    );
    (out, mask)
}

pub fn dropout_backward(mask: &[f32], grad_out: &Tensor) -> Tensor {
    Tensor::new(
        grad_out.shape().to_vec(),
        grad_out.data().iter().zip(mask).map(|(&g, &m)| g * m).collect(),
    )
}

/// Zero-pads the last two axes to side x side, centered with floor offsets.
pub fn pad_spatial(x: &Tensor, side: usize) -> Tensor {
    let shape = x.shape().to_vec();
    let rank = shape.len();
    let (h, w) = (shape[rank - 2], shape[rank - 1]);
    assert!(side >= h && side >= w);
    if side == h && side == w {
        return x.clone();
    }
    let (oy, ox) = ((side - h) / 2, (side - w) / 2);
    let planes: usize = shape[..rank - 2].iter().product();
    let mut out = vec![0.0f32; planes * side * side];
    for p in 0..planes {
        for y in 0..h {
            let src = p * h * w + y * w;
            let dst = p * side * side + (y + oy) * side + ox;
            out[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
        }
    }
    let mut out_shape = shape[..rank - 2].to_vec();
    out_shape.push(side);
    out_shape.push(side);
    Tensor::new(out_shape, out)
}

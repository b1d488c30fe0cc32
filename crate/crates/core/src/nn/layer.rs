//! The six layer kinds and their forward/backward kernels.
//!
//! All kernels operate on a single sample (no batch axis). Image tensors are
//! laid out as `[channels, height, width]`.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{FedError, Result};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Fully connected layer. Accepts any input whose element count equals
    /// `in_features` and produces a vector of `out_features`.
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    },
    AvgPool2d {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    /// Normalizes over every element of an input of exactly `shape`, with an
    /// elementwise affine transform of the same shape.
    LayerNorm {
        shape: Vec<usize>,
    },
    Relu,
    Flatten,
}

fn conv_out(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl LayerSpec {
    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Dense {
            in_features,
            out_features,
        }
    }

    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }

    pub fn avg_pool2d(kernel: (usize, usize)) -> Self {
        LayerSpec::AvgPool2d {
            kernel,
            stride: kernel,
        }
    }

    pub fn layer_norm(shape: &[usize]) -> Self {
        LayerSpec::LayerNorm {
            shape: shape.to_vec(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::AvgPool2d { .. } => "avgpool2d",
            LayerSpec::LayerNorm { .. } => "layernorm",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Output shape for a given input shape, or a shape error naming `index`.
    pub fn output_shape(&self, input: &[usize], index: usize) -> Result<Vec<usize>> {
        let err = |detail: String| FedError::Shape {
            layer: index,
            detail,
        };
        let numel: usize = input.iter().product();
        match self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if numel != *in_features {
                    return Err(err(format!(
                        "dense expects {in_features} inputs, got shape {input:?}"
                    )));
                }
                Ok(vec![*out_features])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return Err(err(format!(
                        "conv2d expects [{in_channels}, H, W], got {input:?}"
                    )));
                }
                let h = conv_out(input[1], kernel.0, stride.0, padding.0);
                let w = conv_out(input[2], kernel.1, stride.1, padding.1);
                match (h, w) {
                    (Some(h), Some(w)) if h > 0 && w > 0 => Ok(vec![*out_channels, h, w]),
                    _ => Err(err(format!(
                        "conv2d output would be empty for input {input:?}"
                    ))),
                }
            }
            LayerSpec::AvgPool2d { kernel, stride } => {
                if input.len() != 3 {
                    return Err(err(format!("avgpool2d expects [C, H, W], got {input:?}")));
                }
                let h = conv_out(input[1], kernel.0, stride.0, 0);
                let w = conv_out(input[2], kernel.1, stride.1, 0);
                match (h, w) {
                    (Some(h), Some(w)) if h > 0 && w > 0 => Ok(vec![input[0], h, w]),
                    _ => Err(err(format!(
                        "avgpool2d output would be empty for input {input:?}"
                    ))),
                }
            }
            LayerSpec::LayerNorm { shape } => {
                if shape.as_slice() != input {
                    return Err(err(format!(
                        "layernorm over {shape:?} applied to input {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![numel]),
        }
    }

    /// Shapes of this layer's parameters, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => vec![vec![*out_features, *in_features], vec![*out_features]],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                vec![*out_channels, *in_channels, kernel.0, kernel.1],
                vec![*out_channels],
            ],
            LayerSpec::LayerNorm { shape } => vec![shape.clone(), shape.clone()],
            _ => Vec::new(),
        }
    }

    /// Fan-in used by the uniform initializer.
    pub fn fan_in(&self) -> usize {
        match self {
            LayerSpec::Dense { in_features, .. } => *in_features,
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel.0 * kernel.1,
            _ => 0,
        }
    }
}

/// Per-layer values cached by the forward pass.
#[derive(Debug, Clone)]
pub(crate) enum LayerCache {
    None,
    /// Normalized activations and `1 / sqrt(var + eps)`.
    Norm {
        xhat: Vec<f64>,
        inv_std: f64,
    },
}

/// Which entries of the input gradient a backward pass must produce.
#[derive(Debug, Clone, Copy)]
pub enum InputGrad<'a> {
    None,
    Full,
    /// Only the listed flat input positions; cheaper for a leading dense layer.
    Indices(&'a [usize]),
}

pub(crate) fn forward(
    spec: &LayerSpec,
    params: &[Tensor],
    input: &Tensor,
    out_shape: &[usize],
) -> (Tensor, LayerCache) {
    let x = input.data();
    match spec {
        LayerSpec::Dense {
            in_features,
            out_features,
        } => {
            let w = params[0].data();
            let mut y = params[1].data().to_vec();
            // Inputs are often sparse (image background, diagonal embedding channel).
            let nz: Vec<usize> = (0..*in_features).filter(|&i| x[i] != 0.0).collect();
            for (o, yo) in y.iter_mut().enumerate().take(*out_features) {
                let row = &w[o * in_features..(o + 1) * in_features];
                let mut acc = 0.0;
                for &i in &nz {
                    acc += row[i] * x[i];
                }
                *yo += acc;
            }
            (Tensor::vector(y), LayerCache::None)
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let (ih, iw) = (input.shape()[1], input.shape()[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let w = params[0].data();
            let b = params[1].data();
            let mut y = vec![0.0; out_channels * oh * ow];
            for oc in 0..*out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[oc];
                        for ic in 0..*in_channels {
                            for ky in 0..kernel.0 {
                                let iy = (oy * stride.0 + ky) as isize - padding.0 as isize;
                                if iy < 0 || iy >= ih as isize {
                                    continue;
                                }
                                for kx in 0..kernel.1 {
                                    let ix = (ox * stride.1 + kx) as isize - padding.1 as isize;
                                    if ix < 0 || ix >= iw as isize {
                                        continue;
                                    }
                                    let xi = x[(ic * ih + iy as usize) * iw + ix as usize];
                                    let wi = w
                                        [((oc * in_channels + ic) * kernel.0 + ky) * kernel.1 + kx];
                                    acc += wi * xi;
                                }
                            }
                        }
                        y[(oc * oh + oy) * ow + ox] = acc;
                    }
                }
            }
            (tensor_of(out_shape, y), LayerCache::None)
        }
        LayerSpec::AvgPool2d { kernel, stride } => {
            let (c, ih, iw) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let area = (kernel.0 * kernel.1) as f64;
            let mut y = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..kernel.0 {
                            for kx in 0..kernel.1 {
                                acc += x[(ch * ih + oy * stride.0 + ky) * iw + ox * stride.1 + kx];
                            }
                        }
                        y[(ch * oh + oy) * ow + ox] = acc / area;
                    }
                }
            }
            (tensor_of(out_shape, y), LayerCache::None)
        }
        LayerSpec::LayerNorm { .. } => {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
            let gamma = params[0].data();
            let beta = params[1].data();
            let y = xhat
                .iter()
                .zip(gamma.iter().zip(beta))
                .map(|(h, (g, b))| g * h + b)
                .collect();
            (tensor_of(out_shape, y), LayerCache::Norm { xhat, inv_std })
        }
        LayerSpec::Relu => {
            let y = x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            (tensor_of(out_shape, y), LayerCache::None)
        }
        LayerSpec::Flatten => (tensor_of(out_shape, x.to_vec()), LayerCache::None),
    }
}

fn tensor_of(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("layer kernels produce consistent shapes")
}

/// Backward through one layer. Accumulates parameter gradients into `grads`
/// (when given) and returns the gradient with respect to the layer input
/// according to `want`. For `InputGrad::Indices` the returned vector holds
/// only the requested positions.
pub(crate) fn backward(
    spec: &LayerSpec,
    params: &[Tensor],
    input: &Tensor,
    cache: &LayerCache,
    grad_out: &[f64],
    grads: Option<&mut [Tensor]>,
    want: InputGrad<'_>,
) -> Option<Vec<f64>> {
    let x = input.data();
    match spec {
        LayerSpec::Dense {
            in_features,
            out_features,
        } => {
            let w = params[0].data();
            if let Some(grads) = grads {
                let (gw, gb) = grads.split_at_mut(1);
                let gw = gw[0].data_mut();
                let gb = gb[0].data_mut();
                let nz: Vec<usize> = (0..*in_features).filter(|&i| x[i] != 0.0).collect();
                for o in 0..*out_features {
                    let g = grad_out[o];
                    gb[o] += g;
                    if g == 0.0 {
                        continue;
                    }
                    let row = &mut gw[o * in_features..(o + 1) * in_features];
                    for &i in &nz {
                        row[i] += g * x[i];
                    }
                }
            }
            match want {
                InputGrad::None => None,
                InputGrad::Full => {
                    let mut gx = vec![0.0; *in_features];
                    for o in 0..*out_features {
                        let g = grad_out[o];
                        if g == 0.0 {
                            continue;
                        }
                        let row = &w[o * in_features..(o + 1) * in_features];
                        for (gi, wi) in gx.iter_mut().zip(row) {
                            *gi += wi * g;
                        }
                    }
                    Some(gx)
                }
                InputGrad::Indices(idx) => Some(
                    idx.iter()
                        .map(|&i| {
                            (0..*out_features)
                                .map(|o| w[o * in_features + i] * grad_out[o])
                                .sum()
                        })
                        .collect(),
                ),
            }
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let (ih, iw) = (input.shape()[1], input.shape()[2]);
            let oh = (ih + 2 * padding.0 - kernel.0) / stride.0 + 1;
            let ow = (iw + 2 * padding.1 - kernel.1) / stride.1 + 1;
            let w = params[0].data();
            let need_input = !matches!(want, InputGrad::None);
            let mut gx = if need_input {
                vec![0.0; x.len()]
            } else {
                Vec::new()
            };
            let mut grads = grads;
            for oc in 0..*out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = grad_out[(oc * oh + oy) * ow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        if let Some(gr) = grads.as_deref_mut() {
                            gr[1].data_mut()[oc] += g;
                        }
                        for ic in 0..*in_channels {
                            for ky in 0..kernel.0 {
                                let iy = (oy * stride.0 + ky) as isize - padding.0 as isize;
                                if iy < 0 || iy >= ih as isize {
                                    continue;
                                }
                                for kx in 0..kernel.1 {
                                    let ix = (ox * stride.1 + kx) as isize - padding.1 as isize;
                                    if ix < 0 || ix >= iw as isize {
                                        continue;
                                    }
                                    let xi_idx = (ic * ih + iy as usize) * iw + ix as usize;
                                    let wi_idx =
                                        ((oc * in_channels + ic) * kernel.0 + ky) * kernel.1 + kx;
                                    if let Some(gr) = grads.as_deref_mut() {
                                        gr[0].data_mut()[wi_idx] += g * x[xi_idx];
                                    }
                                    if need_input {
                                        gx[xi_idx] += g * w[wi_idx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            select(gx, want)
        }
        LayerSpec::AvgPool2d { kernel, stride } => {
            if matches!(want, InputGrad::None) {
                return None;
            }
            let (c, ih, iw) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let oh = (ih - kernel.0) / stride.0 + 1;
            let ow = (iw - kernel.1) / stride.1 + 1;
            let area = (kernel.0 * kernel.1) as f64;
            let mut gx = vec![0.0; x.len()];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = grad_out[(ch * oh + oy) * ow + ox] / area;
                        for ky in 0..kernel.0 {
                            for kx in 0..kernel.1 {
                                gx[(ch * ih + oy * stride.0 + ky) * iw + ox * stride.1 + kx] += g;
                            }
                        }
                    }
                }
            }
            select(gx, want)
        }
        LayerSpec::LayerNorm { .. } => {
            let LayerCache::Norm { xhat, inv_std } = cache else {
                unreachable!("layernorm forward always records its cache")
            };
            if let Some(grads) = grads {
                let (gg, gb) = grads.split_at_mut(1);
                for (i, g) in grad_out.iter().enumerate() {
                    gg[0].data_mut()[i] += g * xhat[i];
                    gb[0].data_mut()[i] += g;
                }
            }
            if matches!(want, InputGrad::None) {
                return None;
            }
            let gamma = params[0].data();
            let n = x.len() as f64;
            let dxhat: Vec<f64> = grad_out.iter().zip(gamma).map(|(g, s)| g * s).collect();
            let mean_d = dxhat.iter().sum::<f64>() / n;
            let mean_dx = dxhat.iter().zip(xhat).map(|(d, h)| d * h).sum::<f64>() / n;
            let gx = dxhat
                .iter()
                .zip(xhat)
                .map(|(d, h)| inv_std * (d - mean_d - h * mean_dx))
                .collect();
            select(gx, want)
        }
        LayerSpec::Relu => {
            if matches!(want, InputGrad::None) {
                return None;
            }
            let gx = grad_out
                .iter()
                .zip(x)
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect();
            select(gx, want)
        }
        LayerSpec::Flatten => select(grad_out.to_vec(), want),
    }
}

fn select(full: Vec<f64>, want: InputGrad<'_>) -> Option<Vec<f64>> {
    match want {
        InputGrad::None => None,
        InputGrad::Full => Some(full),
        InputGrad::Indices(idx) => Some(idx.iter().map(|&i| full[i]).collect()),
    }
}

//! Feed-forward layer stacks with explicit forward traces and backward passes.
//!
//! A [`Network`] keeps every trainable parameter in one flat vector and every
//! non-trainable buffer (batch-norm running statistics) in another. Each
//! forward call returns a [`Trace`] that holds what its backward pass needs, so
//! one network may be applied several times inside a single loss and each
//! application differentiated independently.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::conv::{col2im, im2col, ConvGeometry};
use crate::error::{Error, Result};
use crate::parallel;
use crate::scalar::{gemm, Mat, Scalar};
use crate::tensor::{ItemShape, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for batch norm, dropout active.
    Train,
    /// Running statistics, dropout disabled.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    ConvTranspose {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        bias: bool,
    },
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    LeakyRelu {
        slope: f64,
    },
    Dropout {
        rate: f64,
    },
    Tanh,
    Sigmoid,
    Reshape {
        to: ItemShape,
    },
}

impl LayerKind {
    fn param_count(&self) -> usize {
        match *self {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            }
            | LayerKind::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => in_channels * out_channels * kernel * kernel + if bias { out_channels } else { 0 },
            LayerKind::Dense {
                inputs,
                outputs,
                bias,
            } => inputs * outputs + if bias { outputs } else { 0 },
            LayerKind::BatchNorm { channels, .. } => 2 * channels,
            _ => 0,
        }
    }

    fn state_count(&self) -> usize {
        match *self {
            LayerKind::BatchNorm { channels, .. } => 2 * channels,
            _ => 0,
        }
    }

    fn weight_count(&self) -> usize {
        match *self {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            }
            | LayerKind::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                ..
            } => in_channels * out_channels * kernel * kernel,
            LayerKind::Dense {
                inputs, outputs, ..
            } => inputs * outputs,
            LayerKind::BatchNorm { channels, .. } => channels,
            _ => 0,
        }
    }

    fn output_shape(&self, input: ItemShape) -> Result<ItemShape> {
        let bad = |expected: String| Err(Error::shape(format!("{self:?}"), expected, input));
        match *self {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                ..
            } => {
                if input.c != in_channels
                    || input.h + 2 * pad < kernel
                    || input.w + 2 * pad < kernel
                {
                    return bad(format!("{in_channels} channels, extent >= kernel"));
                }
                let g = ConvGeometry {
                    channels: in_channels,
                    height: input.h,
                    width: input.w,
                    kernel,
                    stride,
                    pad,
                };
                let (oh, ow) = g.out_dims();
                Ok(ItemShape::new(out_channels, oh, ow))
            }
            LayerKind::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                out_pad,
                ..
            } => {
                if input.c != in_channels || input.h == 0 || input.w == 0 {
                    return bad(format!("{in_channels} channels"));
                }
                let oh = (input.h - 1) * stride + kernel + out_pad;
                let ow = (input.w - 1) * stride + kernel + out_pad;
                if oh < 2 * pad + 1 || ow < 2 * pad + 1 {
                    return bad("larger spatial extent".into());
                }
                let (oh, ow) = (oh - 2 * pad, ow - 2 * pad);
                // The matching forward convolution must map the output back onto the input grid.
                let g = ConvGeometry {
                    channels: out_channels,
                    height: oh,
                    width: ow,
                    kernel,
                    stride,
                    pad,
                };
                if g.out_dims() != (input.h, input.w) {
                    return bad("geometry invertible by the matching convolution".into());
                }
                Ok(ItemShape::new(out_channels, oh, ow))
            }
            LayerKind::Dense {
                inputs, outputs, ..
            } => {
                if input.len() != inputs || input.h != 1 || input.w != 1 {
                    return bad(format!("{inputs}x1x1"));
                }
                Ok(ItemShape::flat(outputs))
            }
            LayerKind::BatchNorm { channels, .. } => {
                if input.c != channels {
                    return bad(format!("{channels} channels"));
                }
                Ok(input)
            }
            LayerKind::Reshape { to } => {
                if to.len() != input.len() {
                    return bad(format!("{} elements", to.len()));
                }
                Ok(to)
            }
            LayerKind::LeakyRelu { .. }
            | LayerKind::Dropout { .. }
            | LayerKind::Tanh
            | LayerKind::Sigmoid => Ok(input),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub input: ItemShape,
    pub output: ItemShape,
    param_offset: usize,
    state_offset: usize,
}

impl Layer {
    pub fn param_range(&self) -> std::ops::Range<usize> {
        self.param_offset..self.param_offset + self.kind.param_count()
    }

    fn weight_range(&self) -> std::ops::Range<usize> {
        self.param_offset..self.param_offset + self.kind.weight_count()
    }

    fn bias_range(&self) -> std::ops::Range<usize> {
        let r = self.param_range();
        self.param_offset + self.kind.weight_count()..r.end
    }
}

/// Saved activations for one layer application.
#[derive(Debug, Clone)]
enum LayerCache<T> {
    Conv {
        cols: Vec<Vec<T>>,
    },
    ConvTranspose {
        input: Tensor<T>,
    },
    Dense {
        input: Tensor<T>,
    },
    BatchNorm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
        mean: Vec<T>,
        var: Vec<T>,
    },
    LeakyRelu {
        input: Tensor<T>,
    },
    Dropout {
        mask: Option<Vec<T>>,
    },
    Tanh {
        output: Tensor<T>,
    },
    Sigmoid {
        output: Tensor<T>,
    },
    Reshape {
        input: Shape,
    },
}

/// Record of one forward application, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Trace<T> {
    caches: Vec<LayerCache<T>>,
    batch: usize,
}

impl<T> Trace<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network<T> {
    layers: Vec<Layer>,
    input: ItemShape,
    output: ItemShape,
    params: Vec<T>,
    state: Vec<T>,
}

impl<T: Scalar> Network<T> {
    /// Builds a stack with zeroed parameters and identity batch-norm statistics.
    pub fn new(input: ItemShape, kinds: Vec<LayerKind>) -> Result<Self> {
        let mut layers = Vec::with_capacity(kinds.len());
        let mut shape = input;
        let (mut p, mut s) = (0, 0);
        for kind in kinds {
            match kind {
                LayerKind::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                    return Err(Error::validation(
                        "dropout rate",
                        format!("{rate} not in [0,1)"),
                    ));
                }
                _ => {}
            }
            let output = kind.output_shape(shape)?;
            let (pc, sc) = (kind.param_count(), kind.state_count());
            layers.push(Layer {
                kind,
                input: shape,
                output,
                param_offset: p,
                state_offset: s,
            });
            p += pc;
            s += sc;
            shape = output;
        }
        let mut net = Network {
            layers,
            input,
            output: shape,
            params: vec![T::zero(); p],
            state: vec![T::zero(); s],
        };
        for layer in &net.layers {
            if let LayerKind::BatchNorm { channels, .. } = layer.kind {
                let w = layer.weight_range();
                net.params[w].iter_mut().for_each(|g| *g = T::one());
                let var = layer.state_offset + channels..layer.state_offset + 2 * channels;
                net.state[var].iter_mut().for_each(|v| *v = T::one());
            }
        }
        Ok(net)
    }

    /// Normal(0, std) weights, zero biases, batch-norm scales Normal(1, std).
    pub fn init_normal(&mut self, std: f64, rng: &mut dyn RngCore) {
        let normal = Normal::new(0.0, std).expect("finite std");
        for layer in &self.layers {
            let is_bn = matches!(layer.kind, LayerKind::BatchNorm { .. });
            for i in layer.weight_range() {
                let v = normal.sample(rng);
                self.params[i] = T::lit(if is_bn { 1.0 + v } else { v });
            }
            for i in layer.bias_range() {
                self.params[i] = T::zero();
            }
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> ItemShape {
        self.input
    }

    pub fn output_shape(&self) -> ItemShape {
        self.output
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn state(&self) -> &[T] {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut [T] {
        &mut self.state
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Weight and bias slices of layer `idx` (bias empty when absent).
    pub fn layer_params_mut(&mut self, idx: usize) -> (&mut [T], &mut [T]) {
        let layer = &self.layers[idx];
        let (w, b) = (layer.weight_range(), layer.bias_range());
        let (head, tail) = self.params.split_at_mut(w.end);
        (&mut head[w.start..], &mut tail[..b.len()])
    }

    pub fn zero_grads(&self) -> Vec<T> {
        vec![T::zero(); self.params.len()]
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor<T>, Trace<T>)> {
        if x.shape().item() != self.input {
            return Err(Error::shape("network input", self.input, x.shape().item()));
        }
        let batch = x.shape().n;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (next, cache) = self.layer_forward(layer, cur, mode, rng)?;
            caches.push(cache);
            cur = next;
        }
        Ok((cur, Trace { caches, batch }))
    }

    /// Inference-mode forward pass without a trace.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        Ok(self.forward(x, Mode::Eval, &mut rng)?.0)
    }

    /// Back-propagates `grad_out`; parameter gradients are added into `grads` when given.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        grad_out: Tensor<T>,
        mut grads: Option<&mut [T]>,
    ) -> Result<Tensor<T>> {
        if grad_out.shape() != self.output.batch(trace.batch) {
            return Err(Error::shape(
                "output gradient",
                self.output.batch(trace.batch),
                grad_out.shape(),
            ));
        }
        if let Some(g) = grads.as_deref() {
            if g.len() != self.params.len() {
                return Err(Error::shape("gradient buffer", self.params.len(), g.len()));
            }
        }
        let mut grad = grad_out;
        for (layer, cache) in self.layers.iter().zip(&trace.caches).rev() {
            grad = self.layer_backward(layer, cache, grad, grads.as_deref_mut(), trace.batch)?;
        }
        Ok(grad)
    }

    /// Folds the batch statistics recorded in `trace` into the running statistics.
    pub fn absorb_batch_stats(&mut self, trace: &Trace<T>) {
        for (layer, cache) in self.layers.iter().zip(&trace.caches) {
            if let (
                LayerKind::BatchNorm {
                    channels, momentum, ..
                },
                LayerCache::BatchNorm {
                    batch_stats: true,
                    mean,
                    var,
                    ..
                },
            ) = (&layer.kind, cache)
            {
                let count = trace.batch * layer.input.h * layer.input.w;
                let unbias = if count > 1 {
                    T::lit(count as f64 / (count as f64 - 1.0))
                } else {
                    T::one()
                };
                let m = T::lit(*momentum);
                let keep = T::one() - m;
                let off = layer.state_offset;
                for ch in 0..*channels {
                    let rm = &mut self.state[off + ch];
                    *rm = keep * *rm + m * mean[ch];
                    let rv = &mut self.state[off + channels + ch];
                    *rv = keep * *rv + m * var[ch] * unbias;
                }
            }
        }
    }

    fn layer_forward(
        &self,
        layer: &Layer,
        x: Tensor<T>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor<T>, LayerCache<T>)> {
        let n = x.shape().n;
        let out_shape = layer.output.batch(n);
        match layer.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                ..
            } => {
                let g = ConvGeometry {
                    channels: in_channels,
                    height: layer.input.h,
                    width: layer.input.w,
                    kernel,
                    stride,
                    pad,
                };
                let (oh, ow) = (layer.output.h, layer.output.w);
                let weight = &self.params[layer.weight_range()];
                let bias = &self.params[layer.bias_range()];
                let k = g.col_rows();
                let per_sample = parallel::map_indexed(n, |i| {
                    let cols = im2col(&g, x.sample(i), oh, ow);
                    let mut y = vec![T::zero(); out_channels * oh * ow];
                    gemm(
                        Mat::new(weight, out_channels, k),
                        Mat::new(&cols, k, oh * ow),
                        &mut y,
                        T::zero(),
                    );
                    add_channel_bias(&mut y, bias, oh * ow);
                    (cols, y)
                });
                let mut data = Vec::with_capacity(out_shape.len());
                let mut cols = Vec::with_capacity(n);
                for (c, y) in per_sample {
                    cols.push(c);
                    data.extend_from_slice(&y);
                }
                Ok((
                    Tensor::from_vec(out_shape, data)?,
                    LayerCache::Conv { cols },
                ))
            }
            LayerKind::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                ..
            } => {
                let g = ConvGeometry {
                    channels: out_channels,
                    height: layer.output.h,
                    width: layer.output.w,
                    kernel,
                    stride,
                    pad,
                };
                let (ih, iw) = (layer.input.h, layer.input.w);
                let weight = &self.params[layer.weight_range()];
                let bias = &self.params[layer.bias_range()];
                let k = g.col_rows();
                let mut out = Tensor::zeros(out_shape);
                let sample_len = out_shape.sample_len();
                parallel::for_each_chunk_mut(out.data_mut(), sample_len, |i, y| {
                    let mut cols = vec![T::zero(); k * ih * iw];
                    gemm(
                        Mat::new(weight, in_channels, k).t(),
                        Mat::new(x.sample(i), in_channels, ih * iw),
                        &mut cols,
                        T::zero(),
                    );
                    col2im(&g, &cols, ih, iw, y);
                    add_channel_bias(y, bias, layer.output.h * layer.output.w);
                });
                Ok((out, LayerCache::ConvTranspose { input: x }))
            }
            LayerKind::Dense {
                inputs, outputs, ..
            } => {
                let weight = &self.params[layer.weight_range()];
                let bias = &self.params[layer.bias_range()];
                let mut y = vec![T::zero(); n * outputs];
                gemm(
                    Mat::new(x.data(), n, inputs),
                    Mat::new(weight, outputs, inputs).t(),
                    &mut y,
                    T::zero(),
                );
                if !bias.is_empty() {
                    for row in y.chunks_mut(outputs) {
                        for (v, b) in row.iter_mut().zip(bias) {
                            *v = *v + *b;
                        }
                    }
                }
                Ok((
                    Tensor::from_vec(out_shape, y)?,
                    LayerCache::Dense { input: x },
                ))
            }
            LayerKind::BatchNorm { channels, eps, .. } => {
                let plane = layer.input.h * layer.input.w;
                let gamma = &self.params[layer.weight_range()];
                let beta = &self.params[layer.bias_range()];
                let batch_stats = mode == Mode::Train;
                let (mean, var) = if batch_stats {
                    batch_moments(&x, channels, plane)
                } else {
                    let off = layer.state_offset;
                    (
                        self.state[off..off + channels].to_vec(),
                        self.state[off + channels..off + 2 * channels].to_vec(),
                    )
                };
                let eps = T::lit(eps);
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut xhat = x.into_data();
                let mut y = vec![T::zero(); xhat.len()];
                for s in 0..n {
                    for ch in 0..channels {
                        let base = (s * channels + ch) * plane;
                        for j in base..base + plane {
                            let h = (xhat[j] - mean[ch]) * inv_std[ch];
                            xhat[j] = h;
                            y[j] = gamma[ch] * h + beta[ch];
                        }
                    }
                }
                Ok((
                    Tensor::from_vec(out_shape, y)?,
                    LayerCache::BatchNorm {
                        xhat,
                        inv_std,
                        batch_stats,
                        mean,
                        var,
                    },
                ))
            }
            LayerKind::LeakyRelu { slope } => {
                let slope = T::lit(slope);
                let y = x.map(|v| if v > T::zero() { v } else { v * slope });
                Ok((y, LayerCache::LeakyRelu { input: x }))
            }
            LayerKind::Dropout { rate } => {
                if mode == Mode::Eval || rate == 0.0 {
                    return Ok((x, LayerCache::Dropout { mask: None }));
                }
                let scale = T::lit(1.0 / (1.0 - rate));
                let mask: Vec<T> = (0..x.shape().len())
                    .map(|_| {
                        if rng.gen::<f64>() < rate {
                            T::zero()
                        } else {
                            scale
                        }
                    })
                    .collect();
                let mut y = x;
                for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                    *v = *v * *m;
                }
                Ok((y, LayerCache::Dropout { mask: Some(mask) }))
            }
            LayerKind::Tanh => {
                let y = x.map(|v| v.tanh());
                Ok((y.clone(), LayerCache::Tanh { output: y }))
            }
            LayerKind::Sigmoid => {
                let y = x.map(sigmoid);
                Ok((y.clone(), LayerCache::Sigmoid { output: y }))
            }
            LayerKind::Reshape { to } => {
                let input = x.shape();
                Ok((x.reshaped(to)?, LayerCache::Reshape { input }))
            }
        }
    }

    fn layer_backward(
        &self,
        layer: &Layer,
        cache: &LayerCache<T>,
        gy: Tensor<T>,
        grads: Option<&mut [T]>,
        n: usize,
    ) -> Result<Tensor<T>> {
        let in_shape = layer.input.batch(n);
        match (&layer.kind, cache) {
            (
                &LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    ..
                },
                LayerCache::Conv { cols },
            ) => {
                let g = ConvGeometry {
                    channels: in_channels,
                    height: layer.input.h,
                    width: layer.input.w,
                    kernel,
                    stride,
                    pad,
                };
                let positions = layer.output.h * layer.output.w;
                let k = g.col_rows();
                let weight = &self.params[layer.weight_range()];
                let want_params = grads.is_some();
                let per_sample = parallel::map_indexed(n, |i| {
                    let gy_i = gy.sample(i);
                    let mut gcols = vec![T::zero(); k * positions];
                    gemm(
                        Mat::new(weight, out_channels, k).t(),
                        Mat::new(gy_i, out_channels, positions),
                        &mut gcols,
                        T::zero(),
                    );
                    let mut gx = vec![T::zero(); layer.input.len()];
                    col2im(&g, &gcols, layer.output.h, layer.output.w, &mut gx);
                    let gw = want_params.then(|| {
                        let mut gw = vec![T::zero(); out_channels * k];
                        gemm(
                            Mat::new(gy_i, out_channels, positions),
                            Mat::new(&cols[i], k, positions).t(),
                            &mut gw,
                            T::zero(),
                        );
                        gw
                    });
                    (gx, gw)
                });
                let mut gx_all = Vec::with_capacity(in_shape.len());
                let mut wsum: Option<Vec<T>> = None;
                for (gx, gw) in per_sample {
                    gx_all.extend_from_slice(&gx);
                    if let Some(gw) = gw {
                        match wsum.as_mut() {
                            None => wsum = Some(gw),
                            Some(acc) => acc.iter_mut().zip(&gw).for_each(|(a, b)| *a = *a + *b),
                        }
                    }
                }
                if let Some(grads) = grads {
                    if let Some(wsum) = wsum {
                        add_into(&mut grads[layer.weight_range()], &wsum);
                    }
                    accumulate_channel_bias(
                        &mut grads[layer.bias_range()],
                        &gy,
                        out_channels,
                        positions,
                    );
                }
                Tensor::from_vec(in_shape, gx_all)
            }
            (
                &LayerKind::ConvTranspose {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    ..
                },
                LayerCache::ConvTranspose { input },
            ) => {
                let g = ConvGeometry {
                    channels: out_channels,
                    height: layer.output.h,
                    width: layer.output.w,
                    kernel,
                    stride,
                    pad,
                };
                let positions = layer.input.h * layer.input.w;
                let k = g.col_rows();
                let weight = &self.params[layer.weight_range()];
                let want_params = grads.is_some();
                let per_sample = parallel::map_indexed(n, |i| {
                    let gcols = im2col(&g, gy.sample(i), layer.input.h, layer.input.w);
                    let mut gx = vec![T::zero(); in_channels * positions];
                    gemm(
                        Mat::new(weight, in_channels, k),
                        Mat::new(&gcols, k, positions),
                        &mut gx,
                        T::zero(),
                    );
                    let gw = want_params.then(|| {
                        let mut gw = vec![T::zero(); in_channels * k];
                        gemm(
                            Mat::new(input.sample(i), in_channels, positions),
                            Mat::new(&gcols, k, positions).t(),
                            &mut gw,
                            T::zero(),
                        );
                        gw
                    });
                    (gx, gw)
                });
                let mut gx_all = Vec::with_capacity(in_shape.len());
                let mut wsum: Option<Vec<T>> = None;
                for (gx, gw) in per_sample {
                    gx_all.extend_from_slice(&gx);
                    if let Some(gw) = gw {
                        match wsum.as_mut() {
                            None => wsum = Some(gw),
                            Some(acc) => acc.iter_mut().zip(&gw).for_each(|(a, b)| *a = *a + *b),
                        }
                    }
                }
                if let Some(grads) = grads {
                    if let Some(wsum) = wsum {
                        add_into(&mut grads[layer.weight_range()], &wsum);
                    }
                    let plane = layer.output.h * layer.output.w;
                    accumulate_channel_bias(
                        &mut grads[layer.bias_range()],
                        &gy,
                        out_channels,
                        plane,
                    );
                }
                Tensor::from_vec(in_shape, gx_all)
            }
            (
                &LayerKind::Dense {
                    inputs, outputs, ..
                },
                LayerCache::Dense { input },
            ) => {
                let weight = &self.params[layer.weight_range()];
                let mut gx = vec![T::zero(); n * inputs];
                gemm(
                    Mat::new(gy.data(), n, outputs),
                    Mat::new(weight, outputs, inputs),
                    &mut gx,
                    T::zero(),
                );
                if let Some(grads) = grads {
                    let wr = layer.weight_range();
                    gemm(
                        Mat::new(gy.data(), n, outputs).t(),
                        Mat::new(input.data(), n, inputs),
                        &mut grads[wr],
                        T::one(),
                    );
                    let br = layer.bias_range();
                    if !br.is_empty() {
                        let gb = &mut grads[br];
                        for row in gy.data().chunks(outputs) {
                            add_into(gb, row);
                        }
                    }
                }
                Tensor::from_vec(in_shape, gx)
            }
            (
                &LayerKind::BatchNorm { channels, .. },
                LayerCache::BatchNorm {
                    xhat,
                    inv_std,
                    batch_stats,
                    ..
                },
            ) => {
                let plane = layer.input.h * layer.input.w;
                let count = T::lit((n * plane) as f64);
                let gamma = &self.params[layer.weight_range()];
                let gyd = gy.data();
                let mut sum_dy = vec![T::zero(); channels];
                let mut sum_dy_xhat = vec![T::zero(); channels];
                for s in 0..n {
                    for ch in 0..channels {
                        let base = (s * channels + ch) * plane;
                        for j in base..base + plane {
                            sum_dy[ch] = sum_dy[ch] + gyd[j];
                            sum_dy_xhat[ch] = sum_dy_xhat[ch] + gyd[j] * xhat[j];
                        }
                    }
                }
                let mut gx = vec![T::zero(); gyd.len()];
                for s in 0..n {
                    for ch in 0..channels {
                        let base = (s * channels + ch) * plane;
                        let scale = gamma[ch] * inv_std[ch];
                        for j in base..base + plane {
                            gx[j] = if *batch_stats {
                                scale * (gyd[j] - (sum_dy[ch] + xhat[j] * sum_dy_xhat[ch]) / count)
                            } else {
                                scale * gyd[j]
                            };
                        }
                    }
                }
                if let Some(grads) = grads {
                    add_into(&mut grads[layer.weight_range()], &sum_dy_xhat);
                    add_into(&mut grads[layer.bias_range()], &sum_dy);
                }
                Tensor::from_vec(in_shape, gx)
            }
            (&LayerKind::LeakyRelu { slope }, LayerCache::LeakyRelu { input }) => {
                let slope = T::lit(slope);
                let mut gx = gy;
                for (g, x) in gx.data_mut().iter_mut().zip(input.data()) {
                    if *x <= T::zero() {
                        *g = *g * slope;
                    }
                }
                Ok(gx)
            }
            (LayerKind::Dropout { .. }, LayerCache::Dropout { mask }) => {
                let mut gx = gy;
                if let Some(mask) = mask {
                    for (g, m) in gx.data_mut().iter_mut().zip(mask) {
                        *g = *g * *m;
                    }
                }
                Ok(gx)
            }
            (LayerKind::Tanh, LayerCache::Tanh { output }) => {
                let mut gx = gy;
                for (g, y) in gx.data_mut().iter_mut().zip(output.data()) {
                    *g = *g * (T::one() - *y * *y);
                }
                Ok(gx)
            }
            (LayerKind::Sigmoid, LayerCache::Sigmoid { output }) => {
                let mut gx = gy;
                for (g, y) in gx.data_mut().iter_mut().zip(output.data()) {
                    *g = *g * *y * (T::one() - *y);
                }
                Ok(gx)
            }
            (LayerKind::Reshape { .. }, LayerCache::Reshape { input }) => gy.reshaped(input.item()),
            _ => Err(Error::Stage("trace does not belong to this network".into())),
        }
    }

    /// Converts parameters and statistics to another element type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            layers: self.layers.clone(),
            input: self.input,
            output: self.output,
            params: self.params.iter().map(|v| U::lit(v.as_f64())).collect(),
            state: self.state.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn add_channel_bias<T: Scalar>(y: &mut [T], bias: &[T], plane: usize) {
    if bias.is_empty() {
        return;
    }
    for (ch, b) in bias.iter().enumerate() {
        for v in &mut y[ch * plane..(ch + 1) * plane] {
            *v = *v + *b;
        }
    }
}

fn accumulate_channel_bias<T: Scalar>(gb: &mut [T], gy: &Tensor<T>, channels: usize, plane: usize) {
    if gb.is_empty() {
        return;
    }
    for s in 0..gy.shape().n {
        let sample = gy.sample(s);
        for ch in 0..channels {
            let sum: T = sample[ch * plane..(ch + 1) * plane].iter().copied().sum();
            gb[ch] = gb[ch] + sum;
        }
    }
}

/// Per-channel mean and biased variance over batch and spatial positions.
fn batch_moments<T: Scalar>(x: &Tensor<T>, channels: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let n = x.shape().n;
    let count = T::lit((n * plane) as f64);
    let d = x.data();
    let mut mean = vec![T::zero(); channels];
    for s in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            let base = (s * channels + ch) * plane;
            *m = *m + d[base..base + plane].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    let mut var = vec![T::zero(); channels];
    for s in 0..n {
        for ch in 0..channels {
            let base = (s * channels + ch) * plane;
            let acc: T = d[base..base + plane]
                .iter()
                .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                .sum();
            var[ch] = var[ch] + acc;
        }
    }
    var.iter_mut().for_each(|v| *v = *v / count);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn random_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Checks input and parameter gradients of `sum(out * probe)` by central differences.
    fn check_layer_stack(input: ItemShape, kinds: Vec<LayerKind>, batch: usize) {
        let mut net: Network<f64> = Network::new(input, kinds).unwrap();
        net.init_normal(0.5, &mut rng());
        let x = random_tensor(input.batch(batch), 11);
        let probe = random_tensor(net.output_shape().batch(batch), 12);
        let objective = |net: &Network<f64>, x: &Tensor<f64>| -> f64 {
            let (y, _) = net.forward(x, Mode::Train, &mut rng()).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let (_, trace) = net.forward(&x, Mode::Train, &mut rng()).unwrap();
        let mut grads = net.zero_grads();
        let gx = net
            .backward(&trace, probe.clone(), Some(&mut grads))
            .unwrap();
        let h = 1e-6;
        for (i, &g) in grads.iter().enumerate() {
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let up = objective(&p, &x);
            p.params_mut()[i] -= 2.0 * h;
            let down = objective(&p, &x);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - g).abs() < 1e-6 * (1.0 + fd.abs()),
                "param {i}: fd {fd} vs {g}"
            );
        }
        for i in 0..x.shape().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let up = objective(&net, &xp);
            xp.data_mut()[i] -= 2.0 * h;
            let down = objective(&net, &xp);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - gx.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "input {i}: fd {fd} vs {}",
                gx.data()[i]
            );
        }
    }

    #[test]
    fn conv_gradients() {
        check_layer_stack(
            ItemShape::new(2, 6, 6),
            vec![LayerKind::Conv {
                in_channels: 2,
                out_channels: 3,
                kernel: 5,
                stride: 2,
                pad: 2,
                bias: true,
            }],
            2,
        );
    }

    #[test]
    fn conv_transpose_gradients() {
        check_layer_stack(
            ItemShape::new(3, 3, 3),
            vec![LayerKind::ConvTranspose {
                in_channels: 3,
                out_channels: 2,
                kernel: 5,
                stride: 2,
                pad: 2,
                out_pad: 1,
                bias: true,
            }],
            2,
        );
    }

    #[test]
    fn dense_batchnorm_activation_gradients() {
        check_layer_stack(
            ItemShape::new(2, 2, 2),
            vec![
                LayerKind::Reshape {
                    to: ItemShape::flat(8),
                },
                LayerKind::Dense {
                    inputs: 8,
                    outputs: 5,
                    bias: true,
                },
                LayerKind::BatchNorm {
                    channels: 5,
                    eps: 1e-5,
                    momentum: 0.1,
                },
                LayerKind::LeakyRelu { slope: 0.2 },
                LayerKind::Dropout { rate: 0.3 },
                LayerKind::Tanh,
                LayerKind::Dense {
                    inputs: 5,
                    outputs: 1,
                    bias: true,
                },
                LayerKind::Sigmoid,
            ],
            4,
        );
    }

    #[test]
    fn spatial_batchnorm_gradients() {
        check_layer_stack(
            ItemShape::new(2, 3, 3),
            vec![LayerKind::BatchNorm {
                channels: 2,
                eps: 1e-5,
                momentum: 0.1,
            }],
            3,
        );
    }

    #[test]
    fn transposed_conv_doubles_extent() {
        let net: Network<f32> = Network::new(
            ItemShape::new(4, 4, 4),
            vec![LayerKind::ConvTranspose {
                in_channels: 4,
                out_channels: 1,
                kernel: 5,
                stride: 2,
                pad: 2,
                out_pad: 1,
                bias: false,
            }],
        )
        .unwrap();
        assert_eq!(net.output_shape(), ItemShape::new(1, 8, 8));
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let net: Network<f32> = Network::new(ItemShape::flat(3), vec![LayerKind::Tanh]).unwrap();
        let x = Tensor::zeros(Shape::new(1, 4, 1, 1));
        let err = net.forward(&x, Mode::Eval, &mut rng()).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut net: Network<f64> = Network::new(
            ItemShape::flat(1),
            vec![LayerKind::BatchNorm {
                channels: 1,
                eps: 1e-5,
                momentum: 0.5,
            }],
        )
        .unwrap();
        let x = Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![1.0, 3.0]).unwrap();
        let (_, trace) = net.forward(&x, Mode::Train, &mut rng()).unwrap();
        net.absorb_batch_stats(&trace);
        // mean 2, unbiased var 2
        assert_eq!(net.state(), &[1.0, 1.5]);
    }
}

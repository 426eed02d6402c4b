//! Sequential network engine: layers, forward evaluation, and exact
//! reverse-mode gradients for pointwise inputs.
//!
//! The layer vocabulary is fixed (affine, 2-D convolution, ReLU, flatten)
//! with hand-written backward rules per layer. That covers the CNN and MLP
//! architectures this crate trains while keeping every gradient auditable
//! against finite differences.

use crate::error::{CureError, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;
use rand_distr::{Distribution, Normal};

/// Geometry of a 2-D convolution with square kernels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_h() * self.out_w()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    /// Receptive-field size feeding one output unit.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// One network layer. Affine and Conv2d carry parameters; ReLU and Flatten
/// do not.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Affine {
        /// Row-major (out_dim, in_dim).
        weight: Vec<f64>,
        bias: Vec<f64>,
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        /// Row-major (out_channels, in_channels, kernel, kernel).
        weight: Vec<f64>,
        bias: Vec<f64>,
        geom: ConvGeom,
    },
    ReLU,
    Flatten,
}

impl Layer {
    pub fn affine(in_dim: usize, out_dim: usize) -> Self {
        Layer::Affine {
            weight: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    pub fn conv2d(geom: ConvGeom) -> Self {
        let weight = vec![0.0; geom.weight_len()];
        let bias = vec![0.0; geom.out_channels];
        Layer::Conv2d { weight, bias, geom }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Affine { .. } => "affine",
            Layer::Conv2d { .. } => "conv2d",
            Layer::ReLU => "relu",
            Layer::Flatten => "flatten",
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, Layer::Affine { .. } | Layer::Conv2d { .. })
    }

    /// Total parameter count (weights plus bias) of this layer.
    pub fn param_len(&self) -> usize {
        match self {
            Layer::Affine { weight, bias, .. } | Layer::Conv2d { weight, bias, .. } => {
                weight.len() + bias.len()
            }
            _ => 0,
        }
    }

    /// Output shape given an input shape, or an error if they do not compose.
    fn out_shape(&self, in_shape: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match self {
            Layer::Affine { in_dim, out_dim, .. } => {
                let flat: usize = in_shape.iter().product();
                if flat != *in_dim {
                    return Err(format!("affine expects {in_dim} inputs, got {flat}"));
                }
                Ok(vec![*out_dim])
            }
            Layer::Conv2d { geom, .. } => {
                if in_shape != [geom.in_channels, geom.in_h, geom.in_w] {
                    return Err(format!(
                        "conv2d expects ({}, {}, {}), got {:?}",
                        geom.in_channels, geom.in_h, geom.in_w, in_shape
                    ));
                }
                if geom.in_h + 2 * geom.padding < geom.kernel
                    || geom.in_w + 2 * geom.padding < geom.kernel
                {
                    return Err("kernel larger than padded input".to_string());
                }
                Ok(vec![geom.out_channels, geom.out_h(), geom.out_w()])
            }
            Layer::ReLU => Ok(in_shape.to_vec()),
            Layer::Flatten => Ok(vec![in_shape.iter().product()]),
        }
    }
}

/// An ordered sequence of layers with a classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    num_classes: usize,
    /// Cached per-layer output shapes, one entry per layer.
    shapes: Vec<Vec<usize>>,
}

impl Network {
    /// Build a network, validating that adjacent layer shapes compose and
    /// the final output length equals `num_classes`.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, num_classes: usize) -> Result<Self> {
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            cur = layer
                .out_shape(&cur)
                .map_err(|msg| CureError::ShapeMismatch {
                    layer: i,
                    expected: msg,
                    got: format!("{:?}", cur),
                })?;
            shapes.push(cur.clone());
        }
        let out_len: usize = cur.iter().product();
        if out_len != num_classes {
            return Err(CureError::ShapeMismatch {
                layer: layers.len().saturating_sub(1),
                expected: format!("{num_classes} output logits"),
                got: format!("{out_len}"),
            });
        }
        Ok(Self {
            layers,
            input_shape,
            num_classes,
            shapes,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Output shape of layer `i`.
    pub fn layer_out_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Indices of parameterized layers, in order.
    pub fn param_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parameterized())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_len).sum()
    }

    /// Sum of absolute parameter values.
    pub fn param_l1_norm(&self) -> f64 {
        let mut acc = 0.0;
        for layer in &self.layers {
            if let Layer::Affine { weight, bias, .. } | Layer::Conv2d { weight, bias, .. } = layer
            {
                acc += weight.iter().map(|w| w.abs()).sum::<f64>();
                acc += bias.iter().map(|b| b.abs()).sum::<f64>();
            }
        }
        acc
    }

    /// One-line structural description: layer kinds and geometry. Two
    /// networks with equal descriptions accept each other's parameters.
    pub fn arch_description(&self) -> String {
        let mut parts = vec![format!(
            "input={:?} k={}",
            self.input_shape, self.num_classes
        )];
        for layer in &self.layers {
            parts.push(match layer {
                Layer::Affine {
                    in_dim, out_dim, ..
                } => format!("affine({in_dim},{out_dim})"),
                Layer::Conv2d { geom, .. } => format!(
                    "conv2d({},{},{},{},k={},s={},p={})",
                    geom.in_channels,
                    geom.in_h,
                    geom.in_w,
                    geom.out_channels,
                    geom.kernel,
                    geom.stride,
                    geom.padding
                ),
                Layer::ReLU => "relu".to_string(),
                Layer::Flatten => "flatten".to_string(),
            });
        }
        parts.join(";")
    }

    /// Deterministic forward pass to logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let tape = self.forward_tape(x.data())?;
        let logits = tape.into_iter().last().expect("tape has the input entry");
        Tensor::new(vec![self.num_classes], logits)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() && x.len() != self.input_len() {
            return Err(CureError::ShapeMismatch {
                layer: 0,
                expected: format!("{:?}", self.input_shape),
                got: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }

    /// Forward pass recording every activation. `tape[0]` is the input,
    /// `tape[i + 1]` the output of layer `i`.
    pub(crate) fn forward_tape(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.input_len() {
            return Err(CureError::ShapeMismatch {
                layer: 0,
                expected: format!("{} inputs", self.input_len()),
                got: format!("{}", x.len()),
            });
        }
        let mut tape = Vec::with_capacity(self.layers.len() + 1);
        tape.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = tape.last().expect("non-empty tape");
            let out = match layer {
                Layer::Affine {
                    weight,
                    bias,
                    in_dim,
                    out_dim,
                } => affine_forward(weight, bias, *in_dim, *out_dim, input),
                Layer::Conv2d { weight, bias, geom } => conv_forward(geom, weight, bias, input),
                Layer::ReLU => input.iter().map(|v| v.max(0.0)).collect(),
                Layer::Flatten => input.clone(),
            };
            if !out.iter().all(|v| v.is_finite()) {
                return Err(CureError::NonFinite {
                    layer: i,
                    context: "forward activation".to_string(),
                });
            }
            tape.push(out);
        }
        Ok(tape)
    }

    /// Cross-entropy loss and exact parameter gradients at a point.
    pub fn backward_ce(&self, x: &Tensor, y: usize) -> Result<(f64, UpdateDelta)> {
        if y >= self.num_classes {
            return Err(CureError::InvalidClass {
                index: y,
                num_classes: self.num_classes,
            });
        }
        let tape = self.forward_tape(x.data())?;
        let logits = tape.last().expect("tape");
        let (loss, mut dlogits) = softmax_ce(logits, y);
        let mut grads = UpdateDelta::zeros_like(self);
        self.backward_from(&tape, &mut dlogits, Some(&mut grads), None);
        Ok((loss, grads))
    }

    /// Cross-entropy loss and its gradient with respect to the input only.
    /// Used by the PGD attacks; parameter gradients are skipped.
    pub fn input_grad_ce(&self, x: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
        if y >= self.num_classes {
            return Err(CureError::InvalidClass {
                index: y,
                num_classes: self.num_classes,
            });
        }
        let tape = self.forward_tape(x)?;
        let logits = tape.last().expect("tape");
        let (loss, mut dlogits) = softmax_ce(logits, y);
        let mut dx = vec![0.0; x.len()];
        self.backward_from(&tape, &mut dlogits, None, Some(&mut dx));
        Ok((loss, dx))
    }

    /// Shared reverse pass. `d_out` enters as the gradient at the logits and
    /// is consumed. Accumulates parameter gradients into `grads` and/or the
    /// input gradient into `dx` when provided.
    fn backward_from(
        &self,
        tape: &[Vec<f64>],
        d_out: &mut Vec<f64>,
        mut grads: Option<&mut UpdateDelta>,
        dx: Option<&mut Vec<f64>>,
    ) {
        let mut param_slot = self
            .layers
            .iter()
            .filter(|l| l.is_parameterized())
            .count();
        let mut d_cur = std::mem::take(d_out);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape[i];
            let needs_dx = i > 0 || dx.is_some();
            let mut d_in = if needs_dx {
                vec![0.0; input.len()]
            } else {
                Vec::new()
            };
            match layer {
                Layer::Affine {
                    weight,
                    in_dim,
                    out_dim,
                    ..
                } => {
                    param_slot -= 1;
                    let grad_slice = grads
                        .as_mut()
                        .map(|g| g.layer_mut(param_slot).split_at_mut(*out_dim * *in_dim));
                    affine_backward(
                        weight,
                        *in_dim,
                        *out_dim,
                        input,
                        &d_cur,
                        grad_slice,
                        needs_dx.then_some(&mut d_in),
                    );
                }
                Layer::Conv2d { weight, geom, .. } => {
                    param_slot -= 1;
                    let grad_slice = grads
                        .as_mut()
                        .map(|g| g.layer_mut(param_slot).split_at_mut(geom.weight_len()));
                    conv_backward(
                        geom,
                        weight,
                        input,
                        &d_cur,
                        grad_slice,
                        needs_dx.then_some(&mut d_in),
                    );
                }
                Layer::ReLU => {
                    if needs_dx {
                        for j in 0..input.len() {
                            d_in[j] = if input[j] > 0.0 { d_cur[j] } else { 0.0 };
                        }
                    }
                }
                Layer::Flatten => {
                    if needs_dx {
                        d_in.copy_from_slice(&d_cur);
                    }
                }
            }
            d_cur = d_in;
        }
        if let Some(dx) = dx {
            dx.copy_from_slice(&d_cur);
        }
    }

    /// Initialize parameters in place with the given scheme and seed.
    pub fn init(mut self, scheme: InitScheme, seed: u64) -> Network {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let (weight, fan_in) = match layer {
                Layer::Affine { weight, in_dim, .. } => (weight, *in_dim),
                Layer::Conv2d { weight, geom, .. } => (weight, geom.fan_in()),
                _ => continue,
            };
            let sigma = match scheme {
                // Fan-in scaled normal keeping the expected box radius
                // amplification per layer at one: E|w| * fan_in = 1.
                InitScheme::Shi { gain } => gain * (std::f64::consts::PI / 2.0).sqrt() / fan_in as f64,
                InitScheme::Kaiming => (2.0 / fan_in as f64).sqrt(),
            };
            let normal = Normal::new(0.0, sigma).expect("positive sigma");
            let mut rng = rng::rng_for(seed, &[stream::INIT, i as u64]);
            for w in weight.iter_mut() {
                *w = normal.sample(&mut rng);
            }
            // Biases stay zero under both schemes.
        }
        self
    }

    /// Difference `other - self` over parameterized layers.
    pub fn delta_to(&self, other: &Network) -> Result<UpdateDelta> {
        if self.arch_description() != other.arch_description() {
            return Err(CureError::ArchitectureMismatch(format!(
                "{} vs {}",
                self.arch_description(),
                other.arch_description()
            )));
        }
        let mut delta = UpdateDelta::zeros_like(self);
        for (slot, (a, b)) in self
            .layers
            .iter()
            .zip(&other.layers)
            .filter(|(a, _)| a.is_parameterized())
            .enumerate()
        {
            let dst = delta.layer_mut(slot);
            let (wa, ba) = params_of(a);
            let (wb, bb) = params_of(b);
            for (d, (x, y)) in dst.iter_mut().zip(wa.iter().chain(ba).zip(wb.iter().chain(bb))) {
                *d = *y - *x;
            }
        }
        // delta layout: for each slot we filled from (self, other) pairs; the
        // closure above zipped self params with other params.
        Ok(delta)
    }

    /// Add `scale * delta` to the parameters in place.
    pub fn apply_delta(&mut self, delta: &UpdateDelta, scale: f64) {
        let mut slot = 0;
        for layer in self.layers.iter_mut() {
            if !layer.is_parameterized() {
                continue;
            }
            let (w, b) = params_of_mut(layer);
            let src = delta.layer(slot);
            let (dw, db) = src.split_at(w.len());
            for (p, d) in w.iter_mut().zip(dw) {
                *p += scale * d;
            }
            for (p, d) in b.iter_mut().zip(db) {
                *p += scale * d;
            }
            slot += 1;
        }
    }
}

fn params_of(layer: &Layer) -> (&[f64], &[f64]) {
    match layer {
        Layer::Affine { weight, bias, .. } | Layer::Conv2d { weight, bias, .. } => (weight, bias),
        _ => (&[], &[]),
    }
}

pub(crate) fn params_of_mut(layer: &mut Layer) -> (&mut [f64], &mut [f64]) {
    match layer {
        Layer::Affine { weight, bias, .. } | Layer::Conv2d { weight, bias, .. } => {
            (weight.as_mut_slice(), bias.as_mut_slice())
        }
        _ => (&mut [], &mut []),
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Fan-in scaled normal sized so propagated box radii stay bounded
    /// layer to layer. `gain` rescales the standard deviation.
    Shi { gain: f64 },
    Kaiming,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::Shi { gain: 1.0 }
    }
}

/// Per-layer flat parameter difference between two network snapshots.
/// Also serves as the gradient container: entry `l` concatenates the
/// weight gradient and bias gradient of the l-th parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDelta {
    layers: Vec<Vec<f64>>,
}

impl UpdateDelta {
    pub fn zeros_like(net: &Network) -> Self {
        let layers = net
            .layers
            .iter()
            .filter(|l| l.is_parameterized())
            .map(|l| vec![0.0; l.param_len()])
            .collect();
        Self { layers }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> &[f64] {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.layers[i]
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    /// self += scale * other
    pub fn add_scaled(&mut self, other: &UpdateDelta, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            for v in layer {
                *v *= factor;
            }
        }
    }

    pub fn fill(&mut self, value: f64) {
        for layer in &mut self.layers {
            layer.fill(value);
        }
    }

    /// Add the l1 subgradient of the parameters, `weight * sign(theta)`,
    /// matching the `l1 * |theta|` term in the training losses.
    pub fn add_l1_subgradient(&mut self, net: &Network, weight: f64) {
        let mut slot = 0;
        for layer in &net.layers {
            if !layer.is_parameterized() {
                continue;
            }
            let (w, b) = params_of(layer);
            let dst = &mut self.layers[slot];
            for (d, p) in dst.iter_mut().zip(w.iter().chain(b)) {
                *d += weight * p.signum() * f64::from(u8::from(*p != 0.0));
            }
            slot += 1;
        }
    }

    pub fn total_len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flatten().copied()
    }
}

/// Numerically stable softmax cross-entropy: returns the loss and the
/// gradient at the logits (softmax minus one-hot).
pub fn softmax_ce(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let mut probs: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    let loss = -(probs[y].max(f64::MIN_POSITIVE)).ln();
    probs[y] -= 1.0;
    (loss, probs)
}

pub(crate) fn affine_forward(
    weight: &[f64],
    bias: &[f64],
    in_dim: usize,
    out_dim: usize,
    x: &[f64],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let row = &weight[o * in_dim..(o + 1) * in_dim];
        out.push(bias[o] + crate::tensor::dot(row, x));
    }
    out
}

/// Valid output range along one spatial axis for a fixed kernel offset:
/// positions `o` with `0 <= o * stride + k - padding < in_size`.
pub(crate) fn conv_axis_range(
    out_size: usize,
    in_size: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    let lo_num = padding as isize - k as isize;
    let lo = if lo_num > 0 {
        (lo_num as usize).div_ceil(stride)
    } else {
        0
    };
    let hi_num = in_size as isize - 1 - k as isize + padding as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = ((hi_num as usize) / stride + 1).min(out_size);
    (lo.min(hi), hi)
}

/// Receptive-field patches of one input, position-major: row `pos` holds
/// the `in_channels * kernel^2` taps feeding output position `pos`, with
/// zeros where the kernel overhangs the padded border. Convolution then
/// reduces to contiguous dot products against the flat kernel rows.
pub(crate) struct PatchMatrix {
    pub data: Vec<f64>,
    pub taps: usize,
    pub positions: usize,
}

impl PatchMatrix {
    pub fn row(&self, pos: usize) -> &[f64] {
        &self.data[pos * self.taps..(pos + 1) * self.taps]
    }
}

pub(crate) fn gather_patches(geom: &ConvGeom, x: &[f64]) -> PatchMatrix {
    let (h_out, w_out) = (geom.out_h(), geom.out_w());
    let (h_in, w_in, k, s, p) = (geom.in_h, geom.in_w, geom.kernel, geom.stride, geom.padding);
    let taps = geom.in_channels * k * k;
    let positions = h_out * w_out;
    let mut data = vec![0.0; taps * positions];
    for oy in 0..h_out {
        for ky in 0..k {
            let iy = (oy * s + ky) as isize - p as isize;
            if iy < 0 || iy as usize >= h_in {
                continue;
            }
            let iy = iy as usize;
            for ci in 0..geom.in_channels {
                let x_row = &x[ci * h_in * w_in + iy * w_in..ci * h_in * w_in + (iy + 1) * w_in];
                let tap_base = (ci * k + ky) * k;
                for ox in 0..w_out {
                    let dst = (oy * w_out + ox) * taps + tap_base;
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix < 0 || ix as usize >= w_in {
                            continue;
                        }
                        data[dst + kx] = x_row[ix as usize];
                    }
                }
            }
        }
    }
    PatchMatrix {
        data,
        taps,
        positions,
    }
}

/// Scatter-add patch-shaped gradients back onto the input plane
/// (transpose of [`gather_patches`]).
pub(crate) fn scatter_patches_add(geom: &ConvGeom, d_cols: &PatchMatrix, d_in: &mut [f64]) {
    let (h_out, w_out) = (geom.out_h(), geom.out_w());
    let (h_in, w_in, k, s, p) = (geom.in_h, geom.in_w, geom.kernel, geom.stride, geom.padding);
    let taps = d_cols.taps;
    for oy in 0..h_out {
        for ky in 0..k {
            let iy = (oy * s + ky) as isize - p as isize;
            if iy < 0 || iy as usize >= h_in {
                continue;
            }
            let iy = iy as usize;
            for ci in 0..geom.in_channels {
                let row_base = ci * h_in * w_in + iy * w_in;
                let tap_base = (ci * k + ky) * k;
                for ox in 0..w_out {
                    let src = (oy * w_out + ox) * taps + tap_base;
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix < 0 || ix as usize >= w_in {
                            continue;
                        }
                        d_in[row_base + ix as usize] += d_cols.data[src + kx];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward_cols(
    geom: &ConvGeom,
    weight: &[f64],
    bias: &[f64],
    cols: &PatchMatrix,
) -> Vec<f64> {
    let positions = cols.positions;
    let taps = cols.taps;
    let mut out = vec![0.0; geom.out_channels * positions];
    for co in 0..geom.out_channels {
        let w_row = &weight[co * taps..(co + 1) * taps];
        let out_c = &mut out[co * positions..(co + 1) * positions];
        for pos in 0..positions {
            out_c[pos] = bias[co] + crate::tensor::dot(w_row, cols.row(pos));
        }
    }
    out
}

/// Affine reverse rules. `grad` provides (dweight, dbias) slices to
/// accumulate into; `d_in` receives the input gradient when present.
fn affine_backward(
    weight: &[f64],
    in_dim: usize,
    out_dim: usize,
    input: &[f64],
    d_out: &[f64],
    grad: Option<(&mut [f64], &mut [f64])>,
    d_in: Option<&mut Vec<f64>>,
) {
    if let Some((dw, db)) = grad {
        for o in 0..out_dim {
            let g = d_out[o];
            db[o] += g;
            if g != 0.0 {
                let row = &mut dw[o * in_dim..(o + 1) * in_dim];
                for i in 0..in_dim {
                    row[i] += g * input[i];
                }
            }
        }
    }
    if let Some(d_in) = d_in {
        for o in 0..out_dim {
            let g = d_out[o];
            if g != 0.0 {
                let row = &weight[o * in_dim..(o + 1) * in_dim];
                for i in 0..in_dim {
                    d_in[i] += g * row[i];
                }
            }
        }
    }
}

pub(crate) fn conv_forward(geom: &ConvGeom, weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    conv_forward_cols(geom, weight, bias, &gather_patches(geom, x))
}

/// Convolution reverse rules over the patch matrix: contiguous dot/axpy
/// kernels for both the weight gradient and the input gradient.
fn conv_backward(
    geom: &ConvGeom,
    weight: &[f64],
    input: &[f64],
    d_out: &[f64],
    grad: Option<(&mut [f64], &mut [f64])>,
    d_in: Option<&mut Vec<f64>>,
) {
    let positions = geom.out_h() * geom.out_w();
    let taps = geom.in_channels * geom.kernel * geom.kernel;
    if let Some((dw, db)) = grad {
        let cols = gather_patches(geom, input);
        for co in 0..geom.out_channels {
            let d_out_c = &d_out[co * positions..(co + 1) * positions];
            db[co] += d_out_c.iter().sum::<f64>();
            let dw_row = &mut dw[co * taps..(co + 1) * taps];
            for (pos, g) in d_out_c.iter().enumerate() {
                if *g != 0.0 {
                    axpy(*g, cols.row(pos), dw_row);
                }
            }
        }
    }
    if let Some(d_in) = d_in {
        let mut d_cols = PatchMatrix {
            data: vec![0.0; taps * positions],
            taps,
            positions,
        };
        for co in 0..geom.out_channels {
            let d_out_c = &d_out[co * positions..(co + 1) * positions];
            let w_row = &weight[co * taps..(co + 1) * taps];
            for (pos, g) in d_out_c.iter().enumerate() {
                if *g != 0.0 {
                    axpy(*g, w_row, &mut d_cols.data[pos * taps..(pos + 1) * taps]);
                }
            }
        }
        scatter_patches_add(geom, &d_cols, d_in);
    }
}

/// `dst += a * src` over equal-length slices.
pub(crate) fn axpy(a: f64, src: &[f64], dst: &mut [f64]) {
    debug_assert_eq!(src.len(), dst.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_layer(seed: u64) -> Network {
        Network::new(
            vec![3],
            vec![
                Layer::affine(3, 5),
                Layer::ReLU,
                Layer::affine(5, 2),
            ],
            2,
        )
        .unwrap()
        .init(InitScheme::Kaiming, seed)
    }

    #[test]
    fn identity_affine_passes_input_through() {
        let mut layer = Layer::affine(2, 2);
        if let Layer::Affine { weight, .. } = &mut layer {
            weight[0] = 1.0;
            weight[3] = 1.0;
        }
        let net = Network::new(vec![2], vec![layer], 2).unwrap();
        let out = net.forward(&Tensor::from_slice(&[1.0, 2.0])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_clamps_negative() {
        let net = Network::new(vec![2], vec![Layer::ReLU], 2).unwrap();
        let out = net.forward(&Tensor::from_slice(&[-1.0, 3.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 3.0]);
    }

    #[test]
    fn forward_matches_hand_matrix_product() {
        // Two affine layers without ReLU compose to a single matrix product.
        let mut l1 = Layer::affine(3, 2);
        if let Layer::Affine { weight, bias, .. } = &mut l1 {
            weight.copy_from_slice(&[0.5, -1.0, 2.0, 1.5, 0.25, -0.5]);
            bias.copy_from_slice(&[0.1, -0.2]);
        }
        let mut l2 = Layer::affine(2, 2);
        if let Layer::Affine { weight, bias, .. } = &mut l2 {
            weight.copy_from_slice(&[1.0, -1.0, 2.0, 0.5]);
            bias.copy_from_slice(&[0.0, 1.0]);
        }
        let net = Network::new(vec![3], vec![l1, l2], 2).unwrap();
        let x = [0.3, -0.7, 0.2];
        let h = [
            0.5 * x[0] - 1.0 * x[1] + 2.0 * x[2] + 0.1,
            1.5 * x[0] + 0.25 * x[1] - 0.5 * x[2] - 0.2,
        ];
        let expect = [h[0] - h[1], 2.0 * h[0] + 0.5 * h[1] + 1.0];
        let got = net.forward(&Tensor::from_slice(&x)).unwrap();
        for (g, e) in got.data().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn symmetric_logits_give_ln2() {
        // Zero-initialized network forces logits (0, 0).
        let net = Network::new(vec![2], vec![Layer::affine(2, 2)], 2).unwrap();
        let (loss, _) = net.backward_ce(&Tensor::from_slice(&[1.0, 1.0]), 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn invalid_class_errors() {
        let net = two_layer(1);
        let err = net.backward_ce(&Tensor::from_slice(&[0.0; 3]), 2);
        assert!(matches!(err, Err(CureError::InvalidClass { .. })));
    }

    #[test]
    fn zero_input_zero_bias_affine_weight_grads_vanish() {
        let net = two_layer(3);
        let (_, grads) = net.backward_ce(&Tensor::from_slice(&[0.0; 3]), 0).unwrap();
        // First affine layer sees the zero input, so its weight gradient is zero.
        let first = grads.layer(0);
        let (dw, _db) = first.split_at(3 * 5);
        assert!(dw.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ce_gradients_match_finite_differences() {
        let net = two_layer(42);
        let x = Tensor::from_slice(&[0.4, -0.3, 0.9]);
        let (_, grads) = net.backward_ce(&x, 1).unwrap();
        let h = 1e-4;
        let slots = net.param_layer_indices();
        for (slot, &layer_idx) in slots.iter().enumerate() {
            for j in 0..net.layers()[layer_idx].param_len() {
                let mut plus = net.clone();
                let mut minus = net.clone();
                perturb(&mut plus, slot, j, h);
                perturb(&mut minus, slot, j, -h);
                let lp = plus.backward_ce(&x, 1).unwrap().0;
                let lm = minus.backward_ce(&x, 1).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.layer(slot)[j];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "slot {slot} param {j}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    fn perturb(net: &mut Network, slot: usize, j: usize, h: f64) {
        let mut delta = UpdateDelta::zeros_like(net);
        delta.layer_mut(slot)[j] = h;
        net.apply_delta(&delta, 1.0);
    }

    #[test]
    fn conv_forward_matches_dense_equivalent() {
        // 1x4x4 input, 2 output channels, kernel 2, stride 2, no padding.
        let geom = ConvGeom {
            in_channels: 1,
            in_h: 4,
            in_w: 4,
            out_channels: 2,
            kernel: 2,
            stride: 2,
            padding: 0,
        };
        let net = Network::new(
            vec![1, 4, 4],
            vec![Layer::conv2d(geom.clone()), Layer::Flatten, Layer::affine(8, 3)],
            3,
        )
        .unwrap()
        .init(InitScheme::Kaiming, 9);
        let x: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        let out = net.forward(&Tensor::new(vec![1, 4, 4], x.clone()).unwrap()).unwrap();

        // Hand-compute the conv output for position (0, 0) of channel 0.
        let (w, b) = params_of(&net.layers()[0]);
        let hand = b[0] + w[0] * x[0] + w[1] * x[1] + w[2] * x[4] + w[3] * x[5];
        let tape = net.forward_tape(&x).unwrap();
        assert!((tape[1][0] - hand).abs() < 1e-12);
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let geom = ConvGeom {
            in_channels: 1,
            in_h: 5,
            in_w: 5,
            out_channels: 2,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let net = Network::new(
            vec![1, 5, 5],
            vec![
                Layer::conv2d(geom),
                Layer::ReLU,
                Layer::Flatten,
                Layer::affine(2 * 3 * 3, 2),
            ],
            2,
        )
        .unwrap()
        .init(InitScheme::Kaiming, 17);
        let x: Vec<f64> = (0..25).map(|i| ((i * 7) % 11) as f64 / 11.0).collect();
        let xt = Tensor::new(vec![1, 5, 5], x).unwrap();
        let (_, grads) = net.backward_ce(&xt, 1).unwrap();
        let h = 1e-4;
        for slot in 0..grads.num_layers() {
            for j in 0..grads.layer(slot).len() {
                let mut plus = net.clone();
                let mut minus = net.clone();
                perturb(&mut plus, slot, j, h);
                perturb(&mut minus, slot, j, -h);
                let fd = (plus.backward_ce(&xt, 1).unwrap().0
                    - minus.backward_ce(&xt, 1).unwrap().0)
                    / (2.0 * h);
                let an = grads.layer(slot)[j];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "slot {slot} param {j}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = two_layer(5);
        let b = two_layer(5);
        let c = two_layer(6);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn delta_roundtrip() {
        let a = two_layer(1);
        let b = two_layer(2);
        let d = a.delta_to(&b).unwrap();
        let mut moved = a.clone();
        moved.apply_delta(&d, 1.0);
        for (la, lb) in moved.layers().iter().zip(b.layers()) {
            let (wa, ba) = params_of(la);
            let (wb, bb) = params_of(lb);
            for (x, y) in wa.iter().chain(ba).zip(wb.iter().chain(bb)) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }
}

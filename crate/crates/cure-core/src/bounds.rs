//! Differentiable interval (box) bound propagation.
//!
//! A box maps through an affine layer as center/radius: the center follows
//! `W m + b`, the radius follows `|W| r`. ReLU clamps both bounds at zero.
//! Logit-difference upper bounds come either from the plain output box
//! (`upper_i - lower_y`) or, tighter, by folding the difference rows
//! `(W_i - W_y, b_i - b_y)` into the final affine layer before the last
//! propagation step (last-layer elision).
//!
//! The backward pass differentiates the bound computation with respect to
//! network parameters; the `|W|` path uses `sign(W)` with `sign(0) = 0`.

use crate::error::{CureError, Result};
use crate::network::{conv_forward, ConvGeom, Layer, Network, UpdateDelta};
use crate::tensor::Tensor;

/// Elementwise lower/upper bound pair for one activation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    /// Validated constructor: equal lengths, lower <= upper, both finite.
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(CureError::DimensionMismatch(format!(
                "bounds lengths {} vs {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite()) {
                return Err(CureError::NonFinite {
                    layer: 0,
                    context: format!("input bound {i}"),
                });
            }
            if l > u {
                return Err(CureError::DimensionMismatch(format!(
                    "lower {l} > upper {u} at index {i}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// Degenerate box at a point.
    pub fn point(x: &[f64]) -> Self {
        Self {
            lower: x.to_vec(),
            upper: x.to_vec(),
        }
    }

    /// Box `[center - radius, center + radius]`, elementwise radius.
    pub fn around(center: &[f64], radius: &[f64]) -> Self {
        let lower = center.iter().zip(radius).map(|(c, r)| c - r).collect();
        let upper = center.iter().zip(radius).map(|(c, r)| c + r).collect();
        Self { lower, upper }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn radius(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (u - l))
            .collect()
    }

    pub fn contains(&self, x: &[f64], slack: f64) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *v >= l - slack && *v <= u + slack)
    }

    pub fn all_finite(&self) -> bool {
        self.lower.iter().chain(&self.upper).all(|v| v.is_finite())
    }

    pub fn lower_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.lower)
    }

    pub fn upper_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.upper)
    }
}

/// The l-inf ball around `x` clamped to the unit hypercube,
/// `clamp((x - eps, x + eps), 0, 1)`.
pub fn clamped_linf_box(x: &[f64], eps: f64) -> BoxBounds {
    let lower = x.iter().map(|v| (v - eps).max(0.0)).collect();
    let upper = x.iter().map(|v| (v + eps).min(1.0)).collect();
    BoxBounds { lower, upper }
}

/// Per-layer absolute weights, shared across the bound evaluations of one
/// batch so the `|W|` buffers are built once per step.
pub struct AbsWeights {
    per_layer: Vec<Option<Vec<f64>>>,
}

impl AbsWeights {
    pub fn new(net: &Network) -> Self {
        let per_layer = net
            .layers()
            .iter()
            .map(|layer| match layer {
                Layer::Affine { weight, .. } | Layer::Conv2d { weight, .. } => {
                    Some(weight.iter().map(|w| w.abs()).collect())
                }
                _ => None,
            })
            .collect();
        Self { per_layer }
    }

    fn layer(&self, i: usize) -> &[f64] {
        self.per_layer[i].as_deref().expect("parameterized layer")
    }
}

fn affine_box_step(
    weight: &[f64],
    abs_weight: &[f64],
    bias: &[f64],
    in_dim: usize,
    out_dim: usize,
    input: &BoxBounds,
) -> BoxBounds {
    let center = input.center();
    let radius = input.radius();
    let mut lower = Vec::with_capacity(out_dim);
    let mut upper = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let row = &weight[o * in_dim..(o + 1) * in_dim];
        let abs_row = &abs_weight[o * in_dim..(o + 1) * in_dim];
        let m = bias[o] + crate::tensor::dot(row, &center);
        let r = crate::tensor::dot(abs_row, &radius);
        lower.push(m - r);
        upper.push(m + r);
    }
    BoxBounds { lower, upper }
}

fn conv_box_step(
    geom: &ConvGeom,
    weight: &[f64],
    abs_weight: &[f64],
    bias: &[f64],
    input: &BoxBounds,
) -> BoxBounds {
    let n = input.len();
    let mut center = vec![0.0; n];
    let mut radius = vec![0.0; n];
    for i in 0..n {
        center[i] = 0.5 * (input.lower[i] + input.upper[i]);
        radius[i] = 0.5 * (input.upper[i] - input.lower[i]);
    }
    let zero_bias = vec![0.0; geom.out_channels];
    let m_out = conv_forward(geom, weight, bias, &center);
    let r_out = conv_forward(geom, abs_weight, &zero_bias, &radius);
    let lower = m_out.iter().zip(&r_out).map(|(m, r)| m - r).collect();
    let upper = m_out.iter().zip(&r_out).map(|(m, r)| m + r).collect();
    BoxBounds { lower, upper }
}

fn box_step(layer: &Layer, abs: &[f64], input: &BoxBounds) -> BoxBounds {
    match layer {
        Layer::Affine {
            weight,
            bias,
            in_dim,
            out_dim,
        } => affine_box_step(weight, abs, bias, *in_dim, *out_dim, input),
        Layer::Conv2d { weight, bias, geom } => conv_box_step(geom, weight, abs, bias, input),
        Layer::ReLU => BoxBounds {
            lower: input.lower.iter().map(|l| l.max(0.0)).collect(),
            upper: input.upper.iter().map(|u| u.max(0.0)).collect(),
        },
        Layer::Flatten => input.clone(),
    }
}

/// Propagate a box through every layer. Returns one output box per layer.
pub fn propagate_box(net: &Network, input: &BoxBounds) -> Result<Vec<BoxBounds>> {
    if input.len() != net.input_len() {
        return Err(CureError::ShapeMismatch {
            layer: 0,
            expected: format!("{} inputs", net.input_len()),
            got: format!("{}", input.len()),
        });
    }
    let abs = AbsWeights::new(net);
    let tape = box_tape(net, &abs, input, net.layers().len())?;
    Ok(tape.into_iter().skip(1).collect())
}

/// Box propagation through the first `upto` layers, keeping the full tape.
/// `tape[0]` is the input box, `tape[i + 1]` the output of layer `i`.
fn box_tape(
    net: &Network,
    abs: &AbsWeights,
    input: &BoxBounds,
    upto: usize,
) -> Result<Vec<BoxBounds>> {
    let mut tape = Vec::with_capacity(upto + 1);
    tape.push(input.clone());
    for (i, layer) in net.layers()[..upto].iter().enumerate() {
        let abs_w: &[f64] = if layer.is_parameterized() {
            abs.layer(i)
        } else {
            &[]
        };
        let out = box_step(layer, abs_w, tape.last().expect("tape"));
        if !out.all_finite() {
            return Err(CureError::NonFinite {
                layer: i,
                context: "propagated bound overflow".to_string(),
            });
        }
        tape.push(out);
    }
    Ok(tape)
}

/// Upper bounds on logit differences `o_i - o_y` over the input box.
/// Entry `y` is zero. With `elide_last` the final affine layer is replaced
/// by its difference rows before the last propagation step, which is never
/// looser than bounding from the plain output box.
pub fn logit_diff_upper(
    net: &Network,
    input: &BoxBounds,
    y: usize,
    elide_last: bool,
) -> Result<Vec<f64>> {
    let abs = AbsWeights::new(net);
    let eval = bound_forward(net, &abs, input, y, elide_last)?;
    Ok(eval.u_delta)
}

/// Forward bound state kept for the backward pass.
pub struct BoundEval {
    /// Logit-difference upper bounds; entry `y` is exactly zero.
    pub u_delta: Vec<f64>,
    tape: Vec<BoxBounds>,
    y: usize,
    elided: bool,
}

impl BoundEval {
    pub fn label(&self) -> usize {
        self.y
    }
}

/// Run box propagation and produce logit-difference upper bounds together
/// with the tape needed to differentiate them.
pub fn bound_forward(
    net: &Network,
    abs: &AbsWeights,
    input: &BoxBounds,
    y: usize,
    elide_last: bool,
) -> Result<BoundEval> {
    let k = net.num_classes();
    if y >= k {
        return Err(CureError::InvalidClass {
            index: y,
            num_classes: k,
        });
    }
    if input.len() != net.input_len() {
        return Err(CureError::ShapeMismatch {
            layer: 0,
            expected: format!("{} inputs", net.input_len()),
            got: format!("{}", input.len()),
        });
    }
    let n_layers = net.layers().len();
    if elide_last {
        let last = net.layers().last().ok_or_else(|| {
            CureError::UnsupportedStructure("empty network".to_string())
        })?;
        let Layer::Affine {
            weight,
            bias,
            in_dim,
            out_dim,
        } = last
        else {
            return Err(CureError::UnsupportedStructure(
                "last-layer elision requires a final affine layer".to_string(),
            ));
        };
        let tape = box_tape(net, abs, input, n_layers - 1)?;
        let pre = tape.last().expect("tape");
        let mut u_delta = vec![0.0; k];
        let wy = &weight[y * in_dim..(y + 1) * in_dim];
        for i in 0..*out_dim {
            if i == y {
                continue;
            }
            let wi = &weight[i * in_dim..(i + 1) * in_dim];
            let mut acc = bias[i] - bias[y];
            for j in 0..*in_dim {
                let d = wi[j] - wy[j];
                let c = 0.5 * (pre.lower[j] + pre.upper[j]);
                let r = 0.5 * (pre.upper[j] - pre.lower[j]);
                acc += d * c + d.abs() * r;
            }
            u_delta[i] = acc;
        }
        if !u_delta.iter().all(|v| v.is_finite()) {
            return Err(CureError::NonFinite {
                layer: n_layers - 1,
                context: "elided logit differences".to_string(),
            });
        }
        Ok(BoundEval {
            u_delta,
            tape,
            y,
            elided: true,
        })
    } else {
        let tape = box_tape(net, abs, input, n_layers)?;
        let out = tape.last().expect("tape");
        let mut u_delta = vec![0.0; k];
        for i in 0..k {
            if i != y {
                u_delta[i] = out.upper[i] - out.lower[y];
            }
        }
        Ok(BoundEval {
            u_delta,
            tape,
            y,
            elided: false,
        })
    }
}

/// Backward pass from a gradient on `u_delta` (entry `y` ignored) to
/// parameter gradients, accumulated into `grads`.
pub fn bound_backward(
    net: &Network,
    abs: &AbsWeights,
    eval: &BoundEval,
    d_udelta: &[f64],
    grads: &mut UpdateDelta,
) {
    let layers = net.layers();
    let y = eval.y;
    let propagated = if eval.elided {
        layers.len() - 1
    } else {
        layers.len()
    };
    // Gradient on the box entering each already-propagated layer, expressed
    // as (d_lower, d_upper) of that layer's OUTPUT, then pulled back.
    let out_box = eval.tape.last().expect("tape");
    let mut d_lower = vec![0.0; out_box.len()];
    let mut d_upper = vec![0.0; out_box.len()];

    let mut param_slot = layers.iter().filter(|l| l.is_parameterized()).count();

    if eval.elided {
        let Layer::Affine {
            weight,
            in_dim,
            out_dim,
            ..
        } = &layers[layers.len() - 1]
        else {
            unreachable!("elided eval implies final affine layer");
        };
        param_slot -= 1;
        let pre = out_box; // input box of the elided layer
        let grad_layer = grads.layer_mut(param_slot);
        let (dw, db) = grad_layer.split_at_mut(out_dim * in_dim);
        let wy = &weight[y * in_dim..(y + 1) * in_dim];
        let mut dm = vec![0.0; *in_dim];
        let mut dr = vec![0.0; *in_dim];
        for i in 0..*out_dim {
            if i == y {
                continue;
            }
            let g = d_udelta[i];
            if g == 0.0 {
                continue;
            }
            let wi = &weight[i * in_dim..(i + 1) * in_dim];
            db[i] += g;
            db[y] -= g;
            let (dwi, rest) = if i < y {
                let (a, b) = dw.split_at_mut(y * in_dim);
                (&mut a[i * in_dim..(i + 1) * in_dim], &mut b[..*in_dim])
            } else {
                let (a, b) = dw.split_at_mut(i * in_dim);
                (&mut b[..*in_dim], &mut a[y * in_dim..(y + 1) * in_dim])
            };
            let dwy = rest;
            for j in 0..*in_dim {
                let d = wi[j] - wy[j];
                let c = 0.5 * (pre.lower[j] + pre.upper[j]);
                let r = 0.5 * (pre.upper[j] - pre.lower[j]);
                let sign = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let coeff = c + sign * r;
                dwi[j] += g * coeff;
                dwy[j] -= g * coeff;
                dm[j] += g * d;
                dr[j] += g * d.abs();
            }
        }
        for j in 0..*in_dim {
            d_lower[j] = 0.5 * (dm[j] - dr[j]);
            d_upper[j] = 0.5 * (dm[j] + dr[j]);
        }
    } else {
        let mut sum = 0.0;
        for i in 0..d_udelta.len() {
            if i != y {
                d_upper[i] = d_udelta[i];
                sum += d_udelta[i];
            }
        }
        d_lower[y] = -sum;
    }

    // Pull (d_lower, d_upper) back through the propagated prefix.
    walk_backward(
        net,
        abs,
        &eval.tape,
        propagated,
        param_slot,
        &mut d_lower,
        &mut d_upper,
        grads,
        &[],
    );
}

/// Pull bound gradients back through layers `0..propagated`, accumulating
/// parameter gradients. `inject` supplies extra (d_lower, d_upper)
/// contributions keyed by tape position, added when the walk reaches them.
#[allow(clippy::too_many_arguments)]
fn walk_backward(
    net: &Network,
    abs: &AbsWeights,
    tape: &[BoxBounds],
    propagated: usize,
    mut param_slot: usize,
    d_lower: &mut Vec<f64>,
    d_upper: &mut Vec<f64>,
    grads: &mut UpdateDelta,
    inject: &[(usize, Vec<f64>, Vec<f64>)],
) {
    let layers = net.layers();
    for i in (0..propagated).rev() {
        for (pos, dl, du) in inject {
            if *pos == i + 1 {
                for (a, b) in d_lower.iter_mut().zip(dl) {
                    *a += b;
                }
                for (a, b) in d_upper.iter_mut().zip(du) {
                    *a += b;
                }
            }
        }
        let layer = &layers[i];
        let in_box = &tape[i];
        match layer {
            Layer::Affine {
                weight,
                in_dim,
                out_dim,
                ..
            } => {
                param_slot -= 1;
                let abs_w = abs.layer(i);
                let grad_layer = grads.layer_mut(param_slot);
                let (dw, db) = grad_layer.split_at_mut(out_dim * in_dim);
                let center = in_box.center();
                let radius = in_box.radius();
                let mut dm_in = vec![0.0; *in_dim];
                let mut dr_in = vec![0.0; *in_dim];
                for o in 0..*out_dim {
                    let dm = d_lower[o] + d_upper[o];
                    let dr = d_upper[o] - d_lower[o];
                    db[o] += dm;
                    if dm == 0.0 && dr == 0.0 {
                        continue;
                    }
                    let row = &weight[o * in_dim..(o + 1) * in_dim];
                    let abs_row = &abs_w[o * in_dim..(o + 1) * in_dim];
                    let dw_row = &mut dw[o * in_dim..(o + 1) * in_dim];
                    for j in 0..*in_dim {
                        let w = row[j];
                        let sign = f64::from(u8::from(w > 0.0)) - f64::from(u8::from(w < 0.0));
                        dw_row[j] += dm * center[j] + dr * sign * radius[j];
                    }
                    crate::network::axpy(dm, row, &mut dm_in);
                    crate::network::axpy(dr, abs_row, &mut dr_in);
                }
                resize_and_split(d_lower, d_upper, &dm_in, &dr_in);
            }
            Layer::Conv2d { weight, geom, .. } => {
                param_slot -= 1;
                let abs_w = abs.layer(i);
                let center = in_box.center();
                let radius = in_box.radius();
                let n_out = geom.out_len();
                let mut dm_out = vec![0.0; n_out];
                let mut dr_out = vec![0.0; n_out];
                for o in 0..n_out {
                    dm_out[o] = d_lower[o] + d_upper[o];
                    dr_out[o] = d_upper[o] - d_lower[o];
                }
                let grad_layer = grads.layer_mut(param_slot);
                let (dw, db) = grad_layer.split_at_mut(geom.weight_len());
                let mut dm_in = vec![0.0; geom.in_len()];
                let mut dr_in = vec![0.0; geom.in_len()];
                conv_box_backward(
                    geom, weight, abs_w, &center, &radius, &dm_out, &dr_out, dw, db, &mut dm_in,
                    &mut dr_in,
                );
                resize_and_split(d_lower, d_upper, &dm_in, &dr_in);
            }
            Layer::ReLU => {
                for j in 0..in_box.len() {
                    if in_box.lower[j] <= 0.0 {
                        d_lower[j] = 0.0;
                    }
                    if in_box.upper[j] <= 0.0 {
                        d_upper[j] = 0.0;
                    }
                }
            }
            Layer::Flatten => {}
        }
    }
}

/// Warm-up regularization terms over one propagated box: a bound-tightness
/// penalty (mean output-box radius) and a ReLU-balance penalty (squared
/// relative offset `((u + l) / (u - l))^2` of unstable pre-activations).
/// Returns the two raw penalty values and accumulates
/// `tight_coeff * d(tight) + relu_coeff * d(relu)` into `grads`.
pub fn box_penalty_grad(
    net: &Network,
    abs: &AbsWeights,
    input: &BoxBounds,
    tight_coeff: f64,
    relu_coeff: f64,
    grads: &mut UpdateDelta,
) -> Result<(f64, f64)> {
    let n_layers = net.layers().len();
    let tape = box_tape(net, abs, input, n_layers)?;
    let out_box = tape.last().expect("tape");

    // Tightness: mean radius of the final box.
    let m = out_box.len() as f64;
    let tight: f64 = out_box
        .lower
        .iter()
        .zip(&out_box.upper)
        .map(|(l, u)| 0.5 * (u - l))
        .sum::<f64>()
        / m;
    let mut d_lower = vec![-tight_coeff * 0.5 / m; out_box.len()];
    let mut d_upper = vec![tight_coeff * 0.5 / m; out_box.len()];

    // ReLU balance: collect unstable neurons across all ReLU inputs.
    let mut unstable = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        if matches!(layer, Layer::ReLU) {
            let in_box = &tape[i];
            for j in 0..in_box.len() {
                if in_box.lower[j] < 0.0 && in_box.upper[j] > 0.0 {
                    unstable.push((i, j));
                }
            }
        }
    }
    let mut relu = 0.0;
    let mut inject: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
    if !unstable.is_empty() {
        let count = unstable.len() as f64;
        let mut per_pos: std::collections::BTreeMap<usize, (Vec<f64>, Vec<f64>)> =
            std::collections::BTreeMap::new();
        for (i, j) in unstable {
            let in_box = &tape[i];
            let (l, u) = (in_box.lower[j], in_box.upper[j]);
            let width = u - l;
            let z = (u + l) / width;
            relu += z * z / count;
            let scale = relu_coeff * 2.0 * z / count;
            let entry = per_pos
                .entry(i)
                .or_insert_with(|| (vec![0.0; in_box.len()], vec![0.0; in_box.len()]));
            entry.0[j] += scale * 2.0 * u / (width * width);
            entry.1[j] += scale * (-2.0 * l) / (width * width);
        }
        for (pos, (dl, du)) in per_pos {
            inject.push((pos, dl, du));
        }
    }

    let param_slot = net.layers().iter().filter(|l| l.is_parameterized()).count();
    walk_backward(
        net,
        abs,
        &tape,
        n_layers,
        param_slot,
        &mut d_lower,
        &mut d_upper,
        grads,
        &inject,
    );
    Ok((tight, relu))
}

fn resize_and_split(d_lower: &mut Vec<f64>, d_upper: &mut Vec<f64>, dm: &[f64], dr: &[f64]) {
    d_lower.clear();
    d_upper.clear();
    for (m, r) in dm.iter().zip(dr) {
        d_lower.push(0.5 * (m - r));
        d_upper.push(0.5 * (m + r));
    }
}

/// Conv box-propagation backward: center path through `W`, radius path
/// through `|W|` folded with `sign(W)`, all over patch matrices.
#[allow(clippy::too_many_arguments)]
fn conv_box_backward(
    geom: &ConvGeom,
    weight: &[f64],
    abs_weight: &[f64],
    center: &[f64],
    radius: &[f64],
    dm_out: &[f64],
    dr_out: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dm_in: &mut [f64],
    dr_in: &mut [f64],
) {
    use crate::network::{axpy, gather_patches, scatter_patches_add, PatchMatrix};
    let positions = geom.out_h() * geom.out_w();
    let taps = geom.in_channels * geom.kernel * geom.kernel;
    let cols_c = gather_patches(geom, center);
    let cols_r = gather_patches(geom, radius);
    let mut d_cols_m = PatchMatrix {
        data: vec![0.0; taps * positions],
        taps,
        positions,
    };
    let mut d_cols_r = PatchMatrix {
        data: vec![0.0; taps * positions],
        taps,
        positions,
    };
    let mut dw_radius = vec![0.0; taps];
    for co in 0..geom.out_channels {
        let gm_c = &dm_out[co * positions..(co + 1) * positions];
        let gr_c = &dr_out[co * positions..(co + 1) * positions];
        db[co] += gm_c.iter().sum::<f64>();
        let w_row = &weight[co * taps..(co + 1) * taps];
        let aw_row = &abs_weight[co * taps..(co + 1) * taps];
        let dw_row = &mut dw[co * taps..(co + 1) * taps];
        dw_radius.fill(0.0);
        for pos in 0..positions {
            let gm = gm_c[pos];
            let gr = gr_c[pos];
            if gm != 0.0 {
                axpy(gm, cols_c.row(pos), dw_row);
                axpy(gm, w_row, &mut d_cols_m.data[pos * taps..(pos + 1) * taps]);
            }
            if gr != 0.0 {
                axpy(gr, cols_r.row(pos), &mut dw_radius);
                axpy(gr, aw_row, &mut d_cols_r.data[pos * taps..(pos + 1) * taps]);
            }
        }
        // Radius path reaches W through |W|: fold with sign(W), sign(0) = 0.
        for (d, (g, w)) in dw_row.iter_mut().zip(dw_radius.iter().zip(w_row)) {
            if *w > 0.0 {
                *d += g;
            } else if *w < 0.0 {
                *d -= g;
            }
        }
    }
    scatter_patches_add(geom, &d_cols_m, dm_in);
    scatter_patches_add(geom, &d_cols_r, dr_in);
}

/// The IBP loss `ln(1 + sum_{i != y} exp(u_delta_i))`: cross-entropy of the
/// pseudo-logits `(z_y = 0, z_i = u_delta_i)` against `y`.
pub fn ibp_loss(u_delta: &[f64], y: usize) -> f64 {
    ibp_loss_grad(u_delta, y).0
}

/// IBP loss and its gradient on `u_delta` (entry `y` stays zero).
pub fn ibp_loss_grad(u_delta: &[f64], y: usize) -> (f64, Vec<f64>) {
    let mut max = 0.0_f64; // pseudo-logit of y is 0
    for (i, v) in u_delta.iter().enumerate() {
        if i != y {
            max = max.max(*v);
        }
    }
    let mut denom = (-max).exp();
    for (i, v) in u_delta.iter().enumerate() {
        if i != y {
            denom += (v - max).exp();
        }
    }
    let loss = max + denom.ln();
    let mut grad = vec![0.0; u_delta.len()];
    for (i, v) in u_delta.iter().enumerate() {
        if i != y {
            grad[i] = (v - max).exp() / denom;
        }
    }
    (loss, grad)
}

/// Index of the first parameterized layer; any preceding layers must be
/// shape-only (flatten).
fn first_param_layer(net: &Network) -> Result<usize> {
    for (i, layer) in net.layers().iter().enumerate() {
        match layer {
            Layer::Affine { .. } | Layer::Conv2d { .. } => return Ok(i),
            Layer::Flatten => continue,
            Layer::ReLU => {
                return Err(CureError::UnsupportedStructure(
                    "activation before the first parameterized layer".to_string(),
                ))
            }
        }
    }
    Err(CureError::UnsupportedStructure(
        "network has no parameterized layer".to_string(),
    ))
}

/// Per-output-unit l2 norms of the first parameterized layer's effective
/// weight vectors. For convolutions, border units exclude out-of-range taps
/// (padding contributes constants, not perturbable inputs).
fn first_layer_row_norms(layer: &Layer) -> Vec<f64> {
    match layer {
        Layer::Affine {
            weight,
            in_dim,
            out_dim,
            ..
        } => (0..*out_dim)
            .map(|o| {
                weight[o * in_dim..(o + 1) * in_dim]
                    .iter()
                    .map(|w| w * w)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect(),
        Layer::Conv2d { weight, geom, .. } => {
            let (h_out, w_out) = (geom.out_h(), geom.out_w());
            let (h_in, w_in, k, s, p) =
                (geom.in_h, geom.in_w, geom.kernel, geom.stride, geom.padding);
            let mut norms = vec![0.0; geom.out_len()];
            for co in 0..geom.out_channels {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut acc = 0.0;
                        for ci in 0..geom.in_channels {
                            let w_base = (co * geom.in_channels + ci) * k * k;
                            for ky in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                if iy < 0 || iy as usize >= h_in {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if ix < 0 || ix as usize >= w_in {
                                        continue;
                                    }
                                    let w = weight[w_base + ky * k + kx];
                                    acc += w * w;
                                }
                            }
                        }
                        norms[co * h_out * w_out + oy * w_out + ox] = acc.sqrt();
                    }
                }
            }
            norms
        }
        _ => Vec::new(),
    }
}

/// Sound box for the first parameterized layer's output over the l2 ball
/// `||x' - x||_2 <= eps2` intersected with the unit hypercube.
///
/// Two sound intervals are intersected per unit: the Cauchy-Schwarz bound
/// `w_j . x + b_j +- eps2 ||w_j||_2` (tight for the unclamped ball) and the
/// box image of the clamped bounding box.
pub fn l2_certified_box(net: &Network, x: &[f64], eps2: f64) -> Result<BoxBounds> {
    let idx = first_param_layer(net)?;
    if x.len() != net.input_len() {
        return Err(CureError::ShapeMismatch {
            layer: 0,
            expected: format!("{} inputs", net.input_len()),
            got: format!("{}", x.len()),
        });
    }
    let layer = &net.layers()[idx];
    let abs = AbsWeights::new(net);
    // Box route: image of the clamped bounding box of the ball.
    let bb = clamped_linf_box(x, eps2);
    let box_img = box_step(layer, abs.layer(idx), &bb);
    // Cauchy-Schwarz route: exact center at x plus eps2 * row norm.
    let centered = match layer {
        Layer::Affine {
            weight,
            bias,
            in_dim,
            out_dim,
        } => crate::network::affine_forward(weight, bias, *in_dim, *out_dim, x),
        Layer::Conv2d { weight, bias, geom } => conv_forward(geom, weight, bias, x),
        _ => unreachable!("first_param_layer returns parameterized layers"),
    };
    let norms = first_layer_row_norms(layer);
    let mut lower = Vec::with_capacity(centered.len());
    let mut upper = Vec::with_capacity(centered.len());
    for j in 0..centered.len() {
        let cs_l = centered[j] - eps2 * norms[j];
        let cs_u = centered[j] + eps2 * norms[j];
        let l = cs_l.max(box_img.lower[j]);
        let u = cs_u.min(box_img.upper[j]);
        // Both intervals contain the true image, so they overlap; guard the
        // degenerate rounding case.
        lower.push(l.min(u));
        upper.push(u.max(l));
    }
    BoxBounds::new(lower, upper)
}

/// Logit-difference upper bounds over the l2 ball: Cauchy-Schwarz first
/// layer, box propagation after, last-layer elision optional.
pub fn l2_logit_diff_upper(
    net: &Network,
    x: &[f64],
    y: usize,
    eps2: f64,
    elide_last: bool,
) -> Result<Vec<f64>> {
    let k = net.num_classes();
    if y >= k {
        return Err(CureError::InvalidClass {
            index: y,
            num_classes: k,
        });
    }
    let idx = first_param_layer(net)?;
    let n_layers = net.layers().len();
    if elide_last && idx == n_layers - 1 {
        // Single parameterized layer producing the logits: apply
        // Cauchy-Schwarz directly to the difference rows, intersected with
        // the elided bound from the clamped bounding box.
        let Layer::Affine {
            weight,
            bias,
            in_dim,
            ..
        } = &net.layers()[idx]
        else {
            return Err(CureError::UnsupportedStructure(
                "last-layer elision requires a final affine layer".to_string(),
            ));
        };
        let bb = clamped_linf_box(x, eps2);
        let mut u_delta = vec![0.0; k];
        let wy = &weight[y * in_dim..(y + 1) * in_dim];
        for i in 0..k {
            if i == y {
                continue;
            }
            let wi = &weight[i * in_dim..(i + 1) * in_dim];
            let mut cs = bias[i] - bias[y];
            let mut norm_sq = 0.0;
            let mut boxed = bias[i] - bias[y];
            for j in 0..*in_dim {
                let d = wi[j] - wy[j];
                cs += d * x[j];
                norm_sq += d * d;
                let c = 0.5 * (bb.lower[j] + bb.upper[j]);
                let r = 0.5 * (bb.upper[j] - bb.lower[j]);
                boxed += d * c + d.abs() * r;
            }
            u_delta[i] = (cs + eps2 * norm_sq.sqrt()).min(boxed);
        }
        return Ok(u_delta);
    }
    let first_box = l2_certified_box(net, x, eps2)?;
    let tail = Network::new(
        net.layer_out_shape(idx).to_vec(),
        net.layers()[idx + 1..].to_vec(),
        k,
    )?;
    logit_diff_upper(&tail, &first_box, y, elide_last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::InitScheme;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64) -> Network {
        Network::new(
            vec![3],
            vec![
                Layer::affine(3, 6),
                Layer::ReLU,
                Layer::affine(6, 4),
                Layer::ReLU,
                Layer::affine(4, 3),
            ],
            3,
        )
        .unwrap()
        .init(InitScheme::Kaiming, seed)
    }

    #[test]
    fn relu_box() {
        let net = Network::new(vec![2], vec![Layer::ReLU], 2).unwrap();
        let out = propagate_box(
            &net,
            &BoxBounds::new(vec![-1.0, -1.0], vec![2.0, 2.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(out[0].lower, vec![0.0, 0.0]);
        assert_eq!(out[0].upper, vec![2.0, 2.0]);
    }

    #[test]
    fn identity_affine_box() {
        let mut layer = Layer::affine(2, 2);
        if let Layer::Affine { weight, .. } = &mut layer {
            weight[0] = 1.0;
            weight[3] = 1.0;
        }
        let net = Network::new(vec![2], vec![layer], 2).unwrap();
        let input = BoxBounds::new(vec![-0.5, 0.25], vec![0.5, 0.75]).unwrap();
        let out = propagate_box(&net, &input).unwrap();
        for (a, b) in out[0].lower.iter().zip(&input.lower) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in out[0].upper.iter().zip(&input.upper) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn monte_carlo_containment() {
        let net = small_net(11);
        let input = BoxBounds::new(vec![0.1, 0.3, 0.2], vec![0.4, 0.6, 0.5]).unwrap();
        let boxes = propagate_box(&net, &input).unwrap();
        let out_box = boxes.last().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let x: Vec<f64> = input
                .lower
                .iter()
                .zip(&input.upper)
                .map(|(l, u)| rng.random_range(*l..=*u))
                .collect();
            let logits = net.forward(&Tensor::from_slice(&x)).unwrap();
            assert!(out_box.contains(logits.data(), 1e-9));
        }
    }

    #[test]
    fn zero_radius_box_gives_exact_logit_diffs() {
        let net = small_net(5);
        let x = [0.2, 0.8, 0.5];
        let logits = net.forward(&Tensor::from_slice(&x)).unwrap();
        let input = BoxBounds::point(&x);
        for elide in [false, true] {
            let ud = logit_diff_upper(&net, &input, 1, elide).unwrap();
            assert_eq!(ud[1], 0.0);
            for i in 0..3 {
                if i != 1 {
                    let expect = logits.data()[i] - logits.data()[1];
                    assert!(
                        (ud[i] - expect).abs() < 1e-9,
                        "elide={elide} i={i}: {} vs {expect}",
                        ud[i]
                    );
                }
            }
        }
    }

    #[test]
    fn elided_bounds_never_looser() {
        for seed in 0..20 {
            let net = small_net(seed);
            let input = BoxBounds::new(vec![0.0, 0.1, 0.2], vec![0.5, 0.4, 0.9]).unwrap();
            let plain = logit_diff_upper(&net, &input, 0, false).unwrap();
            let elided = logit_diff_upper(&net, &input, 0, true).unwrap();
            for (e, p) in elided.iter().zip(&plain) {
                assert!(e <= &(p + 1e-12), "elided {e} > plain {p}");
            }
        }
    }

    #[test]
    fn one_layer_closed_form() {
        // Plain: u = (w_i - w_y) . m + (|w_i| + |w_y|) . r + (b_i - b_y)
        // Elided replaces the absolute term with |w_i - w_y| . r.
        let mut layer = Layer::affine(2, 2);
        if let Layer::Affine { weight, bias, .. } = &mut layer {
            weight.copy_from_slice(&[1.0, -2.0, 3.0, 0.5]);
            bias.copy_from_slice(&[0.1, -0.3]);
        }
        let net = Network::new(vec![2], vec![layer], 2).unwrap();
        let m = [0.4, 0.6];
        let r = [0.05, 0.1];
        let input = BoxBounds::around(&m, &r);
        let y = 0;
        let plain = logit_diff_upper(&net, &input, y, false).unwrap();
        let expect_plain = (3.0 - 1.0) * m[0] + (0.5 - (-2.0)) * m[1]
            + (3.0_f64.abs() + 1.0_f64.abs()) * r[0]
            + (0.5_f64.abs() + 2.0_f64.abs()) * r[1]
            + (-0.3 - 0.1);
        assert!((plain[1] - expect_plain).abs() < 1e-12);
        let elided = logit_diff_upper(&net, &input, y, true).unwrap();
        let expect_elided = (3.0 - 1.0) * m[0] + (0.5 - (-2.0)) * m[1]
            + (3.0_f64 - 1.0).abs() * r[0]
            + (0.5_f64 + 2.0).abs() * r[1]
            + (-0.3 - 0.1);
        assert!((elided[1] - expect_elided).abs() < 1e-12);
    }

    #[test]
    fn ibp_loss_reference_values() {
        // k=2, the only non-true diff at 0.
        assert!((ibp_loss(&[0.0, 0.0], 1) - std::f64::consts::LN_2).abs() < 1e-9);
        // k=3, both diffs at 0.
        assert!((ibp_loss(&[0.0, 0.0, 0.0], 0) - 3.0_f64.ln()).abs() < 1e-9);
        // Large negative margins drive the loss to zero.
        assert!(ibp_loss(&[-20.0, 0.0, -20.0], 1) <= 1e-8);
    }

    #[test]
    fn ibp_loss_grad_matches_fd() {
        let u = [0.7, 0.0, -0.4, 1.2];
        let y = 1;
        let (_, grad) = ibp_loss_grad(&u, y);
        let h = 1e-6;
        for i in 0..u.len() {
            if i == y {
                continue;
            }
            let mut up = u;
            up[i] += h;
            let mut um = u;
            um[i] -= h;
            let fd = (ibp_loss(&up, y) - ibp_loss(&um, y)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn bound_gradients_match_finite_differences() {
        for elide in [true, false] {
            let net = small_net(23);
            let input = BoxBounds::new(vec![0.1, 0.2, 0.3], vec![0.3, 0.5, 0.4]).unwrap();
            let y = 2;
            let abs = AbsWeights::new(&net);
            let eval = bound_forward(&net, &abs, &input, y, elide).unwrap();
            let (_, d_ud) = ibp_loss_grad(&eval.u_delta, y);
            let mut grads = UpdateDelta::zeros_like(&net);
            bound_backward(&net, &abs, &eval, &d_ud, &mut grads);

            let h = 1e-5;
            let loss_at = |n: &Network| {
                let a = AbsWeights::new(n);
                let e = bound_forward(n, &a, &input, y, elide).unwrap();
                ibp_loss(&e.u_delta, y)
            };
            for slot in 0..grads.num_layers() {
                for j in 0..grads.layer(slot).len() {
                    let mut plus = net.clone();
                    let mut minus = net.clone();
                    let mut d = UpdateDelta::zeros_like(&net);
                    d.layer_mut(slot)[j] = h;
                    plus.apply_delta(&d, 1.0);
                    minus.apply_delta(&d, -1.0);
                    let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                    let an = grads.layer(slot)[j];
                    let denom = fd.abs().max(an.abs()).max(1e-6);
                    assert!(
                        (fd - an).abs() / denom < 1e-3,
                        "elide={elide} slot={slot} j={j}: fd {fd} vs {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn l2_box_zero_eps_is_point() {
        let net = small_net(3);
        let x = [0.5, 0.5, 0.5];
        let b = l2_certified_box(&net, &x, 0.0).unwrap();
        for (l, u) in b.lower.iter().zip(&b.upper) {
            assert!((u - l).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_box_scalar_cauchy_schwarz() {
        let mut layer = Layer::affine(1, 1);
        if let Layer::Affine { weight, .. } = &mut layer {
            weight[0] = 3.0;
        }
        let net = Network::new(vec![1], vec![layer], 1).unwrap();
        let b = l2_certified_box(&net, &[0.5], 0.1).unwrap();
        // Interior point: radius = eps * |w| = 0.3 on either route.
        assert!((b.upper[0] - b.lower[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn l2_box_at_least_as_tight_as_linf_bounding_box() {
        for seed in 0..10 {
            let net = small_net(seed + 100);
            let x = [0.3, 0.6, 0.4];
            let eps = 0.5;
            let cs = l2_certified_box(&net, &x, eps).unwrap();
            let bb = clamped_linf_box(&x, eps);
            let abs = AbsWeights::new(&net);
            let plain = box_tape(&net, &abs, &bb, 1).unwrap()[1].clone();
            for j in 0..cs.len() {
                assert!(cs.lower[j] >= plain.lower[j] - 1e-12);
                assert!(cs.upper[j] <= plain.upper[j] + 1e-12);
            }
        }
    }

    #[test]
    fn monotone_in_box_size() {
        let net = small_net(77);
        let big = BoxBounds::new(vec![0.0, 0.0, 0.0], vec![0.6, 0.6, 0.6]).unwrap();
        let small = BoxBounds::new(vec![0.1, 0.1, 0.1], vec![0.5, 0.5, 0.5]).unwrap();
        let ob = propagate_box(&net, &big).unwrap();
        let os = propagate_box(&net, &small).unwrap();
        for (bb, sb) in ob.iter().zip(&os) {
            for j in 0..bb.len() {
                assert!(sb.lower[j] >= bb.lower[j] - 1e-12);
                assert!(sb.upper[j] <= bb.upper[j] + 1e-12);
            }
        }
    }

    #[test]
    fn elision_requires_final_affine() {
        let net = Network::new(vec![2], vec![Layer::affine(2, 2), Layer::ReLU], 2).unwrap();
        let input = BoxBounds::point(&[0.1, 0.2]);
        assert!(matches!(
            logit_diff_upper(&net, &input, 0, true),
            Err(CureError::UnsupportedStructure(_))
        ));
        assert!(logit_diff_upper(&net, &input, 0, false).is_ok());
    }
}

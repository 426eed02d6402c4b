//! Multi-norm certified training losses.
//!
//! Every loss follows the same recipe: pick a propagation region for the
//! sample (PGD inside the clamped perturbation set, then a small box around
//! the endpoint), propagate it, and score the logit-difference upper bounds
//! with the IBP loss `ln(1 + sum_{i != y} exp(u_i))`. The multi-norm modes
//! combine the l-inf and l-2 branches per sample:
//!
//! - joint: convex combination with weight `alpha`,
//! - max: the worse (higher) branch loss per sample,
//! - random: an equal random batch split, one norm per block,
//! - scratch: max plus `eta` times a KL alignment term that pulls the
//!   softmax-normalized bound-difference distributions of the two norms
//!   together on the correctly certified subset of the q norm.
//!
//! Region selection is not differentiated through (the attack endpoint is
//! treated as data); gradients flow through the bound propagation only.

use crate::attack::{get_propagation_region, Norm, PropagationRegion, RegionConfig};
use crate::bounds::{bound_backward, bound_forward, ibp_loss_grad, AbsWeights, BoundEval};
use crate::error::{CureError, Result};
use crate::network::{Network, UpdateDelta};
use crate::rng::{self, stream};

/// Settings shared by all loss modes.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Joint-mode weight on the l2 branch, in [0, 1].
    pub alpha: f64,
    /// Weight of the KL alignment term in scratch mode.
    pub eta: f64,
    /// Norm whose certified subset drives the alignment (q); the other norm
    /// is r.
    pub q_norm: Norm,
    /// l1 parameter regularization weight.
    pub l1_weight: f64,
    pub eps_inf: f64,
    pub eps_2: f64,
    pub lambda_inf: f64,
    pub lambda_2: f64,
    /// Fold logit differences into the last affine layer before bounding.
    pub elide_last: bool,
    pub attack_steps: usize,
    pub attack_step_size: f64,
    /// Search the literal eps - tau ball instead of the full clamped region.
    pub truncated_search: bool,
    /// Select the certified subset from full-eps IBP bounds instead of the
    /// in-loop small-box bounds.
    pub gamma_from_full_eps: bool,
    /// Base seed; per-sample attack seeds derive from it.
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            eta: 2.0,
            q_norm: Norm::L2,
            l1_weight: 1e-6,
            eps_inf: 0.3,
            eps_2: 1.0,
            lambda_inf: 0.4,
            lambda_2: 1e-5,
            elide_last: true,
            attack_steps: 8,
            attack_step_size: 0.25,
            truncated_search: false,
            gamma_from_full_eps: false,
            seed: 0,
        }
    }
}

impl LossConfig {
    pub fn eps(&self, norm: Norm) -> f64 {
        match norm {
            Norm::LInf => self.eps_inf,
            Norm::L2 => self.eps_2,
        }
    }

    pub fn lambda(&self, norm: Norm) -> f64 {
        match norm {
            Norm::LInf => self.lambda_inf,
            Norm::L2 => self.lambda_2,
        }
    }

    fn region_config(&self, norm: Norm, sample_idx: usize) -> RegionConfig {
        RegionConfig {
            norm,
            eps: self.eps(norm),
            lambda: self.lambda(norm),
            steps: self.attack_steps,
            step_size: self.attack_step_size,
            seed: rng::derive_seed(self.seed, &[sample_idx as u64]),
            truncated_search: self.truncated_search,
        }
    }

    fn r_norm(&self) -> Norm {
        match self.q_norm {
            Norm::LInf => Norm::L2,
            Norm::L2 => Norm::LInf,
        }
    }
}

/// Training mode selecting which loss an epoch optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    LInf,
    L2,
    Joint,
    Max,
    Random,
    Scratch,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::LInf => "linf",
            LossMode::L2 => "l2",
            LossMode::Joint => "joint",
            LossMode::Max => "max",
            LossMode::Random => "random",
            LossMode::Scratch => "scratch",
        }
    }

    fn needs_linf(self) -> bool {
        !matches!(self, LossMode::L2)
    }

    fn needs_l2(self) -> bool {
        !matches!(self, LossMode::LInf)
    }
}

/// Frozen per-sample propagation regions. Region selection happens once;
/// the loss given regions is the differentiable part.
#[derive(Debug, Clone)]
pub struct FrozenRegions {
    pub linf: Vec<Option<PropagationRegion>>,
    pub l2: Vec<Option<PropagationRegion>>,
    /// For random mode: true when the sample landed in the l-inf block.
    pub linf_block: Vec<bool>,
}

/// Batch loss value, per-branch components, and parameter gradients.
#[derive(Debug)]
pub struct BatchLossOutput {
    /// Mode loss plus the l1 term.
    pub total: f64,
    /// Batch mean of the l-inf branch over samples where it was evaluated.
    pub loss_linf: f64,
    pub loss_l2: f64,
    pub loss_kl: f64,
    /// Size of the correctly certified q-norm subset (scratch mode).
    pub n_certified: usize,
    pub grads: UpdateDelta,
}

/// Samples whose q-norm bounds already prove correct classification:
/// every non-true-class difference upper bound <= 0 (non-strict).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertifiedSubset {
    pub indices: Vec<usize>,
}

impl CertifiedSubset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Membership test over batched logit-difference bounds.
pub fn certified_subset(u_deltas: &[Vec<f64>], labels: &[usize]) -> CertifiedSubset {
    let indices = u_deltas
        .iter()
        .zip(labels)
        .enumerate()
        .filter(|(_, (ud, y))| ud.iter().enumerate().all(|(i, v)| i == **y || *v <= 0.0))
        .map(|(j, _)| j)
        .collect();
    CertifiedSubset { indices }
}

/// Softmax over the non-true-class bound differences; `k - 1` positive
/// entries summing to one, in class order with `y` skipped.
pub fn bound_diff_distribution(u_delta: &[f64], y: usize) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for (i, v) in u_delta.iter().enumerate() {
        if i != y {
            max = max.max(*v);
        }
    }
    let mut out = Vec::with_capacity(u_delta.len().saturating_sub(1));
    let mut sum = 0.0;
    for (i, v) in u_delta.iter().enumerate() {
        if i != y {
            let e = (v - max).exp();
            out.push(e);
            sum += e;
        }
    }
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// KL alignment loss over the certified subset:
/// `(1/n_c) sum_{j in gamma} sum_i d_q[j][i] log(d_q[j][i] / d_r[j][i])`.
/// Zero when the subset is empty.
pub fn kl_alignment_loss(d_q: &[Vec<f64>], d_r: &[Vec<f64>], gamma: &CertifiedSubset) -> f64 {
    if gamma.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for &j in &gamma.indices {
        acc += kl_divergence(&d_q[j], &d_r[j]);
    }
    acc / gamma.len() as f64
}

fn kl_divergence(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        if *x > 0.0 {
            acc += x * (x / y.max(f64::MIN_POSITIVE)).ln();
        }
    }
    acc
}

struct BranchEval {
    loss: f64,
    d_udelta: Vec<f64>,
    eval: BoundEval,
}

fn eval_branch(
    net: &Network,
    abs: &AbsWeights,
    region: &PropagationRegion,
    y: usize,
    cfg: &LossConfig,
) -> Result<BranchEval> {
    let eval = bound_forward(net, abs, &region.as_box(), y, cfg.elide_last)?;
    let (loss, d_udelta) = ibp_loss_grad(&eval.u_delta, y);
    Ok(BranchEval {
        loss,
        d_udelta,
        eval,
    })
}

/// Select every propagation region (and the random-mode partition) a batch
/// loss needs. The result is treated as constant by the loss gradient.
pub fn select_regions(
    net: &Network,
    batch: &[(&[f64], usize)],
    mode: LossMode,
    cfg: &LossConfig,
) -> Result<FrozenRegions> {
    let n = batch.len();
    let mut linf = vec![None; n];
    let mut l2 = vec![None; n];
    let mut linf_block = vec![true; n];
    if mode == LossMode::Random {
        if n < 2 {
            return Err(CureError::Config(
                "random loss requires a batch of at least 2 samples".to_string(),
            ));
        }
        let assignment = random_partition(n, cfg.seed);
        linf_block.copy_from_slice(&assignment);
    }
    for (j, (x, y)) in batch.iter().enumerate() {
        let want_linf = match mode {
            LossMode::Random => linf_block[j],
            m => m.needs_linf(),
        };
        let want_l2 = match mode {
            LossMode::Random => !linf_block[j],
            m => m.needs_l2(),
        };
        if want_linf {
            linf[j] = Some(get_propagation_region(
                net,
                x,
                *y,
                &cfg.region_config(Norm::LInf, j),
            )?);
        }
        if want_l2 {
            l2[j] = Some(get_propagation_region(
                net,
                x,
                *y,
                &cfg.region_config(Norm::L2, j),
            )?);
        }
    }
    Ok(FrozenRegions {
        linf,
        l2,
        linf_block,
    })
}

/// Shuffle indices and assign the first half (plus the odd extra) to the
/// l-inf block. Deterministic given the seed.
fn random_partition(n: usize, seed: u64) -> Vec<bool> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::rng_for(seed, &[stream::PARTITION]);
    order.shuffle(&mut rng);
    let mut linf_block = vec![false; n];
    for &idx in order.iter().take(n.div_ceil(2)) {
        linf_block[idx] = true;
    }
    linf_block
}

/// Differentiable batch loss at fixed regions. `frozen_gamma` pins the
/// certified subset (finite-difference checks); training recomputes it from
/// the current bounds.
pub fn loss_given_regions(
    net: &Network,
    batch: &[(&[f64], usize)],
    mode: LossMode,
    cfg: &LossConfig,
    regions: &FrozenRegions,
    frozen_gamma: Option<&CertifiedSubset>,
) -> Result<BatchLossOutput> {
    if mode == LossMode::Joint && !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(CureError::Config(format!(
            "joint weight alpha must lie in [0, 1], got {}",
            cfg.alpha
        )));
    }
    let n = batch.len();
    if n == 0 {
        return Err(CureError::Config("empty batch".to_string()));
    }
    let abs = AbsWeights::new(net);
    let inv_n = 1.0 / n as f64;
    let mut grads = UpdateDelta::zeros_like(net);
    let mut sum_linf = 0.0;
    let mut n_linf = 0usize;
    let mut sum_l2 = 0.0;
    let mut n_l2 = 0usize;
    let mut mode_loss = 0.0;

    // Scratch mode keeps both branches alive for the KL term.
    let mut kept: Vec<(Option<BranchEval>, Option<BranchEval>)> = Vec::new();

    for (j, (x, y)) in batch.iter().enumerate() {
        let _ = x;
        let b_linf = regions.linf[j]
            .as_ref()
            .map(|r| eval_branch(net, &abs, r, *y, cfg))
            .transpose()?;
        let b_l2 = regions.l2[j]
            .as_ref()
            .map(|r| eval_branch(net, &abs, r, *y, cfg))
            .transpose()?;
        if let Some(b) = &b_linf {
            sum_linf += b.loss;
            n_linf += 1;
        }
        if let Some(b) = &b_l2 {
            sum_l2 += b.loss;
            n_l2 += 1;
        }
        match mode {
            LossMode::LInf => {
                let b = b_linf.expect("linf branch selected");
                mode_loss += b.loss * inv_n;
                backprop_scaled(net, &abs, &b, inv_n, &mut grads);
            }
            LossMode::L2 => {
                let b = b_l2.expect("l2 branch selected");
                mode_loss += b.loss * inv_n;
                backprop_scaled(net, &abs, &b, inv_n, &mut grads);
            }
            LossMode::Joint => {
                let bi = b_linf.expect("linf branch selected");
                let b2 = b_l2.expect("l2 branch selected");
                let sample = (1.0 - cfg.alpha) * bi.loss + cfg.alpha * b2.loss;
                mode_loss += sample * inv_n;
                backprop_scaled(net, &abs, &bi, (1.0 - cfg.alpha) * inv_n, &mut grads);
                backprop_scaled(net, &abs, &b2, cfg.alpha * inv_n, &mut grads);
            }
            LossMode::Max => {
                let bi = b_linf.expect("linf branch selected");
                let b2 = b_l2.expect("l2 branch selected");
                // Ties go to the l-inf branch.
                if bi.loss >= b2.loss {
                    mode_loss += bi.loss * inv_n;
                    backprop_scaled(net, &abs, &bi, inv_n, &mut grads);
                } else {
                    mode_loss += b2.loss * inv_n;
                    backprop_scaled(net, &abs, &b2, inv_n, &mut grads);
                }
            }
            LossMode::Random => {
                let b = if regions.linf_block[j] {
                    b_linf.expect("linf block")
                } else {
                    b_l2.expect("l2 block")
                };
                mode_loss += b.loss * inv_n;
                backprop_scaled(net, &abs, &b, inv_n, &mut grads);
            }
            LossMode::Scratch => {
                // Defer: the KL term needs the whole batch's distributions.
                kept.push((b_linf, b_l2));
            }
        }
    }

    let mut loss_kl = 0.0;
    let mut n_certified = 0;
    if mode == LossMode::Scratch {
        let (scratch_total, kl, n_c) = scratch_terms(
            net,
            &abs,
            batch,
            cfg,
            &mut kept,
            frozen_gamma,
            inv_n,
            &mut grads,
        )?;
        mode_loss = scratch_total;
        loss_kl = kl;
        n_certified = n_c;
    }

    let l1_term = cfg.l1_weight * net.param_l1_norm();
    if cfg.l1_weight != 0.0 {
        grads.add_l1_subgradient(net, cfg.l1_weight);
    }
    let total = mode_loss + l1_term;
    if !total.is_finite() {
        return Err(CureError::NonFinite {
            layer: 0,
            context: format!("batch loss (mode {})", mode.name()),
        });
    }
    Ok(BatchLossOutput {
        total,
        loss_linf: if n_linf > 0 {
            sum_linf / n_linf as f64
        } else {
            0.0
        },
        loss_l2: if n_l2 > 0 { sum_l2 / n_l2 as f64 } else { 0.0 },
        loss_kl,
        n_certified,
        grads,
    })
}

/// Max gate plus the KL alignment term. Returns (mode loss, KL, n_c) and
/// accumulates all gradients.
#[allow(clippy::too_many_arguments)]
fn scratch_terms(
    net: &Network,
    abs: &AbsWeights,
    batch: &[(&[f64], usize)],
    cfg: &LossConfig,
    kept: &mut [(Option<BranchEval>, Option<BranchEval>)],
    frozen_gamma: Option<&CertifiedSubset>,
    inv_n: f64,
    grads: &mut UpdateDelta,
) -> Result<(f64, f64, usize)> {
    let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();

    // Certified subset from the q-norm bounds (in-loop small-box bounds by
    // default, full-eps IBP when configured).
    let gamma_owned;
    let gamma = if let Some(g) = frozen_gamma {
        g
    } else {
        let q_uds: Vec<Vec<f64>> = if cfg.gamma_from_full_eps {
            let mut uds = Vec::with_capacity(batch.len());
            for (x, y) in batch {
                let outer = crate::bounds::clamped_linf_box(x, cfg.eps(cfg.q_norm));
                let eval = bound_forward(net, abs, &outer, *y, cfg.elide_last)?;
                uds.push(eval.u_delta);
            }
            uds
        } else {
            kept.iter()
                .map(|(bi, b2)| {
                    let b = match cfg.q_norm {
                        Norm::LInf => bi.as_ref().expect("scratch keeps both branches"),
                        Norm::L2 => b2.as_ref().expect("scratch keeps both branches"),
                    };
                    b.eval.u_delta.clone()
                })
                .collect()
        };
        gamma_owned = certified_subset(&q_uds, &labels);
        &gamma_owned
    };
    let _ = cfg.r_norm();

    let n_c = gamma.len();
    let mut mode_loss = 0.0;
    let mut loss_kl = 0.0;
    let kl_scale = if n_c > 0 {
        cfg.eta / n_c as f64
    } else {
        0.0
    };

    // Per-sample gradient on each branch's u_delta, combined before the
    // single backward walk per branch.
    for (j, pair) in kept.iter_mut().enumerate() {
        let y = labels[j];
        let (bi, b2) = pair;
        let bi = bi.as_mut().expect("scratch keeps both branches");
        let b2 = b2.as_mut().expect("scratch keeps both branches");
        let max_is_linf = bi.loss >= b2.loss;
        mode_loss += bi.loss.max(b2.loss) * inv_n;

        let mut d_linf = vec![0.0; bi.d_udelta.len()];
        let mut d_l2 = vec![0.0; b2.d_udelta.len()];
        if max_is_linf {
            for (d, g) in d_linf.iter_mut().zip(&bi.d_udelta) {
                *d += inv_n * g;
            }
        } else {
            for (d, g) in d_l2.iter_mut().zip(&b2.d_udelta) {
                *d += inv_n * g;
            }
        }

        if gamma.indices.contains(&j) && cfg.eta != 0.0 {
            let (q_ud, r_ud) = match cfg.q_norm {
                Norm::LInf => (&bi.eval.u_delta, &b2.eval.u_delta),
                Norm::L2 => (&b2.eval.u_delta, &bi.eval.u_delta),
            };
            let a = bound_diff_distribution(q_ud, y);
            let b = bound_diff_distribution(r_ud, y);
            let kl = kl_divergence(&a, &b);
            loss_kl += kl / n_c as f64;
            // d KL / d u_q[i] = a_i (ln(a_i / b_i) - KL);
            // d KL / d u_r[i] = b_i - a_i.
            let (d_q_slot, d_r_slot) = match cfg.q_norm {
                Norm::LInf => (&mut d_linf, &mut d_l2),
                Norm::L2 => (&mut d_l2, &mut d_linf),
            };
            let k = q_ud.len();
            let mut slot = 0;
            for i in 0..k {
                if i == y {
                    continue;
                }
                let ratio = (a[slot] / b[slot].max(f64::MIN_POSITIVE)).max(f64::MIN_POSITIVE);
                d_q_slot[i] += kl_scale * a[slot] * (ratio.ln() - kl);
                d_r_slot[i] += kl_scale * (b[slot] - a[slot]);
                slot += 1;
            }
        }

        if d_linf.iter().any(|v| *v != 0.0) {
            bound_backward(net, abs, &bi.eval, &d_linf, grads);
        }
        if d_l2.iter().any(|v| *v != 0.0) {
            bound_backward(net, abs, &b2.eval, &d_l2, grads);
        }
    }
    Ok((mode_loss + cfg.eta * loss_kl, loss_kl, n_c))
}

fn backprop_scaled(
    net: &Network,
    abs: &AbsWeights,
    branch: &BranchEval,
    scale: f64,
    grads: &mut UpdateDelta,
) {
    if scale == 0.0 {
        return;
    }
    let scaled: Vec<f64> = branch.d_udelta.iter().map(|g| g * scale).collect();
    bound_backward(net, abs, &branch.eval, &scaled, grads);
}

/// Batch loss with gradients: region selection plus the differentiable part.
pub fn batch_loss_grad(
    net: &Network,
    batch: &[(&[f64], usize)],
    mode: LossMode,
    cfg: &LossConfig,
) -> Result<BatchLossOutput> {
    let regions = select_regions(net, batch, mode, cfg)?;
    loss_given_regions(net, batch, mode, cfg, &regions, None)
}

/// Small-box l-inf loss for one sample (SABR-style).
pub fn sabr_linf_loss(
    net: &Network,
    x: &[f64],
    y: usize,
    cfg: &LossConfig,
    sample_idx: usize,
) -> Result<f64> {
    single_sample(net, x, y, LossMode::LInf, cfg, sample_idx)
}

/// Small-box l2 loss for one sample: PGD in the l2 ball, box propagation
/// around the endpoint.
pub fn l2_loss(
    net: &Network,
    x: &[f64],
    y: usize,
    cfg: &LossConfig,
    sample_idx: usize,
) -> Result<f64> {
    single_sample(net, x, y, LossMode::L2, cfg, sample_idx)
}

/// Convex combination `(1 - alpha) * linf + alpha * l2` for one sample.
pub fn joint_loss(
    net: &Network,
    x: &[f64],
    y: usize,
    cfg: &LossConfig,
    sample_idx: usize,
) -> Result<f64> {
    single_sample(net, x, y, LossMode::Joint, cfg, sample_idx)
}

/// Per-sample max of the two branch losses, batch mean.
pub fn max_loss(net: &Network, batch: &[(&[f64], usize)], cfg: &LossConfig) -> Result<f64> {
    let regions = select_regions(net, batch, LossMode::Max, cfg)?;
    Ok(
        loss_given_regions(net, batch, LossMode::Max, cfg, &regions, None)?.total
            - cfg.l1_weight * net.param_l1_norm(),
    )
}

/// Random equal split: l-inf loss on one block, l2 on the other, summed
/// with equal weights. Deterministic given the seed.
pub fn random_loss(
    net: &Network,
    batch: &[(&[f64], usize)],
    cfg: &LossConfig,
    seed: u64,
) -> Result<f64> {
    let cfg = LossConfig { seed, ..*cfg };
    let regions = select_regions(net, batch, LossMode::Random, &cfg)?;
    let out = loss_given_regions(net, batch, LossMode::Random, &cfg, &regions, None)?;
    Ok(out.total - cfg.l1_weight * net.param_l1_norm())
}

/// From-scratch objective: per-sample max, plus `eta` times the KL
/// alignment loss on the correctly certified q-norm subset, plus the l1
/// parameter term.
pub fn scratch_loss(net: &Network, batch: &[(&[f64], usize)], cfg: &LossConfig) -> Result<f64> {
    let regions = select_regions(net, batch, LossMode::Scratch, cfg)?;
    Ok(loss_given_regions(net, batch, LossMode::Scratch, cfg, &regions, None)?.total)
}

fn single_sample(
    net: &Network,
    x: &[f64],
    y: usize,
    mode: LossMode,
    cfg: &LossConfig,
    sample_idx: usize,
) -> Result<f64> {
    // Derive the same per-sample seed the batch path would use at this
    // position, so single-sample and batch evaluations agree bitwise.
    let batch = [(x, y)];
    let mut regions = FrozenRegions {
        linf: vec![None],
        l2: vec![None],
        linf_block: vec![true],
    };
    if mode.needs_linf() {
        regions.linf[0] = Some(get_propagation_region(
            net,
            x,
            y,
            &cfg.region_config(Norm::LInf, sample_idx),
        )?);
    }
    if mode.needs_l2() {
        regions.l2[0] = Some(get_propagation_region(
            net,
            x,
            y,
            &cfg.region_config(Norm::L2, sample_idx),
        )?);
    }
    let out = loss_given_regions(net, &batch, mode, cfg, &regions, None)?;
    Ok(out.total - cfg.l1_weight * net.param_l1_norm())
}

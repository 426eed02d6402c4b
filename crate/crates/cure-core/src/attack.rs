//! PGD adversarial search under l-inf and l-2 constraints, and the
//! propagation-region computation used by the small-box losses.
//!
//! The region routine clamps the epsilon ball to the unit hypercube, sizes
//! the propagated box as `tau = lambda / 2 * (upper - lower)` per
//! coordinate, runs the norm-appropriate PGD inside the clamped region, and
//! finally clamps the attack endpoint so the tau-box lies fully inside it.

use crate::bounds::{clamped_linf_box, BoxBounds};
use crate::error::Result;
use crate::network::Network;
use crate::rng::{self, stream};
use crate::tensor::l2_norm;
use rand::Rng;

/// Perturbation norms supported by the attacks and losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    LInf,
    L2,
}

impl Norm {
    pub fn name(self) -> &'static str {
        match self {
            Norm::LInf => "linf",
            Norm::L2 => "l2",
        }
    }

    pub(crate) fn stream_tag(self) -> u64 {
        match self {
            Norm::LInf => stream::ATTACK_LINF,
            Norm::L2 => stream::ATTACK_L2,
        }
    }
}

/// PGD attack settings.
#[derive(Debug, Clone, Copy)]
pub struct AttackConfig {
    pub norm: Norm,
    pub eps: f64,
    /// Number of gradient steps; zero returns the (projected) initialization.
    pub steps: usize,
    /// Step size relative to eps.
    pub step_size: f64,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(norm: Norm, eps: f64, seed: u64) -> Self {
        Self {
            norm,
            eps,
            steps: 8,
            step_size: 0.25,
            seed,
        }
    }
}

/// Center and elementwise radius of the box handed to bound propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationRegion {
    pub center: Vec<f64>,
    pub radius: Vec<f64>,
}

impl PropagationRegion {
    /// The box `[center - radius, center + radius]`.
    pub fn as_box(&self) -> BoxBounds {
        BoxBounds::around(&self.center, &self.radius)
    }

    /// Degenerate region at a point.
    pub fn point(x: &[f64]) -> Self {
        Self {
            center: x.to_vec(),
            radius: vec![0.0; x.len()],
        }
    }
}

/// Region-selection settings: attack settings plus the subselection ratio.
#[derive(Debug, Clone, Copy)]
pub struct RegionConfig {
    pub norm: Norm,
    pub eps: f64,
    /// Subselection ratio in [0, 1]: fraction of the clamped region's width
    /// used as the propagated box size.
    pub lambda: f64,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
    /// Search the literal `eps - tau` truncated ball instead of the full
    /// clamped region (the endpoint clamp keeps the box inside either way).
    pub truncated_search: bool,
}

impl RegionConfig {
    pub fn new(norm: Norm, eps: f64, lambda: f64, seed: u64) -> Self {
        Self {
            norm,
            eps,
            lambda,
            steps: 8,
            step_size: 0.25,
            seed,
            truncated_search: false,
        }
    }
}

/// Propagated box radius: `lambda / 2 * (upper - lower)` per coordinate.
pub fn region_radius(lambda: f64, region: &BoxBounds) -> Vec<f64> {
    region
        .lower
        .iter()
        .zip(&region.upper)
        .map(|(l, u)| 0.5 * lambda * (u - l))
        .collect()
}

/// l-inf PGD inside explicit elementwise bounds. Initialization is uniform
/// in the bounds; each step moves by `step_size * eps * sign(grad)` and
/// clamps back. Deterministic given the seed.
pub fn pgd_linf(
    net: &Network,
    x: &[f64],
    y: usize,
    eps: f64,
    steps: usize,
    step_size: f64,
    bounds: &BoxBounds,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(pgd_linf_trace(net, x, y, eps, steps, step_size, bounds, seed, false)?.0)
}

/// l-inf PGD returning every post-projection iterate (initialization first)
/// when `record` is set.
#[allow(clippy::too_many_arguments)]
pub fn pgd_linf_trace(
    net: &Network,
    _x: &[f64],
    y: usize,
    eps: f64,
    steps: usize,
    step_size: f64,
    bounds: &BoxBounds,
    seed: u64,
    record: bool,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut cur = uniform_in_box(bounds, seed, Norm::LInf);
    let mut trace = Vec::new();
    if record {
        trace.push(cur.clone());
    }
    let step = step_size * eps;
    for _ in 0..steps {
        let (_, grad) = net.input_grad_ce(&cur, y)?;
        for (i, g) in grad.iter().enumerate() {
            let s = if *g > 0.0 {
                1.0
            } else if *g < 0.0 {
                -1.0
            } else {
                0.0
            };
            cur[i] = (cur[i] + step * s).clamp(bounds.lower[i], bounds.upper[i]);
        }
        if record {
            trace.push(cur.clone());
        }
    }
    Ok((cur, trace))
}

/// l-2 PGD around `x`: normalized-gradient steps of `step_size * eps`,
/// projection onto the eps ball with factor `min(1, eps / ||delta||)`, then
/// a clamp to the given bounds (a subset of the unit hypercube). The final
/// point satisfies `||x* - x||_2 <= eps` and stays inside the bounds.
pub fn pgd_l2(
    net: &Network,
    x: &[f64],
    y: usize,
    eps: f64,
    steps: usize,
    step_size: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let bounds = clamped_linf_box(x, eps);
    Ok(pgd_l2_trace(net, x, y, eps, steps, step_size, &bounds, seed, false)?.0)
}

/// l-2 PGD with optional iterate recording.
#[allow(clippy::too_many_arguments)]
pub fn pgd_l2_trace(
    net: &Network,
    x: &[f64],
    y: usize,
    eps: f64,
    steps: usize,
    step_size: f64,
    bounds: &BoxBounds,
    seed: u64,
    record: bool,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut cur = uniform_in_box(bounds, seed, Norm::L2);
    project_l2(&mut cur, x, eps, bounds);
    let mut trace = Vec::new();
    if record {
        trace.push(cur.clone());
    }
    let step = step_size * eps;
    for _ in 0..steps {
        let (_, grad) = net.input_grad_ce(&cur, y)?;
        let norm = l2_norm(&grad);
        if norm == 0.0 {
            // No signal; skip rather than divide by zero.
            if record {
                trace.push(cur.clone());
            }
            continue;
        }
        for (c, g) in cur.iter_mut().zip(&grad) {
            *c += step * g / norm;
        }
        project_l2(&mut cur, x, eps, bounds);
        if record {
            trace.push(cur.clone());
        }
    }
    Ok((cur, trace))
}

/// Project onto the l2 ball around `x` (factor `min(1, eps/||delta||)`)
/// and clamp into the bounds. The per-coordinate clamp moves points toward
/// `x`, so it never increases the l2 distance.
fn project_l2(cur: &mut [f64], x: &[f64], eps: f64, bounds: &BoxBounds) {
    let mut norm_sq = 0.0;
    for (c, xi) in cur.iter().zip(x) {
        let d = c - xi;
        norm_sq += d * d;
    }
    let norm = norm_sq.sqrt();
    if norm > eps {
        let scale = if norm > 0.0 { eps / norm } else { 0.0 };
        for (c, xi) in cur.iter_mut().zip(x) {
            *c = xi + (*c - xi) * scale;
        }
    }
    for (i, c) in cur.iter_mut().enumerate() {
        *c = c.clamp(bounds.lower[i], bounds.upper[i]);
    }
}

fn uniform_in_box(bounds: &BoxBounds, seed: u64, norm: Norm) -> Vec<f64> {
    let mut rng = rng::rng_for(seed, &[norm.stream_tag()]);
    bounds
        .lower
        .iter()
        .zip(&bounds.upper)
        .map(|(l, u)| {
            if u > l {
                rng.random_range(*l..=*u)
            } else {
                *l
            }
        })
        .collect()
}

/// Select the propagation region for one sample: clamp the eps region to
/// the unit hypercube, size the box, run PGD inside the region, and clamp
/// the endpoint so the box fits exactly.
pub fn get_propagation_region(
    net: &Network,
    x: &[f64],
    y: usize,
    cfg: &RegionConfig,
) -> Result<PropagationRegion> {
    debug_assert!((0.0..=1.0).contains(&cfg.lambda), "lambda in [0, 1]");
    let region = clamped_linf_box(x, cfg.eps);
    let tau = region_radius(cfg.lambda, &region);
    let endpoint = if cfg.steps == 0 && cfg.eps == 0.0 {
        x.to_vec()
    } else {
        match cfg.norm {
            Norm::LInf => {
                let search = if cfg.truncated_search {
                    shrink_box(&region, &tau)
                } else {
                    region.clone()
                };
                pgd_linf(net, x, y, cfg.eps, cfg.steps, cfg.step_size, &search, cfg.seed)?
            }
            Norm::L2 => {
                let (search_eps, search_box) = if cfg.truncated_search {
                    let tau_max = tau.iter().fold(0.0_f64, |m, t| m.max(*t));
                    ((cfg.eps - tau_max).max(0.0), shrink_box(&region, &tau))
                } else {
                    (cfg.eps, region.clone())
                };
                pgd_l2_trace(
                    net,
                    x,
                    y,
                    search_eps,
                    cfg.steps,
                    cfg.step_size,
                    &search_box,
                    cfg.seed,
                    false,
                )?
                .0
            }
        }
    };
    let center = fit_center(&endpoint, &region, &tau);
    Ok(PropagationRegion {
        center,
        radius: tau,
    })
}

fn shrink_box(region: &BoxBounds, tau: &[f64]) -> BoxBounds {
    let lower: Vec<f64> = region.lower.iter().zip(tau).map(|(l, t)| l + t).collect();
    let upper: Vec<f64> = region.upper.iter().zip(tau).map(|(u, t)| u - t).collect();
    BoxBounds { lower, upper }
}

/// Clamp the endpoint into `[lower + tau, upper - tau]`, nudging by ulps
/// where rounding would push the box past the region. Containment
/// `[c - tau, c + tau] within [lower, upper]` holds exactly afterwards.
fn fit_center(endpoint: &[f64], region: &BoxBounds, tau: &[f64]) -> Vec<f64> {
    let mut center = Vec::with_capacity(endpoint.len());
    for i in 0..endpoint.len() {
        let (lo, hi, t) = (region.lower[i], region.upper[i], tau[i]);
        let mut c = endpoint[i].clamp(lo + t, hi - t);
        let mut guard = 0;
        while c + t > hi && guard < 4 {
            c = next_down(c);
            guard += 1;
        }
        let mut guard = 0;
        while c - t < lo && guard < 4 {
            c = next_up(c);
            guard += 1;
        }
        debug_assert!(c - t >= lo && c + t <= hi, "region containment");
        center.push(c);
    }
    center
}

fn next_down(v: f64) -> f64 {
    if v == f64::NEG_INFINITY {
        return v;
    }
    let bits = v.to_bits();
    let next = if v > 0.0 {
        bits - 1
    } else if v < 0.0 {
        bits + 1
    } else {
        (-f64::MIN_POSITIVE).to_bits()
    };
    f64::from_bits(next)
}

fn next_up(v: f64) -> f64 {
    -next_down(-v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{InitScheme, Layer};

    fn linear_net(seed: u64, dim: usize) -> Network {
        Network::new(vec![dim], vec![Layer::affine(dim, 2)], 2)
            .unwrap()
            .init(InitScheme::Kaiming, seed)
    }

    #[test]
    fn zero_steps_returns_initialization_inside_bounds() {
        let net = linear_net(1, 4);
        let x = vec![0.5; 4];
        let bounds = clamped_linf_box(&x, 0.2);
        let (out, trace) =
            pgd_linf_trace(&net, &x, 0, 0.2, 0, 0.25, &bounds, 7, true).unwrap();
        assert_eq!(trace.len(), 1);
        assert_eq!(out, trace[0]);
        assert!(bounds.contains(&out, 0.0));
    }

    #[test]
    fn zero_eps_returns_x() {
        let net = linear_net(2, 3);
        let x = vec![0.25, 0.5, 0.75];
        let bounds = clamped_linf_box(&x, 0.0);
        let out = pgd_linf(&net, &x, 1, 0.0, 5, 0.25, &bounds, 3).unwrap();
        assert_eq!(out, x);
        let out2 = pgd_l2(&net, &x, 1, 0.0, 5, 0.25, 3).unwrap();
        for (a, b) in out2.iter().zip(&x) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn linf_ascent_never_decreases_loss_on_linear_model() {
        // Cross-entropy of a linear model is convex in x, and a clamped
        // sign step keeps a nonnegative inner product with the gradient.
        for seed in 0..10 {
            let net = linear_net(seed, 6);
            let x = vec![0.5; 6];
            let bounds = clamped_linf_box(&x, 0.3);
            let (_, trace) =
                pgd_linf_trace(&net, &x, 0, 0.3, 8, 0.25, &bounds, seed + 50, true).unwrap();
            let losses: Vec<f64> = trace
                .iter()
                .map(|p| net.input_grad_ce(p, 0).unwrap().0)
                .collect();
            for w in losses.windows(2) {
                assert!(w[1] >= w[0] - 1e-12, "loss decreased: {:?}", losses);
            }
        }
    }

    #[test]
    fn l2_final_delta_within_eps() {
        for seed in 0..20 {
            let net = linear_net(seed, 8);
            let x = vec![0.4; 8];
            let eps = 0.7;
            let out = pgd_l2(&net, &x, 0, eps, 8, 0.25, seed).unwrap();
            let delta: Vec<f64> = out.iter().zip(&x).map(|(a, b)| a - b).collect();
            assert!(l2_norm(&delta) <= eps + 1e-9);
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn l2_converges_to_closed_form_on_linear_model() {
        // For a binary linear model the CE gradient direction is constant,
        // so the optimal l2 perturbation is eps * v / ||v|| with
        // v = w_other - w_true.
        let mut layer = Layer::affine(2, 2);
        if let Layer::Affine { weight, .. } = &mut layer {
            weight.copy_from_slice(&[1.0, 0.5, -0.5, 1.5]);
        }
        let net = Network::new(vec![2], vec![layer], 2).unwrap();
        let x = vec![0.5, 0.5];
        let eps = 0.2;
        let v = [-0.5 - 1.0, 1.5 - 0.5];
        let vn = l2_norm(&v);
        let expect: Vec<f64> = x.iter().zip(&v).map(|(xi, vi)| xi + eps * vi / vn).collect();
        let out = pgd_l2(&net, &x, 0, eps, 200, 0.25, 11).unwrap();
        for (o, e) in out.iter().zip(&expect) {
            assert!((o - e).abs() < 1e-3, "{out:?} vs {expect:?}");
        }
    }

    #[test]
    fn region_lambda_one_interior_collapses_center() {
        // Interior point, no unit-cube clipping: tau = eps and the center
        // clamp leaves only x itself.
        let net = linear_net(4, 3);
        let x = vec![0.5; 3];
        let cfg = RegionConfig {
            steps: 0,
            ..RegionConfig::new(Norm::LInf, 0.2, 1.0, 9)
        };
        let region = get_propagation_region(&net, &x, 0, &cfg).unwrap();
        for (t, c) in region.radius.iter().zip(&region.center) {
            assert!((t - 0.2).abs() < 1e-15);
            assert!((c - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn region_lambda_zero_is_attack_endpoint() {
        let net = linear_net(5, 3);
        let x = vec![0.5; 3];
        let cfg = RegionConfig::new(Norm::LInf, 0.2, 0.0, 13);
        let region = get_propagation_region(&net, &x, 0, &cfg).unwrap();
        assert!(region.radius.iter().all(|t| *t == 0.0));
        let endpoint = pgd_linf(
            &net,
            &x,
            0,
            0.2,
            cfg.steps,
            cfg.step_size,
            &clamped_linf_box(&x, 0.2),
            13,
        )
        .unwrap();
        assert_eq!(region.center, endpoint);
    }

    #[test]
    fn region_containment_exact() {
        for seed in 0..50 {
            let net = linear_net(seed, 5);
            let mut rng = crate::rng::rng_for(seed, &[0xAB]);
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..=1.0)).collect();
            for norm in [Norm::LInf, Norm::L2] {
                for lambda in [0.0, 0.3, 0.7, 1.0] {
                    let cfg = RegionConfig::new(norm, 0.25, lambda, seed * 7 + 1);
                    let region = get_propagation_region(&net, &x, 0, &cfg).unwrap();
                    let outer = clamped_linf_box(&x, 0.25);
                    for i in 0..x.len() {
                        assert!(region.center[i] - region.radius[i] >= outer.lower[i]);
                        assert!(region.center[i] + region.radius[i] <= outer.upper[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn determinism_under_fixed_seed() {
        let net = linear_net(3, 4);
        let x = vec![0.3, 0.6, 0.2, 0.9];
        let cfg = RegionConfig::new(Norm::L2, 0.4, 0.1, 77);
        let a = get_propagation_region(&net, &x, 1, &cfg).unwrap();
        let b = get_propagation_region(&net, &x, 1, &cfg).unwrap();
        assert_eq!(a, b);
        let cfg2 = RegionConfig { seed: 78, ..cfg };
        let c = get_propagation_region(&net, &x, 1, &cfg2).unwrap();
        assert_ne!(a, c);
    }
}

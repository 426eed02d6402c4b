//! Post-training evaluation: clean accuracy, per-norm certified accuracy,
//! union certified accuracy, empirical PGD robustness, and report assembly.
//!
//! Certification is sound but incomplete: l-inf uses interval propagation
//! with last-layer elision over the clamped epsilon box; l-2 uses the
//! Cauchy-Schwarz first-layer box followed by interval propagation. A
//! certified flag therefore implies true robustness, while the converse can
//! fail.

use crate::attack::Norm;
use crate::bounds::{clamped_linf_box, l2_logit_diff_upper, logit_diff_upper, BoxBounds};
use crate::data::Dataset;
use crate::error::Result;
use crate::network::Network;
use crate::rng::{self, stream};
use crate::tensor::{argmax, Tensor};
use serde::{Deserialize, Serialize};

/// Per-sample evaluation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleVerdict {
    pub id: usize,
    pub label: usize,
    pub clean_correct: bool,
    pub cert_linf: bool,
    pub cert_l2: bool,
    pub union_cert: bool,
    pub pgd_linf_robust: bool,
    pub pgd_l2_robust: bool,
}

/// Evaluation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub eps_inf: f64,
    pub eps_2: f64,
    /// Number of test samples evaluated, in canonical order.
    pub samples: usize,
    pub pgd_steps: usize,
    pub pgd_restarts: usize,
    pub pgd_step_size: f64,
    pub elide_last: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eps_inf: 0.3,
            eps_2: 1.0,
            samples: 1000,
            pgd_steps: 50,
            pgd_restarts: 3,
            pgd_step_size: 0.125,
            elide_last: true,
            seed: 0,
        }
    }
}

/// Aggregate percentages plus the per-sample verdict table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool_version: String,
    pub config: EvalConfig,
    pub samples: usize,
    pub clean_pct: f64,
    pub cert_linf_pct: f64,
    pub cert_l2_pct: f64,
    pub union_pct: f64,
    pub pgd_linf_pct: f64,
    pub pgd_l2_pct: f64,
    pub verdicts: Vec<SampleVerdict>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn verdicts_csv(&self) -> String {
        let mut out = String::from(
            "id,label,clean_correct,cert_linf,cert_l2,union_cert,pgd_linf_robust,pgd_l2_robust\n",
        );
        for v in &self.verdicts {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                v.id,
                v.label,
                u8::from(v.clean_correct),
                u8::from(v.cert_linf),
                u8::from(v.cert_l2),
                u8::from(v.union_cert),
                u8::from(v.pgd_linf_robust),
                u8::from(v.pgd_l2_robust)
            ));
        }
        out
    }
}

fn clean_correct(net: &Network, x: &[f64], y: usize) -> Result<bool> {
    let logits = net.forward(&Tensor::from_slice(x))?;
    Ok(argmax(logits.data()) == y)
}

/// Sound l-inf certificate: interval propagation over `clamp(x +- eps, 0, 1)`
/// with last-layer elision; robust iff every non-true logit-difference
/// upper bound is strictly negative.
pub fn certify_linf(net: &Network, x: &[f64], y: usize, eps: f64, elide: bool) -> Result<bool> {
    let region = clamped_linf_box(x, eps);
    let ud = logit_diff_upper(net, &region, y, elide)?;
    Ok(all_strictly_negative(&ud, y))
}

/// Sound (incomplete) l-2 certificate: Cauchy-Schwarz first-layer box, then
/// interval propagation.
pub fn certify_l2(net: &Network, x: &[f64], y: usize, eps: f64, elide: bool) -> Result<bool> {
    let ud = l2_logit_diff_upper(net, x, y, eps, elide)?;
    Ok(all_strictly_negative(&ud, y))
}

/// Baseline l-2 certificate that only uses the bounding box of the ball,
/// without the Cauchy-Schwarz tightening. Never stronger than `certify_l2`.
pub fn certify_l2_bounding_box_only(
    net: &Network,
    x: &[f64],
    y: usize,
    eps: f64,
    elide: bool,
) -> Result<bool> {
    let region = clamped_linf_box(x, eps);
    let ud = logit_diff_upper(net, &region, y, elide)?;
    Ok(all_strictly_negative(&ud, y))
}

fn all_strictly_negative(u_delta: &[f64], y: usize) -> bool {
    u_delta
        .iter()
        .enumerate()
        .all(|(i, v)| i == y || *v < 0.0)
}

/// Empirical robustness of one sample under multi-restart PGD. The clean
/// point counts as the first candidate, so a zero-step attack reduces to
/// clean accuracy. Every iterate along each trajectory is checked, so
/// growing the step budget with a fixed seed never reports more robustness.
pub fn pgd_robust(
    net: &Network,
    x: &[f64],
    y: usize,
    norm: Norm,
    eps: f64,
    steps: usize,
    restarts: usize,
    step_size: f64,
    seed: u64,
) -> Result<bool> {
    if !clean_correct(net, x, y)? {
        return Ok(false);
    }
    if steps == 0 || eps == 0.0 {
        return Ok(true);
    }
    let bounds = clamped_linf_box(x, eps);
    for restart in 0..restarts {
        let restart_seed = rng::derive_seed(seed, &[stream::EVAL, restart as u64, norm.stream_tag()]);
        // Restart 0 starts at the clean point; later restarts start from a
        // uniform draw inside the feasible set.
        let mut cur = if restart == 0 {
            x.to_vec()
        } else {
            let mut rng = rng::rng_for(restart_seed, &[0]);
            use rand::Rng;
            let drawn: Vec<f64> = bounds
                .lower
                .iter()
                .zip(&bounds.upper)
                .map(|(l, u)| if u > l { rng.random_range(*l..=*u) } else { *l })
                .collect();
            match norm {
                Norm::LInf => drawn,
                Norm::L2 => {
                    let mut v = drawn;
                    project_l2_eval(&mut v, x, eps, &bounds);
                    v
                }
            }
        };
        if argmax(net.forward(&Tensor::from_slice(&cur))?.data()) != y {
            return Ok(false);
        }
        for _ in 0..steps {
            let (_, grad) = net.input_grad_ce(&cur, y)?;
            match norm {
                Norm::LInf => {
                    let step = step_size * eps;
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
                }
                Norm::L2 => {
                    let gnorm = crate::tensor::l2_norm(&grad);
                    if gnorm == 0.0 {
                        continue;
                    }
                    let step = step_size * eps;
                    for (c, g) in cur.iter_mut().zip(&grad) {
                        *c += step * g / gnorm;
                    }
                    project_l2_eval(&mut cur, x, eps, &bounds);
                }
            }
            if argmax(net.forward(&Tensor::from_slice(&cur))?.data()) != y {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn project_l2_eval(cur: &mut [f64], x: &[f64], eps: f64, bounds: &BoxBounds) {
    let mut norm_sq = 0.0;
    for (c, xi) in cur.iter().zip(x) {
        let d = c - xi;
        norm_sq += d * d;
    }
    let norm = norm_sq.sqrt();
    if norm > eps {
        let scale = eps / norm;
        for (c, xi) in cur.iter_mut().zip(x) {
            *c = xi + (*c - xi) * scale;
        }
    }
    for (i, c) in cur.iter_mut().enumerate() {
        *c = c.clamp(bounds.lower[i], bounds.upper[i]);
    }
}

/// Fraction (percent) of verdicts certified for both norms.
pub fn union_accuracy(verdicts: &[SampleVerdict]) -> f64 {
    if verdicts.is_empty() {
        return 0.0;
    }
    100.0 * verdicts.iter().filter(|v| v.union_cert).count() as f64 / verdicts.len() as f64
}

/// Fraction (percent) surviving the PGD attack of the given norm.
pub fn empirical_accuracy(
    net: &Network,
    data: &Dataset,
    norm: Norm,
    cfg: &EvalConfig,
) -> Result<f64> {
    let n = cfg.samples.min(data.len());
    if n == 0 {
        return Ok(0.0);
    }
    let eps = match norm {
        Norm::LInf => cfg.eps_inf,
        Norm::L2 => cfg.eps_2,
    };
    let mut robust = 0usize;
    for i in 0..n {
        let (x, y) = data.sample(i);
        if pgd_robust(
            net,
            x,
            y,
            norm,
            eps,
            cfg.pgd_steps,
            cfg.pgd_restarts,
            cfg.pgd_step_size,
            rng::derive_seed(cfg.seed, &[i as u64]),
        )? {
            robust += 1;
        }
    }
    Ok(100.0 * robust as f64 / n as f64)
}

/// Evaluate the first `cfg.samples` test samples: clean, certified (both
/// norms and union), and empirical PGD robustness per norm.
pub fn evaluate(net: &Network, data: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let n = cfg.samples.min(data.len());
    let mut verdicts = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y) = data.sample(i);
        let clean = clean_correct(net, x, y)?;
        let cert_linf = certify_linf(net, x, y, cfg.eps_inf, cfg.elide_last)?;
        let cert_l2 = certify_l2(net, x, y, cfg.eps_2, cfg.elide_last)?;
        let sample_seed = rng::derive_seed(cfg.seed, &[i as u64]);
        let pgd_linf_robust = pgd_robust(
            net,
            x,
            y,
            Norm::LInf,
            cfg.eps_inf,
            cfg.pgd_steps,
            cfg.pgd_restarts,
            cfg.pgd_step_size,
            sample_seed,
        )?;
        let pgd_l2_robust = pgd_robust(
            net,
            x,
            y,
            Norm::L2,
            cfg.eps_2,
            cfg.pgd_steps,
            cfg.pgd_restarts,
            cfg.pgd_step_size,
            sample_seed,
        )?;
        verdicts.push(SampleVerdict {
            id: i,
            label: y,
            clean_correct: clean,
            cert_linf,
            cert_l2,
            union_cert: cert_linf && cert_l2,
            pgd_linf_robust,
            pgd_l2_robust,
        });
    }
    let pct = |f: &dyn Fn(&SampleVerdict) -> bool| {
        if n == 0 {
            0.0
        } else {
            100.0 * verdicts.iter().filter(|v| f(v)).count() as f64 / n as f64
        }
    };
    Ok(EvalReport {
        tool_version: crate::VERSION.to_string(),
        config: cfg.clone(),
        samples: n,
        clean_pct: pct(&|v| v.clean_correct),
        cert_linf_pct: pct(&|v| v.cert_linf),
        cert_l2_pct: pct(&|v| v.cert_l2),
        union_pct: pct(&|v| v.union_cert),
        pgd_linf_pct: pct(&|v| v.pgd_linf_robust),
        pgd_l2_pct: pct(&|v| v.pgd_l2_robust),
        verdicts,
    })
}

/// Per-class bound differences `lower_y - upper_i` (positive = robust) for
/// both norms, as CSV rows `norm,class,bound_diff`. The l-inf rows bound
/// over the clamped epsilon box; the l-2 rows come from the Cauchy-Schwarz
/// certification route. Exactly `k - 1` rows per norm.
pub fn bound_diffs_csv(
    net: &Network,
    x: &[f64],
    y: usize,
    eps_inf: f64,
    eps_2: f64,
    elide: bool,
) -> Result<String> {
    let mut out = String::from("norm,class,bound_diff\n");
    let region = clamped_linf_box(x, eps_inf);
    let ud_inf = logit_diff_upper(net, &region, y, elide)?;
    for (i, v) in ud_inf.iter().enumerate() {
        if i != y {
            out.push_str(&format!("linf,{i},{}\n", -v));
        }
    }
    let ud_2 = l2_logit_diff_upper(net, x, y, eps_2, elide)?;
    for (i, v) in ud_2.iter().enumerate() {
        if i != y {
            out.push_str(&format!("l2,{i},{}\n", -v));
        }
    }
    Ok(out)
}

//! Gradient projection: extract the useful per-layer components of the
//! natural-training update and blend them into the certified update.
//!
//! For each parameterized layer l the natural update `g_n^l` is kept scaled
//! by its cosine similarity with the certified update `g_c^l` when that
//! cosine is positive, and dropped otherwise. The blended parameter step is
//! `f + beta * g_p + (1 - beta) * g_c`.

use crate::error::{CureError, Result};
use crate::network::{Network, UpdateDelta};
use crate::tensor::{dot, l2_norm};

/// Per-layer cosines and keep/drop decisions of one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionReport {
    /// Cosine similarity per parameterized layer, in [-1, 1].
    pub cosines: Vec<f64>,
    /// Whether the layer's natural component was kept (cosine > 0).
    pub kept: Vec<bool>,
    /// Blend weight used.
    pub beta: f64,
}

impl ProjectionReport {
    /// CSV rows `epoch,layer,cosine,kept` for the training log.
    pub fn csv_rows(&self, epoch: usize) -> String {
        let mut out = String::new();
        for (l, (c, k)) in self.cosines.iter().zip(&self.kept).enumerate() {
            out.push_str(&format!("{epoch},{l},{c},{}\n", u8::from(*k)));
        }
        out
    }
}

/// Cosine similarity between two flat update vectors. A zero norm on either
/// side means no signal and yields 0.
pub fn layer_cosine(g_n: &[f64], g_c: &[f64]) -> Result<f64> {
    if g_n.len() != g_c.len() {
        return Err(CureError::DimensionMismatch(format!(
            "layer update lengths {} vs {}",
            g_n.len(),
            g_c.len()
        )));
    }
    let nn = l2_norm(g_n);
    let nc = l2_norm(g_c);
    if nn == 0.0 || nc == 0.0 {
        return Ok(0.0);
    }
    // Clamp away rounding excursions outside [-1, 1].
    Ok((dot(g_n, g_c) / (nn * nc)).clamp(-1.0, 1.0))
}

/// The kept natural component for one layer: `cos(g_n, g_c) * g_n` when the
/// cosine is positive, zero otherwise.
pub fn gp_layer(g_n: &[f64], g_c: &[f64]) -> Result<Vec<f64>> {
    let cos = layer_cosine(g_n, g_c)?;
    if cos > 0.0 {
        Ok(g_n.iter().map(|v| cos * v).collect())
    } else {
        Ok(vec![0.0; g_n.len()])
    }
}

/// True-projection variant for ablation: projects `g_c` onto the direction
/// of `g_n` (`cos * ||g_c|| / ||g_n|| * g_n`), rather than scaling `g_n` by
/// the cosine.
pub fn gp_layer_true_projection(g_n: &[f64], g_c: &[f64]) -> Result<Vec<f64>> {
    let cos = layer_cosine(g_n, g_c)?;
    let nn = l2_norm(g_n);
    if cos > 0.0 && nn > 0.0 {
        let scale = cos * l2_norm(g_c) / nn;
        Ok(g_n.iter().map(|v| scale * v).collect())
    } else {
        Ok(vec![0.0; g_n.len()])
    }
}

/// Which per-layer rule `project_update` applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProjectionRule {
    /// Scaled natural update `cos * g_n` (the written formula).
    #[default]
    CosineScaledNatural,
    /// Projection of `g_c` onto `g_n`.
    TrueProjection,
}

/// Project the natural update against the certified update layer by layer.
pub fn project_update(
    g_n: &UpdateDelta,
    g_c: &UpdateDelta,
    rule: ProjectionRule,
    beta: f64,
) -> Result<(UpdateDelta, ProjectionReport)> {
    if g_n.num_layers() != g_c.num_layers() {
        return Err(CureError::DimensionMismatch(format!(
            "update layer counts {} vs {}",
            g_n.num_layers(),
            g_c.num_layers()
        )));
    }
    let mut g_p = g_n.clone();
    let mut cosines = Vec::with_capacity(g_n.num_layers());
    let mut kept = Vec::with_capacity(g_n.num_layers());
    for l in 0..g_n.num_layers() {
        let cos = layer_cosine(g_n.layer(l), g_c.layer(l))?;
        cosines.push(cos);
        kept.push(cos > 0.0);
        let dst = g_p.layer_mut(l);
        let projected = match rule {
            ProjectionRule::CosineScaledNatural => gp_layer(g_n.layer(l), g_c.layer(l))?,
            ProjectionRule::TrueProjection => {
                gp_layer_true_projection(g_n.layer(l), g_c.layer(l))?
            }
        };
        dst.copy_from_slice(&projected);
    }
    Ok((g_p, ProjectionReport { cosines, kept, beta }))
}

/// Apply the blended update `f + beta * g_p + (1 - beta) * g_c`.
pub fn blended_step(
    f: &Network,
    g_p: &UpdateDelta,
    g_c: &UpdateDelta,
    beta: f64,
) -> Result<Network> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(CureError::Config(format!(
            "blend weight beta must lie in [0, 1], got {beta}"
        )));
    }
    let mut out = f.clone();
    out.apply_delta(g_p, beta);
    out.apply_delta(g_c, 1.0 - beta);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{InitScheme, Layer};

    fn net() -> Network {
        Network::new(
            vec![3],
            vec![Layer::affine(3, 4), Layer::ReLU, Layer::affine(4, 2)],
            2,
        )
        .unwrap()
        .init(InitScheme::default(), 9)
    }

    #[test]
    fn cosine_reference_points() {
        let a = [1.0, 2.0, -1.0];
        assert!((layer_cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((layer_cosine(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(layer_cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(layer_cosine(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(layer_cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn gp_layer_rules() {
        // Anti-aligned: dropped.
        let z = gp_layer(&[1.0, 0.0], &[-1.0, 0.0]).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
        // Identical: kept whole (cosine one up to rounding).
        let g = [0.5, -0.25];
        for (a, b) in gp_layer(&g, &g).unwrap().iter().zip(&g) {
            assert!((a - b).abs() < 1e-12);
        }
        // Hand example: g_n = (1, 0), g_c = (1, 1) -> cos = 1/sqrt(2),
        // GP = (1/sqrt(2), 0).
        let gp = gp_layer(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((gp[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(gp[1], 0.0);
    }

    #[test]
    fn gp_norm_never_exceeds_natural_norm() {
        let g_n = [0.3, -0.4, 1.2, 0.0];
        for g_c in [[1.0, 1.0, 1.0, 1.0], [0.3, -0.4, 1.2, 0.0], [-1.0, 0.2, 0.5, 3.0]] {
            let gp = gp_layer(&g_n, &g_c).unwrap();
            assert!(crate::tensor::l2_norm(&gp) <= crate::tensor::l2_norm(&g_n) + 1e-12);
        }
    }

    #[test]
    fn project_update_per_layer() {
        let f = net();
        let mut g_n = UpdateDelta::zeros_like(&f);
        let mut g_c = UpdateDelta::zeros_like(&f);
        // Layer 0 aligned, layer 1 anti-aligned.
        g_n.layer_mut(0).fill(1.0);
        g_c.layer_mut(0).fill(2.0);
        g_n.layer_mut(1).fill(1.0);
        g_c.layer_mut(1).fill(-1.0);
        let (g_p, report) = project_update(&g_n, &g_c, ProjectionRule::default(), 0.8).unwrap();
        assert!((report.cosines[0] - 1.0).abs() < 1e-12);
        assert!((report.cosines[1] + 1.0).abs() < 1e-12);
        assert_eq!(report.kept, vec![true, false]);
        assert!(g_p.layer(0).iter().all(|v| (*v - 1.0).abs() < 1e-12));
        assert!(g_p.layer(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn all_anti_aligned_projects_to_zero() {
        let f = net();
        let mut g_n = UpdateDelta::zeros_like(&f);
        let mut g_c = UpdateDelta::zeros_like(&f);
        for l in 0..g_n.num_layers() {
            g_n.layer_mut(l).fill(0.7);
            g_c.layer_mut(l).fill(-0.1);
        }
        let (g_p, _) = project_update(&g_n, &g_c, ProjectionRule::default(), 0.5).unwrap();
        assert!(g_p.iter_values().all(|v| v == 0.0));
    }

    #[test]
    fn identical_updates_project_to_identity() {
        let f = net();
        let mut g = UpdateDelta::zeros_like(&f);
        for l in 0..g.num_layers() {
            for (i, v) in g.layer_mut(l).iter_mut().enumerate() {
                *v = (i as f64 * 0.37).sin();
            }
        }
        let (g_p, _) = project_update(&g, &g, ProjectionRule::default(), 0.5).unwrap();
        for l in 0..g.num_layers() {
            for (a, b) in g_p.layer(l).iter().zip(g.layer(l)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blended_step_endpoints() {
        let f = net();
        let mut g_p = UpdateDelta::zeros_like(&f);
        let mut g_c = UpdateDelta::zeros_like(&f);
        g_p.layer_mut(0).fill(0.25);
        g_c.layer_mut(1).fill(-0.5);

        // beta = 0: exactly f + g_c.
        let b0 = blended_step(&f, &g_p, &g_c, 0.0).unwrap();
        let mut expect = f.clone();
        expect.apply_delta(&g_c, 1.0);
        assert_eq!(b0, expect);

        // beta = 1: exactly f + g_p.
        let b1 = blended_step(&f, &g_p, &g_c, 1.0).unwrap();
        let mut expect = f.clone();
        expect.apply_delta(&g_p, 1.0);
        assert_eq!(b1, expect);

        assert!(blended_step(&f, &g_p, &g_c, 1.2).is_err());
    }

    #[test]
    fn report_rows_format() {
        let report = ProjectionReport {
            cosines: vec![0.5, -0.25],
            kept: vec![true, false],
            beta: 0.8,
        };
        let rows = report.csv_rows(3);
        assert_eq!(rows, "3,0,0.5,1\n3,1,-0.25,0\n");
    }
}

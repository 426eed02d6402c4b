//! Training orchestration: one standard epoch, annealed certified epochs,
//! optional gradient-projection rounds once the ramp is done, and
//! fine-tuning from a single-norm checkpoint.
//!
//! Epoch layout of `train`: epoch 0 is plain cross-entropy; epochs
//! `1..epochs` are certified epochs whose epsilon/lambda values ramp
//! per batch from zero over `anneal_epochs` certified epochs. Learning-rate
//! decay applies at the two milestone epochs. Gradient-projection rounds
//! (natural epoch + certified epoch from the same snapshot, projected and
//! blended) replace certified epochs strictly after the ramp, with the
//! final epsilon values.

use crate::bounds::{box_penalty_grad, AbsWeights};
use crate::checkpoint;
use crate::config::{AnnealShape, TrainConfig, TrainMode};
use crate::data::Dataset;
use crate::error::{CureError, Result};
use crate::loss::batch_loss_grad;
use crate::network::{Network, UpdateDelta};
use crate::optim::Adam;
use crate::projection::{blended_step, project_update, ProjectionReport, ProjectionRule};
use crate::rng::{self, stream};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use std::time::Instant;

/// Scheduled values for one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub eps_inf: f64,
    pub eps_2: f64,
    pub lambda_inf: f64,
    pub lambda_2: f64,
    /// Warm-up coefficient in [0, 1]: 1 at ramp start, 0 from ramp end on.
    pub warmup: f64,
    pub lr: f64,
}

/// Per-step epsilon/lambda ramp and per-epoch learning-rate decay.
#[derive(Debug, Clone)]
pub struct Schedule {
    eps_inf: f64,
    eps_2: f64,
    lambda_inf: f64,
    lambda_2: f64,
    anneal_epochs: usize,
    steps_per_epoch: usize,
    shape: AnnealShape,
    lr: f64,
    decay_epochs: (usize, usize),
    decay_factor: f64,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        Self {
            eps_inf: cfg.eps_inf,
            eps_2: cfg.eps_2,
            lambda_inf: cfg.lambda_inf,
            lambda_2: cfg.lambda_2,
            anneal_epochs: cfg.anneal_epochs,
            steps_per_epoch: steps_per_epoch.max(1),
            shape: cfg.anneal_shape,
            lr: cfg.lr,
            decay_epochs: cfg.lr_decay_epochs,
            decay_factor: cfg.lr_decay_factor,
        }
    }

    /// Ramp fraction in [0, 1] for a certified epoch (1-based) and step.
    fn ramp(&self, epoch: usize, step: usize) -> f64 {
        if self.anneal_epochs == 0 {
            return 1.0;
        }
        if epoch == 0 {
            return 0.0;
        }
        let done = (epoch - 1) * self.steps_per_epoch + step;
        let total = self.anneal_epochs * self.steps_per_epoch;
        let t = (done as f64 / total as f64).min(1.0);
        match self.shape {
            AnnealShape::Linear => t,
            AnnealShape::Smooth => t * t * t,
        }
    }

    /// True once the ramp has finished before this epoch starts.
    pub fn ramp_complete(&self, epoch: usize) -> bool {
        epoch > self.anneal_epochs
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        if epoch >= self.decay_epochs.0 {
            lr *= self.decay_factor;
        }
        if epoch >= self.decay_epochs.1 {
            lr *= self.decay_factor;
        }
        lr
    }

    pub fn at(&self, epoch: usize, step: usize) -> StepSchedule {
        let t = self.ramp(epoch, step);
        StepSchedule {
            eps_inf: self.eps_inf * t,
            eps_2: self.eps_2 * t,
            lambda_inf: self.lambda_inf * t,
            lambda_2: self.lambda_2 * t,
            warmup: 1.0 - t,
            lr: self.lr_at(epoch),
        }
    }
}

/// One row per optimization step plus projection rows per GP round.
#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    pub projections: Vec<(usize, ProjectionReport)>,
}

#[derive(Debug, Clone)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub mode: String,
    pub loss_total: f64,
    pub loss_linf: f64,
    pub loss_l2: f64,
    pub loss_kl: f64,
    pub eps_inf: f64,
    pub eps_2: f64,
    pub lr: f64,
    pub n_c: usize,
    pub wall_ms: u64,
}

impl TrainingLog {
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "epoch,step,mode,loss_total,loss_linf,loss_l2,loss_kl,eps_inf,eps_2,lr,n_c,wall_ms\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.step,
                r.mode,
                r.loss_total,
                r.loss_linf,
                r.loss_l2,
                r.loss_kl,
                r.eps_inf,
                r.eps_2,
                r.lr,
                r.n_c,
                r.wall_ms
            ));
        }
        out
    }

    pub fn projection_csv(&self) -> String {
        let mut out = String::from("epoch,layer,cosine,kept\n");
        for (epoch, report) in &self.projections {
            out.push_str(&report.csv_rows(*epoch));
        }
        out
    }

    /// Mean total loss of the rows belonging to one epoch.
    pub fn epoch_mean_loss(&self, epoch: usize) -> Option<f64> {
        let rows: Vec<&LogRow> = self.rows.iter().filter(|r| r.epoch == epoch).collect();
        if rows.is_empty() {
            return None;
        }
        Some(rows.iter().map(|r| r.loss_total).sum::<f64>() / rows.len() as f64)
    }
}

/// Seeded epoch shuffle (Fisher-Yates with seed `base + epoch` stream).
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::rng_for(seed, &[stream::SHUFFLE, epoch as u64]);
    order.shuffle(&mut rng);
    order
}

fn effective_len(data: &Dataset, cfg: &TrainConfig) -> usize {
    if cfg.train_subset > 0 {
        cfg.train_subset.min(data.len())
    } else {
        data.len()
    }
}

/// One plain cross-entropy epoch (minibatch Adam). Deterministic given the
/// seed and data order.
pub fn standard_epoch(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
    opt: &mut Adam,
    epoch: usize,
    lr: f64,
    log: &mut TrainingLog,
) -> Result<()> {
    let n = effective_len(data, cfg);
    let order = epoch_order(n, cfg.seed, epoch);
    for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let started = Instant::now();
        let mut grads = UpdateDelta::zeros_like(net);
        let mut total = 0.0;
        let inv = 1.0 / chunk.len() as f64;
        for &i in chunk {
            let (x, y) = data.sample(i);
            let (loss, g) = net.backward_ce(&Tensor::from_slice(x), y)?;
            total += loss * inv;
            grads.add_scaled(&g, inv);
        }
        if !total.is_finite() {
            return Err(CureError::TrainingDiverged {
                epoch,
                batch: step,
                detail: format!("standard CE loss {total}"),
            });
        }
        opt.step(net, &grads, lr);
        log.rows.push(LogRow {
            epoch,
            step,
            mode: "standard".to_string(),
            loss_total: total,
            loss_linf: 0.0,
            loss_l2: 0.0,
            loss_kl: 0.0,
            eps_inf: 0.0,
            eps_2: 0.0,
            lr,
            n_c: 0,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok(())
}

/// One certified epoch: shuffled minibatches, the mode loss at the
/// scheduled epsilon values plus warm-up regularization while ramping,
/// one Adam step per batch.
pub fn certified_epoch(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
    schedule: &Schedule,
    epoch: usize,
    opt: &mut Adam,
    log: &mut TrainingLog,
) -> Result<()> {
    let mode = cfg.mode.loss_mode();
    let n = effective_len(data, cfg);
    let order = epoch_order(n, cfg.seed, epoch);
    for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let started = Instant::now();
        let sched = schedule.at(epoch, step);
        let loss_cfg = cfg.loss_config(
            sched.eps_inf,
            sched.eps_2,
            sched.lambda_inf,
            sched.lambda_2,
            rng::derive_seed(cfg.seed, &[epoch as u64, step as u64]),
        );
        let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| data.sample(i)).collect();
        let mut out = batch_loss_grad(net, &batch, mode, &loss_cfg).map_err(|e| match e {
            CureError::NonFinite { layer, context } => CureError::TrainingDiverged {
                epoch,
                batch: step,
                detail: format!("non-finite at layer {layer}: {context}"),
            },
            other => other,
        })?;

        // Warm-up regularization during the ramp, on each sample's point box
        // at the scheduled l-inf epsilon.
        let mut total = out.total;
        if sched.warmup > 0.0 && (cfg.warmup_tightness > 0.0 || cfg.warmup_relu > 0.0) {
            let abs = AbsWeights::new(net);
            let tight_c = cfg.warmup_tightness * sched.warmup / batch.len() as f64;
            let relu_c = cfg.warmup_relu * sched.warmup / batch.len() as f64;
            for (x, _) in &batch {
                let region = crate::bounds::clamped_linf_box(x, sched.eps_inf);
                let (tight, relu) =
                    box_penalty_grad(net, &abs, &region, tight_c, relu_c, &mut out.grads)?;
                total += tight_c * tight + relu_c * relu;
            }
        }

        if !total.is_finite() {
            return Err(CureError::TrainingDiverged {
                epoch,
                batch: step,
                detail: format!(
                    "loss_total {total} (linf {}, l2 {}, kl {})",
                    out.loss_linf, out.loss_l2, out.loss_kl
                ),
            });
        }
        opt.step(net, &out.grads, sched.lr);
        log.rows.push(LogRow {
            epoch,
            step,
            mode: mode.name().to_string(),
            loss_total: total,
            loss_linf: out.loss_linf,
            loss_l2: out.loss_l2,
            loss_kl: out.loss_kl,
            eps_inf: sched.eps_inf,
            eps_2: sched.eps_2,
            lr: sched.lr,
            n_c: out.n_certified,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok(())
}

/// One gradient-projection round: a natural epoch and a certified epoch
/// from the same snapshot, per-layer projection of the natural update, and
/// the blended step. The natural epoch runs on a cloned optimizer state so
/// the two inner epochs stay isolated; the certified state persists.
#[allow(clippy::too_many_arguments)]
pub fn gp_round(
    net: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
    schedule: &Schedule,
    epoch: usize,
    opt: &mut Adam,
    log: &mut TrainingLog,
    rule: ProjectionRule,
) -> Result<Network> {
    debug_assert!(
        schedule.ramp_complete(epoch),
        "projection rounds require the final epsilon values"
    );
    if cfg.beta == 0.0 {
        // Pure certified step; skip the natural epoch entirely.
        let mut certified = net.clone();
        certified_epoch(&mut certified, data, cfg, schedule, epoch, opt, log)?;
        return Ok(certified);
    }

    let mut natural = net.clone();
    let mut nat_opt = opt.clone();
    let lr = schedule.lr_at(epoch);
    standard_epoch(&mut natural, data, cfg, &mut nat_opt, epoch, lr, log)?;

    let mut certified = net.clone();
    certified_epoch(&mut certified, data, cfg, schedule, epoch, opt, log)?;

    let g_n = net.delta_to(&natural)?;
    let g_c = net.delta_to(&certified)?;
    let (g_p, report) = project_update(&g_n, &g_c, rule, cfg.beta)?;
    let blended = blended_step(net, &g_p, &g_c, cfg.beta)?;
    log.projections.push((epoch, report));
    Ok(blended)
}

/// Full training run: initialization, one standard epoch, annealed
/// certified epochs, and GP rounds in the post-anneal phase when enabled.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<(Network, TrainingLog)> {
    let net = crate::config::build_network(&cfg.arch, data.input_shape(), data.num_classes())?;
    let net = net.init(cfg.init_scheme(), cfg.seed);
    train_from(net, cfg, data)
}

/// Training loop starting from given parameters.
pub fn train_from(
    mut net: Network,
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<(Network, TrainingLog)> {
    let n = effective_len(data, cfg);
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = Schedule::new(cfg, steps_per_epoch);
    let mut log = TrainingLog::default();
    let mut opt = Adam::new(&net);

    standard_epoch(
        &mut net,
        data,
        cfg,
        &mut opt,
        0,
        schedule.lr_at(0),
        &mut log,
    )?;
    for epoch in 1..cfg.epochs {
        let use_gp =
            cfg.gp_enabled && cfg.mode == TrainMode::Scratch && schedule.ramp_complete(epoch);
        if use_gp {
            net = gp_round(
                &net,
                data,
                cfg,
                &schedule,
                epoch,
                &mut opt,
                &mut log,
                ProjectionRule::default(),
            )?;
        } else {
            certified_epoch(&mut net, data, cfg, &schedule, epoch, &mut opt, &mut log)?;
        }
    }
    Ok((net, log))
}

/// Fine-tune a single-norm pre-trained checkpoint with the scratch
/// objective at full epsilon (no annealing) for
/// `ceil(finetune_fraction * epochs)` epochs. Gradient projection stays
/// off unless explicitly enabled.
pub fn finetune(cfg: &TrainConfig, data: &Dataset) -> Result<(Network, TrainingLog)> {
    let source = cfg.finetune_source.as_ref().ok_or_else(|| {
        CureError::Config("finetune mode requires finetune_source".to_string())
    })?;
    let net = checkpoint::load_checkpoint(std::path::Path::new(source))?;
    let expected = crate::config::build_network(&cfg.arch, data.input_shape(), data.num_classes())?;
    if net.arch_description() != expected.arch_description() {
        return Err(CureError::ArchitectureMismatch(format!(
            "checkpoint {} vs configured {}",
            net.arch_description(),
            expected.arch_description()
        )));
    }
    let rounds = (cfg.finetune_fraction * cfg.epochs as f64).ceil() as usize;
    finetune_epochs(net, cfg, data, rounds)
}

fn finetune_epochs(
    mut net: Network,
    cfg: &TrainConfig,
    data: &Dataset,
    rounds: usize,
) -> Result<(Network, TrainingLog)> {
    let n = effective_len(data, cfg);
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    // Full epsilon from the first step: no anneal window, no warm-up.
    let flat = TrainConfig {
        anneal_epochs: 0,
        warmup_tightness: 0.0,
        warmup_relu: 0.0,
        mode: TrainMode::Scratch,
        ..cfg.clone()
    };
    let schedule = Schedule::new(&flat, steps_per_epoch);
    let mut log = TrainingLog::default();
    let mut opt = Adam::new(&net);
    for epoch in 1..=rounds {
        certified_epoch(&mut net, data, &flat, &schedule, epoch, &mut opt, &mut log)?;
    }
    Ok((net, log))
}

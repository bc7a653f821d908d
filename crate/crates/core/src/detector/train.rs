use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch::{make_batch, Batch, PreparedSample};
use super::config::{DetectorConfig, FusionConfig};
use super::infer::evaluate;
use super::model::{BoundDetector, Detector, ForwardOutput};
use crate::enhance::EnhanceConfig;
use crate::error::{Error, Result};
use crate::fusion::MaskTriple;
use crate::losses::{confidence_loss, location_losses, total_loss, LossConfig, LossNodes, TargetAssignment};
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, NodeId, Tensor};

/// Batch-norm running statistics momentum (weight on the old value).
pub const BN_MOMENTUM: f64 = 0.9;

/// Fresh model for `cfg`, seeded from `cfg.seed`.
pub fn init_model(cfg: &DetectorConfig, fusion: &FusionConfig, enh: &EnhanceConfig) -> Result<Detector> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Detector::init(cfg, fusion, enh.rgb_channels(), &mut rng)
}

/// Graph nodes of the full training objective for one batch.
pub struct Objective {
    pub forward: ForwardOutput,
    pub losses: LossNodes,
    /// Detection loss plus confidence-head loss when the model has one.
    pub total: NodeId,
    pub targets: TargetAssignment,
}

pub fn build_objective(
    model: &Detector,
    g: &mut Graph,
    bound: &BoundDetector,
    batch: &Batch,
    loss: &LossConfig,
    masks: Option<&MaskTriple>,
) -> Result<Objective> {
    let rgb = batch.rgb.clone().map(|t| g.constant(t));
    let hmap = batch.height.clone().map(|t| g.constant(t));
    let forward = model.forward_graph(g, bound, rgb, hmap, true, masks)?;
    let targets = TargetAssignment::assign(&batch.annotations, model.num_classes, batch.grid(model.stride)?, model.stride)?;
    let ll = location_losses(g, &forward.pred, &targets, loss.focal_gamma)?;
    let losses = total_loss(g, &ll, &forward.masks)?;
    let total = match forward.conf {
        Some((cr, ch)) => {
            let c = confidence_loss(g, cr, ch, &targets, loss.focal_gamma)?;
            g.add(losses.total, c)?
        }
        None => losses.total,
    };
    Ok(Objective {
        forward,
        losses,
        total,
        targets,
    })
}

/// Loss values, gradients (in [`Detector::params`] order) and batch
/// statistics from one training-mode pass.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss_easy: f64,
    pub loss_hard: f64,
    pub objective: f64,
    pub grads: Vec<Tensor>,
    /// Global L2 norm of `grads`.
    pub grad_norm: f64,
    pub bn_stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

pub fn compute_step(model: &Detector, batch: &Batch, loss: &LossConfig, masks: Option<&MaskTriple>) -> Result<StepResult> {
    let mut g = Graph::new();
    let bound = BoundDetector::bind(&mut g, model, true);
    let obj = build_objective(model, &mut g, &bound, batch, loss, masks)?;
    g.backward(obj.total)?;
    let grads: Vec<Tensor> = bound
        .params
        .iter()
        .map(|&p| g.grad(p).cloned().unwrap_or_else(|| Tensor::zeros(g.value(p).shape().to_vec())))
        .collect();
    let bn_stats = obj
        .forward
        .bn_nodes
        .iter()
        .map(|&(idx, n)| {
            let (m, v) = g.batch_norm_stats(n).expect("training batch norm keeps its statistics");
            (idx, m.to_vec(), v.to_vec())
        })
        .collect();
    Ok(StepResult {
        loss_easy: g.value(obj.losses.easy).item(),
        loss_hard: g.value(obj.losses.hard).item(),
        objective: g.value(obj.total).item(),
        grad_norm: grads.iter().flat_map(|t| t.data()).map(|v: &f64| v * v).sum::<f64>().sqrt(),
        grads,
        bn_stats,
    })
}

/// Objective value only; `masks` pins the hard/easy split.
pub fn objective_value(model: &Detector, batch: &Batch, loss: &LossConfig, masks: Option<&MaskTriple>) -> Result<f64> {
    let mut g = Graph::new();
    let bound = BoundDetector::bind(&mut g, model, false);
    let obj = build_objective(model, &mut g, &bound, batch, loss, masks)?;
    Ok(g.value(obj.total).item())
}

/// Momentum SGD; weight decay applies to convolution weights only. With
/// `grad_clip > 0` the loss gradient is first rescaled to at most that norm.
pub fn sgd_update(model: &mut Detector, grads: &[Tensor], lr: f64, cfg: &DetectorConfig) {
    let mut scale = 1.0;
    if cfg.grad_clip > 0.0 {
        let norm = grads.iter().flat_map(|t| t.data()).map(|v: &f64| v * v).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            scale = cfg.grad_clip / norm;
        }
    }
    let decay: Vec<bool> = model.param_names().iter().map(|n| n.ends_with(".weight")).collect();
    let mut velocity = std::mem::take(&mut model.velocity);
    for (((p, v), gr), wd) in model.params_mut().into_iter().zip(velocity.iter_mut()).zip(grads).zip(decay) {
        let (pd, vd) = (p.data_mut(), v.data_mut());
        for ((w, vel), &gv) in pd.iter_mut().zip(vd.iter_mut()).zip(gr.data()) {
            let step = if wd { scale * gv + cfg.weight_decay * *w } else { scale * gv };
            *vel = cfg.momentum * *vel + step;
            *w -= lr * *vel;
        }
    }
    model.velocity = velocity;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_easy: f64,
    pub loss_hard: f64,
    pub loss_total: f64,
    /// NaN on epochs without validation.
    pub val_ap: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss_easy,loss_hard,loss_total,val_ap\n");
        for e in &self.epochs {
            let ap = if e.val_ap.is_nan() { "nan".to_string() } else { format!("{:.6}", e.val_ap) };
            writeln!(s, "{},{:.6},{:.6},{:.6},{ap}", e.epoch, e.loss_easy, e.loss_hard, e.loss_total).unwrap();
        }
        s
    }
}

/// Batches of sample indices for one epoch. Samples of different sizes never
/// share a batch.
fn epoch_batches(samples: &[PreparedSample], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut open: Vec<((usize, usize), Vec<usize>)> = Vec::new();
    for i in order {
        let key = (samples[i].width, samples[i].height_px);
        let slot = match open.iter().position(|(k, _)| *k == key) {
            Some(p) => p,
            None => {
                open.push((key, Vec::new()));
                open.len() - 1
            }
        };
        open[slot].1.push(i);
        if open[slot].1.len() == batch_size {
            out.push(std::mem::take(&mut open[slot].1));
        }
    }
    out.extend(open.into_iter().map(|(_, b)| b).filter(|b| !b.is_empty()));
    out
}

/// Trains `model` in place. Validation runs every `val_every` epochs and on
/// the last one; an empty `val` set logs NaN.
pub fn train(
    model: &mut Detector,
    train_set: &[PreparedSample],
    val: &[PreparedSample],
    cfg: &DetectorConfig,
    loss: &LossConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    loss.validate()?;
    if train_set.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.learning_rate(epoch);
        let (mut easy, mut hard, mut total) = (0.0, 0.0, 0.0);
        let batches = epoch_batches(train_set, cfg.batch_size, &mut rng);
        for idx in &batches {
            let members: Vec<&PreparedSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let flips: Vec<(bool, bool)> = idx
                .iter()
                .map(|_| {
                    if cfg.augment {
                        (rng.random_bool(0.5), rng.random_bool(0.5))
                    } else {
                        (false, false)
                    }
                })
                .collect();
            let batch = make_batch(&members, &flips)?;
            let step = compute_step(model, &batch, loss, None)?;
            if !step.objective.is_finite() || step.grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Numerical {
                    step: report.steps,
                    msg: format!("non-finite loss {} in epoch {epoch}", step.objective),
                });
            }
            log::trace!("step {} loss {:.4} grad norm {:.3}", report.steps, step.objective, step.grad_norm);
            sgd_update(model, &step.grads, lr, cfg);
            model.update_running_stats(&step.bn_stats, BN_MOMENTUM);
            easy += step.loss_easy;
            hard += step.loss_hard;
            total += step.objective;
            report.steps += 1;
        }
        let nb = batches.len() as f64;
        let validate = !val.is_empty() && ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.max_epochs);
        let val_ap = if validate { evaluate(model, val, cfg)?.0 } else { f64::NAN };
        let row = EpochLog {
            epoch: epoch + 1,
            loss_easy: easy / nb,
            loss_hard: hard / nb,
            loss_total: total / nb,
            val_ap,
        };
        log::info!(
            "epoch {} lr {lr:.3e} loss {:.4} (easy {:.4}, hard {:.4}) val_ap {:.4}",
            row.epoch,
            row.loss_total,
            row.loss_easy,
            row.loss_hard,
            row.val_ap
        );
        on_epoch(&row);
        report.epochs.push(row);
    }
    Ok(report)
}

pub fn save_model(model: &Detector, path: &Path) -> Result<()> {
    write_checkpoint(path, &model.to_named_tensors())
}

/// Loads weights into a model built from `cfg`; the checkpoint must match
/// that architecture.
pub fn load_model(path: &Path, cfg: &DetectorConfig, fusion: &FusionConfig, enh: &EnhanceConfig) -> Result<Detector> {
    let mut model = init_model(cfg, fusion, enh)?;
    model.load_named_tensors(read_checkpoint(path)?)?;
    Ok(model)
}

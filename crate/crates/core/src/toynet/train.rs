//! SGD-with-momentum trainer over the anchor matcher and multitask loss.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::network::{Gradients, Network};
use super::tensor::Tensor;
use crate::assign::{encode_targets, match_baseline, match_two_step, Assignment, MatchConfig};
use crate::data::{augment, stream_rng, AugConfig, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{generate_anchors, BBox};
use crate::loss::{multitask_loss, LossInputs, LossRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Matcher {
    Baseline { iou: f64 },
    TwoStep(MatchConfig),
}

impl Matcher {
    pub fn assign(&self, anchors: &[BBox], gts: &[BBox]) -> Result<Assignment> {
        match self {
            Matcher::Baseline { iou } => match_baseline(anchors, gts, *iou),
            Matcher::TwoStep(cfg) => match_two_step(anchors, gts, cfg),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// The rate drops when the epoch loss has not fallen 1% below its
    /// reference within this many epochs.
    pub plateau_patience: usize,
    pub lr_divisor: f64,
    /// Steps over which the rate ramps linearly up to `lr` (0 disables).
    pub warmup_steps: usize,
    pub seed: u64,
    pub lambda: f64,
    pub ohem_ratio: usize,
    pub matcher: Matcher,
    /// `None` trains on the images as given.
    pub aug: Option<AugConfig>,
    /// Worker threads for per-image forward/backward; results are reduced in
    /// image order, so any value gives the same weights.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 30,
            plateau_patience: 3,
            lr_divisor: 10.0,
            warmup_steps: 0,
            seed: 42,
            lambda: 4.0,
            ohem_ratio: 3,
            matcher: Matcher::TwoStep(MatchConfig::default()),
            aug: Some(AugConfig {
                output_size: 64,
                ..AugConfig::default()
            }),
            jobs: 1,
        }
    }
}

pub const PLATEAU_REL_IMPROVEMENT: f64 = 0.01;

impl TrainConfig {
    /// Same schedule with single-threshold matching at the two-step matcher's
    /// primary IoU.
    pub fn baseline(&self) -> Self {
        let iou = match self.matcher {
            Matcher::TwoStep(m) => m.step1_iou,
            Matcher::Baseline { iou } => iou,
        };
        TrainConfig {
            matcher: Matcher::Baseline { iou },
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay be non-negative");
        }
        if self.lr_divisor <= 1.0 {
            return bad("lr_divisor must exceed 1");
        }
        if self.batch_size == 0 || self.jobs == 0 {
            return bad("batch_size and jobs must be positive");
        }
        if let Some(aug) = &self.aug {
            aug.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub mean_cls: f64,
    pub mean_reg: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: Vec<LossRecord>,
}

impl TrainReport {
    /// `epoch,lr,mean_loss,mean_cls,mean_reg`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,mean_loss,mean_cls,mean_reg\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:e},{:.9},{:.9},{:.9}",
                e.epoch, e.lr, e.mean_loss, e.mean_cls, e.mean_reg
            );
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

/// Momentum buffers in [`Network::convs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    velocity: Gradients<f32>,
}

impl SgdState {
    pub fn new(net: &Network<f32>) -> Self {
        SgdState {
            velocity: Gradients::zeros_like(net),
        }
    }
}

/// `v = momentum * v + (g + wd * w)`, `w -= lr * v`, for weights and biases alike.
pub fn sgd_step(net: &mut Network<f32>, grads: &Gradients<f32>, state: &mut SgdState, lr: f64, tc: &TrainConfig) {
    let (lr, mu, wd) = (lr as f32, tc.momentum as f32, tc.weight_decay as f32);
    let update = |w: &mut [f32], g: &[f32], v: &mut [f32]| {
        for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = mu * *v + (g + wd * *w);
            *w -= lr * *v;
        }
    };
    for ((conv, g), v) in net.convs_mut().into_iter().zip(&grads.0).zip(&mut state.velocity.0) {
        update(conv.weight.data_mut(), &g.weight, &mut v.weight);
        update(&mut conv.bias, &g.bias, &mut v.bias);
    }
}

struct Sample {
    grads: Gradients<f32>,
    total: f64,
    cls: f64,
    reg: f64,
    n_pos: usize,
    n_neg: usize,
}

fn sample_gradients(
    net: &Network<f32>,
    anchors: &[BBox],
    image: &Tensor<f32>,
    gts: &[BBox],
    tc: &TrainConfig,
) -> Result<Sample> {
    let assignment = tc.matcher.assign(anchors, gts)?;
    let targets = encode_targets(&assignment, anchors, gts)?;
    let (raw, trace) = net.forward_trace(image)?;
    if raw.len() != anchors.len() {
        return Err(Error::shape(
            "train",
            format!("network emits {} rows for {} anchors", raw.len(), anchors.len()),
        ));
    }
    let out = multitask_loss(&LossInputs {
        logits: &raw.logits,
        offsets: &raw.offsets,
        assignment: &assignment,
        targets: &targets,
        lambda: tc.lambda,
        ohem_ratio: tc.ohem_ratio,
    })?;
    let grads = net.backward(&trace, &out.grad_logits, &out.grad_offsets)?;
    Ok(Sample {
        grads,
        total: out.total,
        cls: out.cls_term,
        reg: out.reg_term,
        n_pos: out.n_positive(),
        n_neg: out.selected_negatives.len(),
    })
}

/// Trains `net` in place. Every random choice (epoch order, augmentation) is
/// drawn from streams keyed by `(seed, epoch, image)`.
pub fn train(net: &mut Network<f32>, data: &Dataset, tc: &TrainConfig) -> Result<TrainReport> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let grid = generate_anchors(&net.config().anchors)?;
    let anchors = grid.anchors();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(tc.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut state = SgdState::new(net);
    let mut lr = tc.lr;
    let mut reference = f64::INFINITY;
    let mut stale = 0;
    let mut report = TrainReport::default();
    let mut step = 0;

    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream_rng(tc.seed, 1 + epoch as u64, u64::MAX));
        let (mut sum, mut sum_cls, mut sum_reg, mut n_steps) = (0.0, 0.0, 0.0, 0usize);

        for batch in order.chunks(tc.batch_size) {
            let current: &Network<f32> = net;
            let samples: Vec<Result<Sample>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let (image, gts) = match &tc.aug {
                            Some(aug) => {
                                let mut rng = stream_rng(tc.seed, 1 + epoch as u64, i as u64);
                                augment(&data.images[i], &data.boxes[i], aug, &mut rng)?
                            }
                            None => (data.images[i].clone(), data.boxes[i].clone()),
                        };
                        sample_gradients(current, anchors, &image, &gts, tc)
                    })
                    .collect()
            });
            let mut grads = Gradients::zeros_like(net);
            let (mut total, mut cls, mut reg, mut n_pos, mut n_neg) = (0.0, 0.0, 0.0, 0, 0);
            for s in samples {
                let s = s.map_err(|e| match e {
                    Error::NonFiniteActivation { .. } | Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN },
                    e => e,
                })?;
                grads.add_assign(&s.grads);
                total += s.total;
                cls += s.cls;
                reg += s.reg;
                n_pos += s.n_pos;
                n_neg += s.n_neg;
            }
            let b = batch.len() as f64;
            let (total, cls, reg) = (total / b, cls / b, reg / b);
            if !total.is_finite() {
                return Err(Error::Diverged { step, loss: total });
            }
            grads.scale(1.0 / batch.len() as f32);
            let step_lr = if step < tc.warmup_steps {
                lr * (step + 1) as f64 / tc.warmup_steps as f64
            } else {
                lr
            };
            sgd_step(net, &grads, &mut state, step_lr, tc);
            if net.convs().iter().any(|c| !c.weight.all_finite() || c.bias.iter().any(|b| !b.is_finite())) {
                return Err(Error::Diverged { step, loss: total });
            }
            report.steps.push(LossRecord {
                step,
                total,
                cls,
                reg,
                n_pos,
                n_neg_selected: n_neg,
            });
            step += 1;
            sum += total;
            sum_cls += cls;
            sum_reg += reg;
            n_steps += 1;
        }

        let k = n_steps as f64;
        let mean = sum / k;
        report.epochs.push(EpochStats {
            epoch,
            lr,
            mean_loss: mean,
            mean_cls: sum_cls / k,
            mean_reg: sum_reg / k,
        });
        // plateau: less than 1% below the reference after `patience` epochs
        stale += 1;
        if mean < reference * (1.0 - PLATEAU_REL_IMPROVEMENT) {
            reference = mean;
            stale = 0;
        } else if stale >= tc.plateau_patience {
            lr /= tc.lr_divisor;
            reference = reference.min(mean);
            stale = 0;
        }
    }
    Ok(report)
}

//! Finite-difference checks of every analytical gradient, run in `f64`.
//!
//! Each coordinate is compared against a central difference with step
//! [`STEP`]. A coordinate within `h` of a kink (rectifier, smooth-L1
//! transition or a change in mined negatives) is counted as skipped rather
//! than scored. Kinks are detected by comparing central and second
//! differences at `h` and `h / 2`: on smooth stretches the first agree and the
//! second scale linearly with the step.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::assign::{Assignment, Label, RegressionTargets};
use crate::data::stream_rng;
use crate::error::Result;
use crate::geometry::AnchorConfig;
use crate::loss::{multitask_loss, smooth_l1, softmax_ce, LossInputs};
use crate::toynet::layers::{fuse, fuse_backward_higher};
use crate::toynet::{build_network, Conv2d, DetectionHead, HeadKind, NetConfig, Network, StageSpec, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error, so exact zeros compare cleanly.
pub const REL_FLOOR: f64 = 1e-4;
const KINK_TOL: f64 = 1e-7;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentCheck {
    pub name: &'static str,
    pub instances: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl ComponentCheck {
    fn new(name: &'static str) -> Self {
        ComponentCheck {
            name,
            instances: 0,
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
        }
    }

    /// Scores one coordinate; `f` evaluates the objective with the coordinate set to its argument.
    fn coord(&mut self, x0: f64, analytic: f64, mut f: impl FnMut(f64) -> f64) {
        let f0 = f(x0);
        // (central difference, second difference scaled by 1/h)
        let mut diffs = |h: f64| {
            let (p, m) = (f(x0 + h), f(x0 - h));
            ((p - m) / (2.0 * h), (p - 2.0 * f0 + m) / h)
        };
        let (c1, s1) = diffs(STEP);
        let (c2, s2) = diffs(STEP / 2.0);
        let tol = KINK_TOL * c1.abs().max(1.0);
        if (c1 - c2).abs() > tol || (s1 - 2.0 * s2).abs() > tol {
            self.skipped += 1;
            return;
        }
        self.checked += 1;
        self.max_rel_err = self.max_rel_err.max(rel_err(analytic, c1));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    pub components: Vec<ComponentCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.components.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < TOLERANCE && self.components.iter().all(|c| c.checked > 0)
    }

    /// `component,instances,checked,skipped,max_rel_err`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,instances,checked,skipped,max_rel_err\n");
        for c in &self.components {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.3e}",
                c.name, c.instances, c.checked, c.skipped, c.max_rel_err
            );
        }
        out
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], std: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, normal_vec(rng, n, std)).expect("dims match")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_smooth_l1(rng: &mut ChaCha8Rng, c: &mut ComponentCheck) {
    for _ in 0..8 {
        let x = rng.random_range(-3.0..3.0);
        c.coord(x, smooth_l1(x).1, |v| smooth_l1(v).0);
    }
}

fn check_softmax_ce(rng: &mut ChaCha8Rng, c: &mut ComponentCheck) {
    let logits = [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];
    let label = rng.random_range(0..2);
    let (_, g) = softmax_ce(logits, label);
    for k in 0..2 {
        c.coord(logits[k], g[k], |v| {
            let mut l = logits;
            l[k] = v;
            softmax_ce(l, label).0
        });
    }
}

fn random_loss_instance(
    rng: &mut ChaCha8Rng,
) -> (Vec<[f64; 2]>, Vec<[f64; 4]>, Assignment, RegressionTargets) {
    let n = rng.random_range(4..=64);
    let n_gt = rng.random_range(1..=3);
    let pos_rate = if rng.random_bool(0.2) { 0.0 } else { 0.25 };
    let labels: Vec<Label> = (0..n)
        .map(|_| {
            if rng.random_bool(pos_rate) {
                Label::Positive(rng.random_range(0..n_gt))
            } else {
                Label::Negative
            }
        })
        .collect();
    let assignment = Assignment::from_labels(labels, n_gt).expect("valid gt indices");
    let logits = (0..n)
        .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
        .collect();
    let offsets: Vec<[f64; 4]> = (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0)))
        .collect();
    let entries = assignment
        .positives()
        .map(|(a, _)| (a, std::array::from_fn(|_| rng.random_range(-2.0..2.0))))
        .collect();
    (logits, offsets, assignment, RegressionTargets { entries })
}

fn check_multitask(rng: &mut ChaCha8Rng, c: &mut ComponentCheck) -> Result<()> {
    let (logits, offsets, assignment, targets) = random_loss_instance(rng);
    let lambda = 4.0;
    let eval = |l: &[[f64; 2]], o: &[[f64; 4]]| {
        multitask_loss(&LossInputs {
            logits: l,
            offsets: o,
            assignment: &assignment,
            targets: &targets,
            lambda,
            ohem_ratio: 3,
        })
    };
    let out = eval(&logits, &offsets)?;
    for i in 0..logits.len() {
        for k in 0..2 {
            let mut l = logits.clone();
            c.coord(logits[i][k], out.grad_logits[i][k], |v| {
                l[i][k] = v;
                eval(&l, &offsets).expect("valid instance").total
            });
        }
        for k in 0..4 {
            let mut o = offsets.clone();
            c.coord(offsets[i][k], out.grad_offsets[i][k], |v| {
                o[i][k] = v;
                eval(&logits, &o).expect("valid instance").total
            });
        }
    }
    Ok(())
}

fn random_conv(rng: &mut ChaCha8Rng, name: &str, out_ch: usize, in_ch: usize, k: usize, stride: usize) -> Conv2d<f64> {
    let w = random_tensor(rng, &[out_ch, in_ch, k, k], 0.5);
    let b = normal_vec(rng, out_ch, 0.5);
    Conv2d::new(name, w, b, stride).expect("consistent shapes")
}

fn check_conv(rng: &mut ChaCha8Rng, c: &mut ComponentCheck) -> Result<()> {
    let in_ch = rng.random_range(1..=3);
    let out_ch = rng.random_range(1..=3);
    let k = [1, 3][rng.random_range(0..2)];
    let stride = rng.random_range(1..=2);
    let (h, w) = (rng.random_range(3..=5), rng.random_range(3..=5));
    let conv = random_conv(rng, "conv", out_ch, in_ch, k, stride);
    let x = random_tensor(rng, &[in_ch, h, w], 1.0);
    let (y, cache) = conv.forward(&x)?;
    let r = random_tensor(rng, y.dims(), 1.0);
    let (gx, grads) = conv.backward(&cache, &r, true)?;
    let gx = gx.expect("input gradient requested");
    let objective = |cv: &Conv2d<f64>, x: &Tensor<f64>| dot(cv.forward(x).expect("shapes").0.data(), r.data());

    for i in 0..x.len() {
        let mut xs = x.clone();
        c.coord(x.data()[i], gx.data()[i], |v| {
            xs.data_mut()[i] = v;
            objective(&conv, &xs)
        });
    }
    for i in 0..conv.weight.len() {
        let mut cv = conv.clone();
        c.coord(conv.weight.data()[i], grads.weight[i], |v| {
            cv.weight.data_mut()[i] = v;
            objective(&cv, &x)
        });
    }
    for i in 0..conv.bias.len() {
        let mut cv = conv.clone();
        c.coord(conv.bias[i], grads.bias[i], |v| {
            cv.bias[i] = v;
            objective(&cv, &x)
        });
    }
    Ok(())
}

fn check_fuse(rng: &mut ChaCha8Rng, c: &mut ComponentCheck) -> Result<()> {
    let ch = rng.random_range(1..=3);
    let (h, w) = (rng.random_range(2..=6), rng.random_range(2..=6));
    let cur = random_tensor(rng, &[ch, h, w], 1.0);
    let hi = random_tensor(rng, &[ch, h.div_ceil(2), w.div_ceil(2)], 1.0);
    let r = random_tensor(rng, &[ch, h, w], 1.0);
    let g_hi = fuse_backward_higher(&r, hi.chw())?;
    let objective = |a: &Tensor<f64>, b: &Tensor<f64>| dot(fuse(a, b).expect("shapes").data(), r.data());
    for i in 0..cur.len() {
        let mut t = cur.clone();
        c.coord(cur.data()[i], r.data()[i], |v| {
            t.data_mut()[i] = v;
            objective(&t, &hi)
        });
    }
    for i in 0..hi.len() {
        let mut t = hi.clone();
        c.coord(hi.data()[i], g_hi.data()[i], |v| {
            t.data_mut()[i] = v;
            objective(&cur, &t)
        });
    }
    Ok(())
}

fn random_head(rng: &mut ChaCha8Rng, kind: HeadKind, ch: usize, depth: usize) -> Result<DetectionHead<f64>> {
    let mut head = DetectionHead::zeros("head", kind, ch, depth)?;
    for conv in head.convs_mut() {
        let d = conv.weight.dims().to_vec();
        *conv = random_conv(rng, &conv.name.clone(), d[0], d[1], d[2], 1);
    }
    Ok(head)
}

const HEAD_SAMPLES: usize = 24;

fn check_head(rng: &mut ChaCha8Rng, c: &mut ComponentCheck) -> Result<()> {
    let kind = if rng.random_bool(0.5) { HeadKind::Split } else { HeadKind::Shared };
    let ch = rng.random_range(1..=3);
    let depth = rng.random_range(0..=2);
    let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let head = random_head(rng, kind, ch, depth)?;
    let x = random_tensor(rng, &[ch, h, w], 1.0);
    let (cls, reg, cache) = head.forward(&x)?;
    let rc = random_tensor(rng, cls.dims(), 1.0);
    let rr = random_tensor(rng, reg.dims(), 1.0);
    let (gx, grads) = head.backward(&cache, &rc, &rr)?;
    let objective = |hd: &DetectionHead<f64>, x: &Tensor<f64>| {
        let (a, b, _) = hd.forward(x).expect("shapes");
        dot(a.data(), rc.data()) + dot(b.data(), rr.data())
    };

    for _ in 0..HEAD_SAMPLES / 3 {
        let i = rng.random_range(0..x.len());
        let mut xs = x.clone();
        c.coord(x.data()[i], gx.data()[i], |v| {
            xs.data_mut()[i] = v;
            objective(&head, &xs)
        });
    }
    let n_convs = head.convs().len();
    for _ in 0..HEAD_SAMPLES {
        let ci = rng.random_range(0..n_convs);
        let conv = head.convs()[ci];
        let n_w = conv.weight.len();
        let j = rng.random_range(0..n_w + conv.bias.len());
        let (x0, analytic) = if j < n_w {
            (conv.weight.data()[j], grads[ci].weight[j])
        } else {
            (conv.bias[j - n_w], grads[ci].bias[j - n_w])
        };
        let mut hd = head.clone();
        c.coord(x0, analytic, |v| {
            let cv = &mut hd.convs_mut()[ci];
            if j < n_w {
                cv.weight.data_mut()[j] = v;
            } else {
                cv.bias[j - n_w] = v;
            }
            objective(&hd, &x)
        });
    }
    Ok(())
}

/// Miniature of the toy topology, small enough for per-coordinate differencing.
pub fn tiny_net_config(fusion: bool, head: HeadKind) -> NetConfig {
    let stage = |channels| StageSpec {
        n_convs: 1,
        channels,
        stride: 2,
    };
    NetConfig {
        in_channels: 1,
        stages: vec![stage(2), stage(3), stage(3)],
        taps: vec![1, 2],
        head_channels: 3,
        head_depth: 1,
        head,
        fusion,
        anchors: AnchorConfig::with_strides(&[4, 8], 16, 16),
    }
}

fn check_network(rng: &mut ChaCha8Rng, c: &mut ComponentCheck, seed: u64) -> Result<()> {
    let fusion = rng.random_bool(0.5);
    let kind = if rng.random_bool(0.5) { HeadKind::Split } else { HeadKind::Shared };
    let mut net: Network<f64> = build_network(&tiny_net_config(fusion, kind), seed)?;
    // zero biases put dead units exactly on the rectifier kink
    for conv in net.convs_mut() {
        for b in &mut conv.bias {
            *b = rng.random_range(-0.1..0.1);
        }
    }
    let image = Tensor::from_vec(&[1, 16, 16], (0..256).map(|_| rng.random::<f64>()).collect())?;
    let (raw, trace) = net.forward_trace(&image)?;
    let rl: Vec<[f64; 2]> = (0..raw.len()).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    let ro: Vec<[f64; 4]> = (0..raw.len()).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    let grads = net.backward(&trace, &rl, &ro)?;
    let objective = |n: &Network<f64>| {
        let out = n.forward(&image).expect("shapes");
        let a: f64 = out.logits.iter().zip(&rl).map(|(x, y)| dot(x, y)).sum();
        let b: f64 = out.offsets.iter().zip(&ro).map(|(x, y)| dot(x, y)).sum();
        a + b
    };
    let n_convs = net.convs().len();
    for _ in 0..HEAD_SAMPLES {
        let ci = rng.random_range(0..n_convs);
        let conv = net.convs()[ci];
        let n_w = conv.weight.len();
        let j = rng.random_range(0..n_w + conv.bias.len());
        let (x0, analytic) = if j < n_w {
            (conv.weight.data()[j], grads.0[ci].weight[j])
        } else {
            (conv.bias[j - n_w], grads.0[ci].bias[j - n_w])
        };
        let mut nt = net.clone();
        c.coord(x0, analytic, |v| {
            let cv = &mut nt.convs_mut()[ci];
            if j < n_w {
                cv.weight.data_mut()[j] = v;
            } else {
                cv.bias[j - n_w] = v;
            }
            objective(&nt)
        });
    }
    Ok(())
}

/// Runs `instances` seeded random instances of every component.
pub fn run_grad_checks(seed: u64, instances: usize) -> Result<GradCheckReport> {
    let mut components = Vec::new();
    type Check = fn(&mut ChaCha8Rng, &mut ComponentCheck, u64) -> Result<()>;
    let checks: [(&'static str, Check); 7] = [
        ("smooth_l1", |r, c, _| {
            check_smooth_l1(r, c);
            Ok(())
        }),
        ("softmax_ce", |r, c, _| {
            check_softmax_ce(r, c);
            Ok(())
        }),
        ("multitask_loss", |r, c, _| check_multitask(r, c)),
        ("conv2d", |r, c, _| check_conv(r, c)),
        ("fuse", |r, c, _| check_fuse(r, c)),
        ("detection_head", |r, c, _| check_head(r, c)),
        ("network", check_network),
    ];
    for (k, (name, check)) in checks.iter().enumerate() {
        let mut comp = ComponentCheck::new(name);
        for i in 0..instances {
            let mut rng = stream_rng(seed, k as u64, i as u64);
            check(&mut rng, &mut comp, seed.wrapping_add(i as u64))?;
            comp.instances += 1;
        }
        components.push(comp);
    }
    Ok(GradCheckReport { seed, components })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((rel_err(1e-9, 0.0) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn kink_is_skipped() {
        let mut c = ComponentCheck::new("abs");
        c.coord(1e-6, 1.0, f64::abs);
        assert_eq!((c.checked, c.skipped), (0, 1));
        c.coord(0.0, 0.0, |v| v.max(0.0));
        assert_eq!((c.checked, c.skipped), (0, 2));
        c.coord(0.5, 1.0, f64::abs);
        assert_eq!((c.checked, c.skipped), (1, 2));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut c = ComponentCheck::new("sq");
        c.coord(2.0, 4.4, |v| v * v);
        assert!(c.max_rel_err > 0.05);
    }

    #[test]
    fn small_run_passes() {
        let r = run_grad_checks(3, 6).unwrap();
        assert_eq!(r.components.len(), 7);
        assert!(r.passed(), "{}", r.to_csv());
    }
}

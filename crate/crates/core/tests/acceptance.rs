//! Acceptance criteria 1 to 10, run in order on one thread.
//!
//! Each criterion prints one `PASS` or `FAIL` line; the process exits
//! nonzero if any failed. Oracles here are written independently of the
//! library code they check.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use facedet::assign::{match_baseline, match_two_step, MatchConfig};
use facedet::data::{synth_dataset, Dataset, SynthConfig};
use facedet::decode::{bench_decode, decode_baseline, decode_improved, nms, DecodeConfig, Detection, RawOutput};
use facedet::evalkit::{
    average_precision, count_false_positives, counted_faces, match_detections, pr_curve, DetectionSet,
    GroundTruth, GroundTruthSet, Outcome, PrCurve, PrPoint, ScoredOutcome,
};
use facedet::geometry::{generate_anchors, AnchorConfig, AnchorLayer, BBox};
use facedet::gradcheck::run_grad_checks;
use facedet::toynet::{build_network, evaluate, train, NetConfig, Network, TrainConfig, TrainReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run_cli(out: &Path, args: &[&str]) -> (i32, String) {
    let mut argv = vec!["facedet".to_string(), "--out".into(), out.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    let mut buf = Vec::new();
    let code = facedet::cli::run(argv, &mut buf);
    (code, String::from_utf8_lossy(&buf).into_owned())
}

/// Plain IoU on corner boxes.
fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    inter / union
}

// 1 ------------------------------------------------------------------------

fn anchor_accounting() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t = Instant::now();
    let (code, stdout) = run_cli(dir.path(), &["anchors", "--image", "640x640"]);
    let elapsed = t.elapsed();
    ensure(code == 0, || format!("exit code {code}"))?;
    ensure(stdout.lines().any(|l| l == "total 34125"), || format!("stdout lacks total 34125:\n{stdout}"))?;
    let csv = fs::read_to_string(dir.path().join("anchors.csv")).map_err(|e| e.to_string())?;
    ensure(csv.lines().any(|l| l == "total,,,,,34125"), || "anchors.csv total row".into())?;
    // per-layer counts from the grid formula ceil(640 / s)^2
    let expect: usize = [4u32, 8, 16, 32, 64, 128].iter().map(|s| (640u32.div_ceil(*s) as usize).pow(2)).sum();
    ensure(expect == 34_125, || format!("formula gives {expect}"))?;
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("34125 anchors in {elapsed:.2?}"))
}

// 2 ------------------------------------------------------------------------

fn gradient_correctness() -> Verdict {
    let t = Instant::now();
    let report = run_grad_checks(7, 100).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    for needed in ["smooth_l1", "softmax_ce", "multitask_loss", "conv2d", "fuse", "detection_head"] {
        let c = report.components.iter().find(|c| c.name == needed);
        let c = c.ok_or_else(|| format!("component {needed} missing"))?;
        ensure(c.instances >= 100, || format!("{needed}: {} instances", c.instances))?;
        ensure(c.checked > 0, || format!("{needed}: nothing checked"))?;
        ensure(c.max_rel_err < 1e-5, || format!("{needed}: max rel err {:e}", c.max_rel_err))?;
    }
    ensure(report.passed(), || format!("max rel err {:e}", report.max_rel_err()))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} components, max relative error {:.2e}, {elapsed:.2?}",
        report.components.len(),
        report.max_rel_err()
    ))
}

// 3 ------------------------------------------------------------------------

fn random_scene(rng: &mut ChaCha8Rng) -> (Vec<BBox>, Vec<BBox>) {
    let n_layers = rng.random_range(1..=3);
    let first = [2u32, 4, 8][rng.random_range(0..3)];
    let strides: Vec<u32> = (0..n_layers).map(|i| first << i).collect();
    let w = rng.random_range(16..=96);
    let h = rng.random_range(16..=96);
    let cfg = AnchorConfig {
        layers: strides
            .iter()
            .map(|&s| AnchorLayer {
                stride: s,
                size: s * rng.random_range(2..=4),
            })
            .collect(),
        image_w: w,
        image_h: h,
    };
    let anchors = generate_anchors(&cfg).unwrap().anchors().to_vec();
    let n_gt = rng.random_range(1..=6);
    let gts = (0..n_gt)
        .map(|_| {
            let bw = rng.random_range(1.0..f64::from(w) * 0.6);
            let bh = bw * rng.random_range(0.7..1.4);
            let x = rng.random_range(-4.0..f64::from(w));
            let y = rng.random_range(-4.0..f64::from(h));
            BBox::new(x, y, x + bw, y + bh).unwrap()
        })
        .collect();
    (anchors, gts)
}

fn matching_guarantees() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = MatchConfig::default();
    let mut hard_faces = 0;
    let mut extra_total = 0;
    for scene in 0..1000 {
        let (anchors, gts) = random_scene(&mut rng);
        let two_step = match_two_step(&anchors, &gts, &cfg).map_err(|e| e.to_string())?;
        let base = match_baseline(&anchors, &gts, cfg.step1_iou).map_err(|e| e.to_string())?;
        // (a) no anchor appears under two faces
        let mut owner = vec![None; anchors.len()];
        for (g, list) in two_step.per_gt().iter().enumerate() {
            for &a in list {
                ensure(owner[a].is_none(), || format!("scene {scene}: anchor {a} assigned twice"))?;
                owner[a] = Some(g);
            }
        }
        for (g, gt) in gts.iter().enumerate() {
            let best = anchors.iter().map(|a| oracle_iou(gt, a)).fold(0.0, f64::max);
            let (np, nb) = (two_step.per_gt()[g].len(), base.per_gt()[g].len());
            // (b) coverage of faces that overlap some anchor above 0.1
            ensure(best <= 0.1 || np >= 1, || {
                format!("scene {scene}: face {g} (best IoU {best:.3}) got no anchor")
            })?;
            // (c) at most four beyond the reference matcher
            ensure(np <= nb + 4, || format!("scene {scene}: face {g} has {np} vs {nb}"))?;
            if best < cfg.step1_iou && best > cfg.step2_iou_floor {
                hard_faces += 1;
            }
            extra_total += np.saturating_sub(nb);
        }
        // (d) no extra anchors reduces to the reference matcher
        let zero = MatchConfig {
            max_extra_anchors: 0,
            ..cfg
        };
        let reduced = match_two_step(&anchors, &gts, &zero).map_err(|e| e.to_string())?;
        ensure(reduced == base, || format!("scene {scene}: max_extra_anchors = 0 differs from baseline"))?;
    }
    ensure(hard_faces > 0 && extra_total > 0, || "scenes never exercised the second step".into())?;
    Ok(format!("1000 scenes, {hard_faces} hard faces, {extra_total} extra anchors granted"))
}

// 4 ------------------------------------------------------------------------

fn oracle_face_prob(l: [f64; 2]) -> f64 {
    1.0 / (1.0 + (l[0] - l[1]).exp())
}

fn decode_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked_dets = 0usize;
    for case in 0..1000 {
        let (w, h) = (rng.random_range(16..=64u32), rng.random_range(16..=64u32));
        let cfg_a = AnchorConfig::with_strides(&[4, 8], w, h);
        let anchors = generate_anchors(&cfg_a).unwrap().anchors().to_vec();
        let n = anchors.len();
        // a small palette of logit gaps on a 0.25 grid forces exact score ties
        // and keeps every score well away from 0.1
        let palette: Vec<f64> = (0..6).map(|_| f64::from(rng.random_range(-20i32..=16)) * 0.25).collect();
        let offsets_palette: Vec<[f64; 4]> = (0..4)
            .map(|_| {
                [
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ]
            })
            .collect();
        let mut raw = RawOutput::default();
        for _ in 0..n {
            let cold = rng.random_bool(0.8);
            let gap = if cold { -4.0 } else { palette[rng.random_range(0..palette.len())] };
            let base = rng.random_range(-2i32..=2) as f64;
            raw.logits.push([base, base + gap]);
            raw.offsets.push(offsets_palette[rng.random_range(0..offsets_palette.len())]);
        }
        let report = [0.1, 0.1, 0.3, 0.5, 0.9][case % 5];
        let cfg = DecodeConfig {
            report_threshold: report,
            clip_to_image: case % 2 == 0,
            max_detections: [200, 3][case % 3 / 2],
            ..DecodeConfig::default()
        };
        let b = decode_baseline(&raw, &anchors, (w, h), &cfg).map_err(|e| e.to_string())?;
        let i = decode_improved(&raw, &anchors, (w, h), &cfg).map_err(|e| e.to_string())?;
        ensure(b == i.detections, || format!("case {case}: outputs differ"))?;
        let hot = raw.logits.iter().filter(|l| oracle_face_prob(**l) > 0.1).count();
        ensure(i.decode_ops == hot, || format!("case {case}: {} decode ops, {hot} hot", i.decode_ops))?;
        checked_dets += b.len();
    }
    Ok(format!("1000 outputs identical, {checked_dets} detections compared"))
}

// 5 ------------------------------------------------------------------------

/// The unique subset `S` such that every member is unsuppressed by earlier
/// members and every non-member is suppressed by an earlier member, found by
/// enumerating all subsets.
fn oracle_nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let n = dets.len();
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let suppresses = |i: usize, j: usize| oracle_iou(&dets[rank[i]].bbox, &dets[rank[j]].bbox) > threshold;
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let inside = |k: usize| mask & (1 << k) != 0;
        let consistent = (0..n).all(|j| {
            let hit = (0..j).any(|i| inside(i) && suppresses(i, j));
            inside(j) != hit
        });
        if consistent {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "suppression fixpoint must be unique");
    (0..n).filter(|&k| found[0] & (1 << k) != 0).map(|k| dets[rank[k]]).collect()
}

fn nms_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut kept = 0usize;
    for case in 0..10_000 {
        let n = rng.random_range(0..=8);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let x = f64::from(rng.random_range(0..12u32));
                let y = f64::from(rng.random_range(0..12u32));
                let w = f64::from(rng.random_range(1..8u32));
                let h = f64::from(rng.random_range(1..8u32));
                Detection {
                    bbox: BBox::new(x, y, x + w, y + h).unwrap(),
                    score: f64::from(rng.random_range(1..6u32)) / 6.0,
                }
            })
            .collect();
        let threshold = [0.3, 0.5, 0.0, 0.7][case % 4];
        let got = nms(&dets, threshold);
        let want = oracle_nms(&dets, threshold);
        ensure(got == want, || format!("case {case}: {got:?} vs {want:?}"))?;
        kept += got.len();
    }
    Ok(format!("10000 instances agree ({kept} boxes kept)"))
}

// 6 ------------------------------------------------------------------------

fn decode_benchmark() -> Verdict {
    let r = bench_decode(34_125, 0.01, 100, 6).map_err(|e| e.to_string())?;
    ensure(r.agreed, || "decode paths disagreed".into())?;
    ensure(r.improved.decode_ops == 342, || format!("{} decode ops", r.improved.decode_ops))?;
    ensure(r.time_ratio <= 0.5, || {
        format!(
            "ratio {:.3} (baseline {:.0} ns, improved {:.0} ns)",
            r.time_ratio, r.baseline.mean_ns, r.improved.mean_ns
        )
    })?;
    Ok(format!(
        "ratio {:.3} over {} repeats (baseline {:.0} ns, improved {:.0} ns)",
        r.time_ratio, r.repeats, r.baseline.mean_ns, r.improved.mean_ns
    ))
}

// 7 and 8 ------------------------------------------------------------------

struct ToyRun {
    net: Network<f32>,
    report: TrainReport,
    elapsed: Duration,
}

fn toy_data() -> &'static (Dataset, Dataset) {
    static DATA: OnceLock<(Dataset, Dataset)> = OnceLock::new();
    DATA.get_or_init(|| synth_dataset(&SynthConfig::default(), 600, 42).unwrap().split(500))
}

fn toy_run(baseline: bool) -> Result<ToyRun, String> {
    let (train_set, _) = toy_data();
    let (net_cfg, tc) = if baseline {
        (NetConfig::default().baseline(), TrainConfig::default().baseline())
    } else {
        (NetConfig::default(), TrainConfig::default())
    };
    let mut net = build_network::<f32>(&net_cfg, 42).map_err(|e| e.to_string())?;
    let t = Instant::now();
    let report = train(&mut net, train_set, &tc).map_err(|e| e.to_string())?;
    Ok(ToyRun {
        net,
        report,
        elapsed: t.elapsed(),
    })
}

fn fused_run() -> &'static Result<ToyRun, String> {
    static RUN: OnceLock<Result<ToyRun, String>> = OnceLock::new();
    RUN.get_or_init(|| toy_run(false))
}

fn overfit_single_sample() -> Result<f64, String> {
    let one = synth_dataset(&SynthConfig::default(), 1, 42).map_err(|e| e.to_string())?;
    let mut net = build_network::<f32>(&NetConfig::default(), 42).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        epochs: 200,
        batch_size: 1,
        aug: None,
        plateau_patience: 200,
        ..TrainConfig::default()
    };
    let r = train(&mut net, &one, &tc).map_err(|e| e.to_string())?;
    Ok(r.epochs.last().map(|e| e.mean_loss).unwrap_or(f64::NAN))
}

fn toy_training() -> Verdict {
    let overfit = overfit_single_sample()?;
    ensure(overfit < 0.05, || format!("single-sample overfit loss {overfit:.4} not below 0.05"))?;
    let run = fused_run().as_ref().map_err(|e| e.clone())?;
    let tc = TrainConfig::default();
    ensure(tc.epochs <= 30 && tc.jobs == 1, || "default config exceeds 30 epochs or is threaded".into())?;
    let losses: Vec<f64> = run.report.epochs.iter().map(|e| e.mean_loss).collect();
    ensure(losses.len() >= 5, || "fewer than 5 epochs".into())?;
    ensure(losses[..5].windows(2).all(|w| w[1] < w[0]), || format!("first 5 losses {:?}", &losses[..5]))?;
    let ev = evaluate(&run.net, &toy_data().1, &DecodeConfig::default(), 0.5, 1).map_err(|e| e.to_string())?;
    ensure(run.elapsed < Duration::from_secs(600), || format!("training took {:?}", run.elapsed))?;
    ensure(ev.ap >= 0.90, || format!("validation AP {:.4}", ev.ap))?;
    Ok(format!(
        "AP {:.4} after {} epochs in {:.1?}; overfit loss {overfit:.4}; first losses {:.4} > {:.4} > {:.4} > {:.4} > {:.4}",
        ev.ap,
        losses.len(),
        run.elapsed,
        losses[0],
        losses[1],
        losses[2],
        losses[3],
        losses[4]
    ))
}

fn high_score_fps(net: &Network<f32>) -> Result<usize, String> {
    let val = &toy_data().1;
    let dets = facedet::toynet::detect_dataset(net, val, &DecodeConfig::default(), 1).map_err(|e| e.to_string())?;
    let hist = count_false_positives(&dets, &val.ground_truth(), 0.5, &[0.8, 1.0]).map_err(|e| e.to_string())?;
    Ok(hist[0])
}

fn false_positive_direction() -> Verdict {
    let fused = fused_run().as_ref().map_err(|e| e.clone())?;
    let base = toy_run(true)?;
    let fp_fused = high_score_fps(&fused.net)?;
    let fp_base = high_score_fps(&base.net)?;
    let detail = format!("false positives scoring >= 0.8: fused {fp_fused}, baseline {fp_base}");
    ensure(fp_fused < fp_base, || detail.clone())?;
    Ok(detail)
}

// 9 ------------------------------------------------------------------------

/// Greedy evaluation written as repeated maximum selection.
fn oracle_flags(dets: &DetectionSet, gts: &GroundTruthSet, thr: f64) -> Vec<(String, usize, f64, Outcome)> {
    let mut pending: Vec<(String, usize, f64)> = dets
        .iter()
        .flat_map(|(k, v)| v.iter().enumerate().map(move |(i, d)| (k.clone(), i, d.score)))
        .collect();
    let mut used: BTreeMap<String, Vec<bool>> = gts.iter().map(|(k, v)| (k.clone(), vec![false; v.len()])).collect();
    let mut out = Vec::new();
    while !pending.is_empty() {
        let mut pick = 0;
        for j in 1..pending.len() {
            let (a, b) = (&pending[j], &pending[pick]);
            let better = a.2 > b.2 || (a.2 == b.2 && (a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)));
            if better {
                pick = j;
            }
        }
        let (name, i, score) = pending.remove(pick);
        let det = dets[&name][i].bbox;
        let faces = &gts[&name];
        let mut best_g = None;
        let mut best_v = -1.0;
        for (g, f) in faces.iter().enumerate() {
            let v = oracle_iou(&det, &f.bbox);
            if !f.ignore && !used[&name][g] && v > best_v {
                best_v = v;
                best_g = Some(g);
            }
        }
        let outcome = if let Some(g) = best_g.filter(|_| best_v >= thr) {
            used.get_mut(&name).unwrap()[g] = true;
            Outcome::TruePositive
        } else if faces.iter().any(|f| f.ignore && oracle_iou(&det, &f.bbox) >= thr) {
            Outcome::Ignored
        } else {
            Outcome::FalsePositive
        };
        out.push((name, i, score, outcome));
    }
    out
}

/// AP as the sum over ranks of recall gain times the best precision at any
/// rank at or beyond it, accumulated from the last rank backwards.
fn oracle_ap(flags: &[(String, usize, f64, Outcome)], n_gt: usize) -> (Vec<(f64, f64)>, f64) {
    let mut pts = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for f in flags {
        match f.3 {
            Outcome::TruePositive => tp += 1,
            Outcome::FalsePositive => fp += 1,
            Outcome::Ignored => continue,
        }
        pts.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut ap = 0.0;
    for k in (0..pts.len()).rev() {
        let best = pts[k..].iter().map(|p| p.1).fold(0.0, f64::max);
        let gain = pts[k].0 - if k == 0 { 0.0 } else { pts[k - 1].0 };
        ap += gain * best;
    }
    (pts, ap)
}

fn fixture_flags(v: &[Outcome]) -> Vec<ScoredOutcome> {
    v.iter()
        .enumerate()
        .map(|(i, &o)| ScoredOutcome {
            image: "img".into(),
            det_index: i,
            score: 1.0 - i as f64 * 0.1,
            outcome: o,
        })
        .collect()
}

fn evaluation_oracle() -> Verdict {
    use Outcome::{FalsePositive as FP, TruePositive as TP};
    // hand-computed fixtures
    let ap = |v: &[Outcome], n| average_precision(&pr_curve(&fixture_flags(v), n).unwrap());
    ensure(ap(&[TP, TP, TP], 3) == 1.0, || "fixture TP,TP,TP".into())?;
    ensure(ap(&[TP, FP], 1) == 1.0, || "fixture TP,FP".into())?;
    ensure(ap(&[FP, TP], 1) == 0.5, || "fixture FP,TP".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut total_flags = 0;
    for scene in 0..1000 {
        let n_img = rng.random_range(1..=3);
        let mut gts = GroundTruthSet::new();
        let mut dets = DetectionSet::new();
        let lattice_box = |rng: &mut ChaCha8Rng| {
            let x = f64::from(rng.random_range(0..6u32)) * 2.0;
            let y = f64::from(rng.random_range(0..6u32)) * 2.0;
            let s = f64::from(rng.random_range(2..7u32));
            BBox::new(x, y, x + s, y + s).unwrap()
        };
        for im in 0..n_img {
            let name = format!("img{im}");
            let faces = (0..rng.random_range(0..=3))
                .map(|_| GroundTruth {
                    bbox: lattice_box(&mut rng),
                    ignore: rng.random_bool(0.15),
                })
                .collect();
            let ds = (0..rng.random_range(0..=4))
                .map(|_| Detection {
                    bbox: lattice_box(&mut rng),
                    score: f64::from(rng.random_range(1..5u32)) / 4.0,
                })
                .collect();
            gts.insert(name.clone(), faces);
            dets.insert(name, ds);
        }
        let thr = [0.5, 0.3][scene % 2];
        let flags = match_detections(&dets, &gts, thr).map_err(|e| e.to_string())?;
        let want = oracle_flags(&dets, &gts, thr);
        let got: Vec<_> = flags.iter().map(|f| (f.image.clone(), f.det_index, f.score, f.outcome)).collect();
        ensure(got == want, || format!("scene {scene}: flags differ"))?;
        total_flags += got.len();
        let n_gt = counted_faces(&gts);
        if n_gt == 0 {
            ensure(pr_curve(&flags, 0).is_err(), || format!("scene {scene}: empty ground truth accepted"))?;
            continue;
        }
        let curve = pr_curve(&flags, n_gt).map_err(|e| e.to_string())?;
        let (pts, want_ap) = oracle_ap(&want, n_gt);
        let got_pts: Vec<(f64, f64)> = curve.points.iter().map(|p: &PrPoint| (p.recall, p.precision)).collect();
        ensure(got_pts == pts, || format!("scene {scene}: PR curve differs"))?;
        let got_ap = average_precision(&curve);
        ensure(got_ap == want_ap, || format!("scene {scene}: AP {got_ap} vs {want_ap}"))?;
    }
    ensure(average_precision(&PrCurve::default()) == 0.0, || "empty curve AP".into())?;
    Ok(format!("3 fixtures exact; 1000 scenes agree ({total_flags} detections)"))
}

// 10 -----------------------------------------------------------------------

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let small: &[&str] = &[
        "--set",
        "data.train=16",
        "--set",
        "data.val=6",
        "--set",
        "train.epochs=2",
        "--set",
        "train.batch_size=4",
        "--seed",
        "11",
    ];
    let train_dir = dir.path().join("weights");
    let (code, _) = run_cli(&train_dir, &[small, &["train"]].concat());
    ensure(code == 0, || "seed training run failed".into())?;
    let w = train_dir.join("weights.bin").display().to_string();
    let synth_dir = dir.path().join("synth");
    ensure(run_cli(&synth_dir, &[small, &["synth"]].concat()).0 == 0, || "synth failed".into())?;
    let ann = synth_dir.join("annotations.txt").display().to_string();
    let det_dir = dir.path().join("dets");
    ensure(run_cli(&det_dir, &[small, &["detect", "--weights", &w]].concat()).0 == 0, || "detect failed".into())?;
    let det = det_dir.join("detections.txt").display().to_string();

    let runs: Vec<Vec<&str>> = vec![
        vec!["anchors", "--image", "640x480", "--dump"],
        vec!["rf"],
        vec!["match-demo", "--faces", "12"],
        vec!["grad-check", "--instances", "3"],
        vec!["train"],
        vec!["detect", "--weights", &w],
        vec!["eval", "--weights", &w],
        vec!["fp-hist", "--weights", &w],
        vec!["fp-hist", "--detections", &det, "--annotations", &ann],
        vec!["bench-decode", "--anchors", "3000", "--repeats", "10"],
        vec!["synth", "--count", "5"],
    ];
    let mut files = 0;
    for (i, args) in runs.iter().enumerate() {
        let argv = [small, args.as_slice()].concat();
        let a = dir.path().join(format!("run{i}a"));
        let b = dir.path().join(format!("run{i}b"));
        let (ca, _) = run_cli(&a, &argv);
        let (cb, _) = run_cli(&b, &argv);
        ensure(ca == 0 && cb == 0, || format!("{args:?} exited {ca}/{cb}"))?;
        let (mut ta, mut tb) = (tree(&a), tree(&b));
        // timing lives only in the benchmark CSV
        ta.remove(Path::new("bench_decode.csv"));
        tb.remove(Path::new("bench_decode.csv"));
        ensure(!ta.is_empty(), || format!("{args:?} wrote nothing"))?;
        ensure(ta.keys().eq(tb.keys()), || format!("{args:?}: different file sets"))?;
        for (k, v) in &ta {
            ensure(&tb[k] == v, || format!("{args:?}: {} differs", k.display()))?;
        }
        files += ta.len();
    }
    Ok(format!("{} subcommand runs repeated, {files} artifacts byte-identical", runs.len()))
}

// --------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 10] = [
        ("anchor accounting", anchor_accounting),
        ("gradient correctness", gradient_correctness),
        ("matching guarantees", matching_guarantees),
        ("decode equivalence", decode_equivalence),
        ("NMS oracle", nms_oracle),
        ("decode benchmark", decode_benchmark),
        ("toy training", toy_training),
        ("false positives at high scores", false_positive_direction),
        ("evaluation oracle", evaluation_oracle),
        ("determinism", determinism),
    ];
    // `cargo test` passes filter arguments; honour a numeric or name filter
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.iter().any(|p| p == &id.to_string() || name.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id:>2} PASS  {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

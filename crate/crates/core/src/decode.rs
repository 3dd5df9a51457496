//! Turning raw head outputs into scored boxes.
//!
//! [`decode_baseline`] regresses every anchor and filters afterwards.
//! [`decode_improved`] scores every anchor first and regresses only those whose
//! face probability exceeds `score_threshold`, which is where nearly all of the
//! decode work goes away on a typical image. Both paths feed the same
//! candidate list (ascending anchor order) into the same NMS, so their outputs
//! are identical whenever `report_threshold >= score_threshold`.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::assign::decode_offset;
use crate::error::{Error, Result};
use crate::geometry::{generate_anchors, AnchorConfig, BBox};

/// Per-anchor head outputs in anchor-grid order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawOutput {
    /// `(background, face)` logits.
    pub logits: Vec<[f64; 2]>,
    pub offsets: Vec<[f64; 4]>,
}

impl RawOutput {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    /// Anchors at or below this face probability are never regressed.
    pub score_threshold: f64,
    pub nms_threshold: f64,
    /// Detections must score strictly above this to be reported.
    pub report_threshold: f64,
    pub max_detections: usize,
    pub clip_to_image: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            score_threshold: 0.1,
            nms_threshold: 0.3,
            report_threshold: 0.1,
            max_detections: 200,
            clip_to_image: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.score_threshold
            && self.score_threshold <= self.report_threshold
            && self.report_threshold < 1.0)
        {
            return Err(Error::Config(format!(
                "need 0 < score_threshold ({}) <= report_threshold ({}) < 1",
                self.score_threshold, self.report_threshold
            )));
        }
        if !(0.0 < self.nms_threshold && self.nms_threshold < 1.0) {
            return Err(Error::Config(format!(
                "nms_threshold must lie in (0, 1), got {}",
                self.nms_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

/// Softmax probability of the face class.
#[inline]
pub fn face_score(logits: [f64; 2]) -> f64 {
    let d = logits[0] - logits[1];
    if d >= 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    anchor: usize,
    det: Detection,
}

/// Greedy suppression over candidates already in ascending anchor order.
fn nms_candidates(mut cands: Vec<Candidate>, threshold: f64) -> Vec<Candidate> {
    cands.sort_by(|a, b| b.det.score.total_cmp(&a.det.score).then(a.anchor.cmp(&b.anchor)));
    let mut suppressed = vec![false; cands.len()];
    let mut kept = Vec::new();
    for i in 0..cands.len() {
        if suppressed[i] {
            continue;
        }
        let keep = cands[i];
        kept.push(keep);
        for (j, s) in suppressed.iter_mut().enumerate().skip(i + 1) {
            if !*s && keep.det.bbox.iou_unchecked(&cands[j].det.bbox) > threshold {
                *s = true;
            }
        }
    }
    kept
}

/// Greedy non-maximum suppression: highest score first (ties to the lower
/// input index), dropping every box whose overlap with a kept box exceeds
/// `threshold`.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let cands = dets
        .iter()
        .enumerate()
        .filter(|(_, d)| d.bbox.is_valid())
        .map(|(anchor, det)| Candidate { anchor, det: *det })
        .collect();
    nms_candidates(cands, threshold)
        .into_iter()
        .map(|c| c.det)
        .collect()
}

fn check_lengths(raw: &RawOutput, anchors: &[BBox]) -> Result<()> {
    if raw.logits.len() != anchors.len() || raw.offsets.len() != anchors.len() {
        return Err(Error::shape(
            "decode",
            format!(
                "{} logits / {} offsets for {} anchors",
                raw.logits.len(),
                raw.offsets.len(),
                anchors.len()
            ),
        ));
    }
    Ok(())
}

#[inline]
fn finish_candidate(
    anchor: usize,
    bbox: BBox,
    score: f64,
    image: (u32, u32),
    cfg: &DecodeConfig,
) -> Option<Candidate> {
    let bbox = if cfg.clip_to_image {
        bbox.clip(f64::from(image.0), f64::from(image.1))?
    } else {
        bbox
    };
    bbox.is_valid().then_some(Candidate {
        anchor,
        det: Detection { bbox, score },
    })
}

fn finish(cands: Vec<Candidate>, cfg: &DecodeConfig) -> Vec<Detection> {
    let mut kept = nms_candidates(cands, cfg.nms_threshold);
    kept.truncate(cfg.max_detections);
    kept.into_iter().map(|c| c.det).collect()
}

/// Regress every anchor, then filter, clip, suppress and truncate.
pub fn decode_baseline(
    raw: &RawOutput,
    anchors: &[BBox],
    image: (u32, u32),
    cfg: &DecodeConfig,
) -> Result<Vec<Detection>> {
    check_lengths(raw, anchors)?;
    cfg.validate()?;
    let scores: Vec<f64> = raw.logits.iter().map(|l| face_score(*l)).collect();
    let boxes: Vec<BBox> = anchors
        .iter()
        .zip(&raw.offsets)
        .map(|(a, t)| decode_offset(a, *t))
        .collect();
    let cands = boxes
        .into_iter()
        .zip(scores)
        .enumerate()
        .filter(|(_, (_, s))| *s > cfg.report_threshold)
        .filter_map(|(i, (b, s))| finish_candidate(i, b, s, image, cfg))
        .collect();
    Ok(finish(cands, cfg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub detections: Vec<Detection>,
    /// Number of anchors whose offsets were turned into boxes.
    pub decode_ops: usize,
}

/// Score first, regress only anchors above `score_threshold`.
pub fn decode_improved(
    raw: &RawOutput,
    anchors: &[BBox],
    image: (u32, u32),
    cfg: &DecodeConfig,
) -> Result<Decoded> {
    check_lengths(raw, anchors)?;
    cfg.validate()?;
    let hot: Vec<(usize, f64)> = raw
        .logits
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            let s = face_score(*l);
            (s > cfg.score_threshold).then_some((i, s))
        })
        .collect();
    let decode_ops = hot.len();
    let cands = hot
        .into_iter()
        .map(|(i, s)| (i, decode_offset(&anchors[i], raw.offsets[i]), s))
        .filter(|(_, _, s)| *s > cfg.report_threshold)
        .filter_map(|(i, b, s)| finish_candidate(i, b, s, image, cfg))
        .collect();
    Ok(Decoded {
        detections: finish(cands, cfg),
        decode_ops,
    })
}

/// Decodes independent images, optionally on `jobs` worker threads; results
/// come back in input order and match the serial path exactly.
pub fn decode_many(
    raws: &[RawOutput],
    anchors: &[BBox],
    image: (u32, u32),
    cfg: &DecodeConfig,
    jobs: usize,
) -> Result<Vec<Decoded>> {
    if jobs <= 1 {
        return raws
            .iter()
            .map(|r| decode_improved(r, anchors, image, cfg))
            .collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        raws.par_iter()
            .map(|r| decode_improved(r, anchors, image, cfg))
            .collect()
    })
}

/// Formats like C's `%g`: six significant digits, trailing zeros trimmed.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    // exponent after rounding to six significant digits
    let sci = format!("{v:.5e}");
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        trim_zeros(&format!("{v:.decimals$}"))
    } else {
        format!(
            "{}e{}{:02}",
            trim_zeros(mant),
            if exp < 0 { '-' } else { '+' },
            exp.abs()
        )
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// Per-image detections in submission text form: name line, count line, then
/// `x y w h score` per detection.
pub fn write_detections<'a>(images: impl IntoIterator<Item = (&'a str, &'a [Detection])>) -> String {
    let mut out = String::new();
    for (name, dets) in images {
        let _ = writeln!(out, "{name}");
        let _ = writeln!(out, "{}", dets.len());
        for d in dets {
            let b = &d.bbox;
            let _ = writeln!(
                out,
                "{} {} {} {} {}",
                format_sig6(b.x1),
                format_sig6(b.y1),
                format_sig6(b.width()),
                format_sig6(b.height()),
                format_sig6(d.score)
            );
        }
    }
    out
}

pub fn parse_detections(text: &str) -> Result<Vec<(String, Vec<Detection>)>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut out = Vec::new();
    while let Some((_, name)) = lines.next() {
        let (ln, count) = lines.next().ok_or(Error::Parse {
            line: 0,
            msg: format!("missing count line after {name:?}"),
        })?;
        let count: usize = count.trim().parse().map_err(|e| Error::Parse {
            line: ln + 1,
            msg: format!("bad detection count: {e}"),
        })?;
        let mut dets = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, line) = lines.next().ok_or(Error::Parse {
                line: 0,
                msg: format!("truncated detections for {name:?}"),
            })?;
            let v: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: ln + 1,
                    msg: format!("{e}"),
                })?;
            if v.len() != 5 {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: format!("expected 5 fields, got {}", v.len()),
                });
            }
            let bbox = BBox::from_xywh(v[0], v[1], v[2], v[3]).map_err(|e| Error::Parse {
                line: ln + 1,
                msg: e.to_string(),
            })?;
            dets.push(Detection { bbox, score: v[4] });
        }
        out.push((name.trim().to_string(), dets));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathTiming {
    pub mean_ns: f64,
    pub stddev_ns: f64,
    pub decode_ops: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub anchors: usize,
    pub hot_fraction: f64,
    pub repeats: usize,
    pub baseline: PathTiming,
    pub improved: PathTiming,
    /// `improved.mean / baseline.mean`
    pub time_ratio: f64,
    /// Both paths produced identical detections on every repeat.
    pub agreed: bool,
}

impl BenchReport {
    pub const HEADER: &'static str = "# CPU-only measurement of the offset-decode workload; \
device-to-host transfer savings are not modelled.";

    /// CSV: `path,anchors,hot_fraction,mean_ns,stddev_ns,decode_ops`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\npath,anchors,hot_fraction,mean_ns,stddev_ns,decode_ops\n", Self::HEADER);
        for (name, t) in [("baseline", &self.baseline), ("improved", &self.improved)] {
            let _ = writeln!(
                out,
                "{name},{},{},{:.0},{:.0},{}",
                self.anchors, self.hot_fraction, t.mean_ns, t.stddev_ns, t.decode_ops
            );
        }
        out
    }
}

/// First `n` anchors of the smallest square default tiling holding at least `n`.
pub fn bench_anchors(n: usize) -> Result<(Vec<BBox>, (u32, u32))> {
    let mut side = 640u32;
    loop {
        let cfg = AnchorConfig {
            image_w: side,
            image_h: side,
            ..AnchorConfig::default()
        };
        if cfg.anchor_count() >= n {
            let grid = generate_anchors(&cfg)?;
            return Ok((grid.anchors()[..n].to_vec(), (side, side)));
        }
        side *= 2;
    }
}

/// Seeded head output where exactly `ceil(hot_fraction * n)` anchors score above 0.1.
pub fn synthetic_raw(n: usize, hot_fraction: f64, rng: &mut impl Rng) -> RawOutput {
    let n_hot = ((hot_fraction * n as f64).ceil() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut hot = vec![false; n];
    for &i in &idx[..n_hot] {
        hot[i] = true;
    }
    let logit = |p: f64| [0.0, (p / (1.0 - p)).ln()];
    let mut raw = RawOutput {
        logits: Vec::with_capacity(n),
        offsets: Vec::with_capacity(n),
    };
    for &h in &hot {
        let p = if h {
            rng.random_range(0.15..0.99)
        } else {
            rng.random_range(0.001..0.09)
        };
        raw.logits.push(logit(p));
        raw.offsets.push([
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        ]);
    }
    raw
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Times both decode paths on seeded synthetic outputs (fresh output per repeat,
/// paths alternating, a few warm-up rounds first).
pub fn bench_decode(anchor_count: usize, hot_fraction: f64, repeats: usize, seed: u64) -> Result<BenchReport> {
    if repeats < 10 {
        return Err(Error::Config(format!("repeats must be >= 10, got {repeats}")));
    }
    if !(0.0..=1.0).contains(&hot_fraction) {
        return Err(Error::Config(format!("hot fraction {hot_fraction} outside [0, 1]")));
    }
    let (anchors, image) = bench_anchors(anchor_count)?;
    let cfg = DecodeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let warmup = 3;
    let mut t_base = Vec::with_capacity(repeats);
    let mut t_impr = Vec::with_capacity(repeats);
    let mut agreed = true;
    let mut ops_base = 0;
    let mut ops_impr = 0;
    for r in 0..warmup + repeats {
        let raw = synthetic_raw(anchor_count, hot_fraction, &mut rng);
        let t0 = Instant::now();
        let base = std::hint::black_box(decode_baseline(&raw, &anchors, image, &cfg)?);
        let t1 = Instant::now();
        let impr = std::hint::black_box(decode_improved(&raw, &anchors, image, &cfg)?);
        let t2 = Instant::now();
        agreed &= base == impr.detections;
        ops_base = anchor_count;
        ops_impr = impr.decode_ops;
        if r >= warmup {
            t_base.push((t1 - t0).as_nanos() as f64);
            t_impr.push((t2 - t1).as_nanos() as f64);
        }
    }
    let (bm, bs) = mean_std(&t_base);
    let (im, is) = mean_std(&t_impr);
    Ok(BenchReport {
        anchors: anchor_count,
        hot_fraction,
        repeats,
        baseline: PathTiming {
            mean_ns: bm,
            stddev_ns: bs,
            decode_ops: ops_base,
        },
        improved: PathTiming {
            mean_ns: im,
            stddev_ns: is,
            decode_ops: ops_impr,
        },
        time_ratio: im / bm,
        agreed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x1, y1, x2, y2).unwrap(),
            score,
        }
    }

    #[test]
    fn nms_single_and_duplicate() {
        let a = det(0., 0., 10., 10., 0.9);
        assert_eq!(nms(&[a], 0.3), vec![a]);
        let b = det(0., 0., 10., 10., 0.8);
        assert_eq!(nms(&[b, a], 0.3), vec![a]);
    }

    #[test]
    fn nms_tie_prefers_lower_index() {
        let a = det(0., 0., 10., 10., 0.5);
        let b = det(1., 0., 11., 10., 0.5);
        assert_eq!(nms(&[a, b], 0.3), vec![a]);
        assert_eq!(nms(&[b, a], 0.3), vec![b]);
    }

    #[test]
    fn face_score_values() {
        assert_eq!(face_score([0.0, 0.0]), 0.5);
        assert!((face_score([0.0, 10.0]) - 0.999_954_602_131_297_6).abs() < 1e-15);
        assert!(face_score([800.0, -800.0]) >= 0.0);
    }

    fn one_anchor() -> Vec<BBox> {
        vec![BBox::new(10.0, 10.0, 26.0, 26.0).unwrap()]
    }

    #[test]
    fn baseline_single_confident_anchor() {
        let raw = RawOutput {
            logits: vec![[0.0, 10.0]],
            offsets: vec![[0.0; 4]],
        };
        let dets = decode_baseline(&raw, &one_anchor(), (64, 64), &DecodeConfig::default()).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].bbox, one_anchor()[0]);
        assert!((dets[0].score - 0.99995).abs() < 1e-5);
    }

    #[test]
    fn zero_net_output_filtered_by_report_threshold() {
        let anchors = bench_anchors(50).unwrap().0;
        let raw = RawOutput {
            logits: vec![[0.0; 2]; 50],
            offsets: vec![[0.0; 4]; 50],
        };
        let cfg = DecodeConfig {
            report_threshold: 0.6,
            ..DecodeConfig::default()
        };
        assert!(decode_baseline(&raw, &anchors, (640, 640), &cfg).unwrap().is_empty());
    }

    #[test]
    fn improved_counts_hot_anchors() {
        let anchors = bench_anchors(3).unwrap().0;
        let logit = |p: f64| [0.0, (p / (1.0 - p)).ln()];
        let raw = RawOutput {
            logits: vec![logit(0.05), logit(0.2), logit(0.95)],
            offsets: vec![[0.0; 4]; 3],
        };
        let d = decode_improved(&raw, &anchors, (640, 640), &DecodeConfig::default()).unwrap();
        assert_eq!(d.decode_ops, 2);
    }

    #[test]
    fn inverted_thresholds_rejected() {
        let cfg = DecodeConfig {
            score_threshold: 0.5,
            report_threshold: 0.2,
            ..DecodeConfig::default()
        };
        let r = decode_improved(&RawOutput::default(), &[], (1, 1), &cfg);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn length_mismatch_rejected() {
        let raw = RawOutput {
            logits: vec![[0.0; 2]; 2],
            offsets: vec![[0.0; 4]; 2],
        };
        assert!(decode_baseline(&raw, &one_anchor(), (64, 64), &DecodeConfig::default()).is_err());
    }

    #[test]
    fn half_percent_fixture() {
        let (anchors, image) = bench_anchors(34_125).unwrap();
        assert_eq!(image, (640, 640));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = synthetic_raw(34_125, 0.005, &mut rng);
        let d = decode_improved(&raw, &anchors, image, &DecodeConfig::default()).unwrap();
        assert_eq!(d.decode_ops, 171);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(10.0), "10");
        assert_eq!(format_sig6(0.999954602), "0.999955");
        assert_eq!(format_sig6(123.456789), "123.457");
        assert_eq!(format_sig6(-2.5), "-2.5");
        assert_eq!(format_sig6(9.9999996), "10");
        assert_eq!(format_sig6(1234567.0), "1.23457e+06");
        assert_eq!(format_sig6(0.0000123456), "1.23456e-05");
    }

    #[test]
    fn detection_text_roundtrip() {
        let dets = vec![det(1.5, 2.0, 11.5, 22.0, 0.75)];
        let text = write_detections([("img_1", dets.as_slice())]);
        assert_eq!(text, "img_1\n1\n1.5 2 10 20 0.75\n");
        let back = parse_detections(&text).unwrap();
        assert_eq!(back, vec![("img_1".to_string(), dets)]);
    }

    #[test]
    fn parallel_decode_matches_serial() {
        let (anchors, image) = bench_anchors(2000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raws: Vec<RawOutput> = (0..6).map(|_| synthetic_raw(2000, 0.05, &mut rng)).collect();
        let cfg = DecodeConfig::default();
        let serial = decode_many(&raws, &anchors, image, &cfg, 1).unwrap();
        let par = decode_many(&raws, &anchors, image, &cfg, 3).unwrap();
        assert_eq!(serial, par);
    }

    #[test]
    fn bench_degenerate_fractions() {
        let r = bench_decode(500, 0.0, 10, 1).unwrap();
        assert_eq!(r.improved.decode_ops, 0);
        assert!(r.agreed);
        let r = bench_decode(500, 1.0, 10, 1).unwrap();
        assert_eq!(r.improved.decode_ops, r.baseline.decode_ops);
        assert!(bench_decode(500, 0.5, 5, 1).is_err());
    }
}

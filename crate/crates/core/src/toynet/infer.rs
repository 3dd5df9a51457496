//! Running a network over images and scoring the result.

use rayon::prelude::*;

use super::network::Network;
use super::tensor::{Scalar, Tensor};
use crate::data::Dataset;
use crate::decode::{decode_improved, DecodeConfig, Detection};
use crate::error::{Error, Result};
use crate::evalkit::{average_precision, counted_faces, match_detections, pr_curve, DetectionSet, PrCurve, ScoredOutcome};
use crate::geometry::{generate_anchors, AnchorConfig};

/// Forward pass plus improved-path decode; anchors follow the image size.
pub fn detect_image<T: Scalar>(net: &Network<T>, image: &Tensor<T>, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    let (_, h, w) = image.chw();
    let anchors = AnchorConfig {
        image_w: w as u32,
        image_h: h as u32,
        ..net.config().anchors.clone()
    };
    let grid = generate_anchors(&anchors)?;
    let raw = net.forward(image)?;
    Ok(decode_improved(&raw, grid.anchors(), (w as u32, h as u32), cfg)?.detections)
}

/// Detections for every image, keyed by image name; `jobs` threads, same
/// result as serial.
pub fn detect_dataset(net: &Network<f32>, data: &Dataset, cfg: &DecodeConfig, jobs: usize) -> Result<DetectionSet> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let dets: Vec<Result<Vec<Detection>>> =
        pool.install(|| data.images.par_iter().map(|img| detect_image(net, img, cfg)).collect());
    data.names.iter().cloned().zip(dets).map(|(n, d)| Ok((n, d?))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub ap: f64,
    pub curve: PrCurve,
    pub flags: Vec<ScoredOutcome>,
    pub detections: DetectionSet,
}

pub fn evaluate(net: &Network<f32>, data: &Dataset, cfg: &DecodeConfig, iou: f64, jobs: usize) -> Result<Evaluation> {
    let detections = detect_dataset(net, data, cfg, jobs)?;
    let gts = data.ground_truth();
    let flags = match_detections(&detections, &gts, iou)?;
    let curve = pr_curve(&flags, counted_faces(&gts))?;
    Ok(Evaluation {
        ap: average_precision(&curve),
        curve,
        flags,
        detections,
    })
}

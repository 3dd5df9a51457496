//! Annotation parsing, PGM/PPM images, the synthetic square-face set, and
//! training-time augmentation.

use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::toynet::Tensor;

/// One face line of a ground-truth file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceAnnotation {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    /// blur, expression, illumination, invalid, occlusion, pose
    pub attrs: [u8; 6],
}

impl FaceAnnotation {
    pub fn invalid(&self) -> bool {
        self.attrs[3] != 0
    }

    /// Corner box, or `None` for zero-size faces.
    pub fn bbox(&self) -> Option<BBox> {
        BBox::from_xywh(self.x, self.y, self.w, self.h).ok()
    }

    /// Zero-size or invalid-flagged faces are kept but not scored.
    pub fn ignored(&self) -> bool {
        self.invalid() || self.bbox().is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub path: String,
    pub faces: Vec<FaceAnnotation>,
}

fn parse_face(line: &str, line_no: usize) -> Result<FaceAnnotation> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 10 {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("expected 10 fields, got {}", fields.len()),
        });
    }
    let num = |i: usize| {
        fields[i].parse::<f64>().map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("field {} ({:?}): {e}", i + 1, fields[i]),
        })
    };
    let attr = |i: usize| {
        fields[i].parse::<u8>().map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("attribute {} ({:?}): {e}", i - 3, fields[i]),
        })
    };
    let (w, h) = (num(2)?, num(3)?);
    if w < 0.0 || h < 0.0 {
        return Err(Error::Parse {
            line: line_no,
            msg: "negative box size".into(),
        });
    }
    Ok(FaceAnnotation {
        x: num(0)?,
        y: num(1)?,
        w,
        h,
        attrs: [attr(4)?, attr(5)?, attr(6)?, attr(7)?, attr(8)?, attr(9)?],
    })
}

/// Parses the ground-truth text layout: image path, face count, then one
/// `x y w h blur expression illumination invalid occlusion pose` line per face.
/// A zero count may be followed by a single all-zero placeholder line.
pub fn parse_widerface_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut i = 0;
    let mut out = Vec::new();
    let next_nonblank = |mut i: usize| {
        while i < lines.len() && lines[i].trim().is_empty() {
            i += 1;
        }
        i
    };
    loop {
        i = next_nonblank(i);
        if i >= lines.len() {
            break;
        }
        let path = lines[i].trim().to_string();
        let count_line = i + 1;
        let count: usize = lines
            .get(count_line)
            .ok_or(Error::Parse {
                line: count_line + 1,
                msg: format!("missing face count for {path:?}"),
            })?
            .trim()
            .parse()
            .map_err(|e| Error::Parse {
                line: count_line + 1,
                msg: format!("bad face count: {e}"),
            })?;
        i = count_line + 1;
        let mut faces = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines.get(i).ok_or(Error::Parse {
                line: i + 1,
                msg: format!("{path:?} promises {count} faces, stream ended"),
            })?;
            faces.push(parse_face(line, i + 1)?);
            i += 1;
        }
        if count == 0 {
            if let Some(line) = lines.get(i) {
                if let Ok(face) = parse_face(line, i + 1) {
                    if face.w == 0.0 && face.h == 0.0 {
                        i += 1;
                    }
                }
            }
        }
        out.push(AnnotationRecord { path, faces });
    }
    Ok(out)
}

pub fn serialize_widerface_annotations(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}", r.path);
        let _ = writeln!(out, "{}", r.faces.len());
        if r.faces.is_empty() {
            out.push_str("0 0 0 0 0 0 0 0 0 0\n");
        }
        for f in &r.faces {
            let a = f.attrs;
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {} {} {} {}",
                f.x, f.y, f.w, f.h, a[0], a[1], a[2], a[3], a[4], a[5]
            );
        }
    }
    out
}

/// Decodes binary PGM (P5) or PPM (P6) with maxval 255 to a `1 x H x W`
/// grayscale tensor in `[0, 1]`; colour uses `0.299 R + 0.587 G + 0.114 B`.
pub fn load_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Image(format!("unsupported magic {m:?}"))),
    };
    let mut dim = || -> Result<usize> {
        let t = token()?;
        t.parse()
            .map_err(|_| Error::Image(format!("bad header field {t:?}")))
    };
    let (w, h, maxval) = (dim()?, dim()?, dim()?);
    if maxval != 255 {
        return Err(Error::Image(format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Image("zero image dimension".into()));
    }
    // exactly one whitespace byte separates header and raster
    let start = pos + 1;
    let need = w * h * channels;
    let raster = bytes
        .get(start..start + need)
        .ok_or_else(|| Error::Image(format!("raster needs {need} bytes")))?;
    let data = if channels == 1 {
        raster.iter().map(|&v| f32::from(v) / 255.0).collect()
    } else {
        raster
            .chunks_exact(3)
            .map(|p| {
                let (r, g, b) = (f64::from(p[0]), f64::from(p[1]), f64::from(p[2]));
                ((0.299 * r + 0.587 * g + 0.114 * b) / 255.0) as f32
            })
            .collect()
    };
    Tensor::from_vec(&[1, h, w], data)
}

/// Encodes a `1 x H x W` tensor in `[0, 1]` as binary PGM.
pub fn write_pgm(image: &Tensor<f32>) -> Vec<u8> {
    let (_, h, w) = image.chw();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub faces_min: usize,
    pub faces_max: usize,
    pub size_min: usize,
    pub size_max: usize,
    /// Background pixels are uniform in `[0, noise]`.
    pub noise: f32,
    /// Face squares sit this far above the noise ceiling.
    pub contrast: f32,
    /// Decoys per image: squares drawn exactly like faces but with a 4x4
    /// marker 6 to 12 pixels off one side. They are not faces; telling them
    /// apart needs context beyond the square itself.
    pub decoys_min: usize,
    pub decoys_max: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            faces_min: 1,
            faces_max: 3,
            size_min: 12,
            size_max: 36,
            noise: 0.4,
            contrast: 0.3,
            decoys_min: 0,
            decoys_max: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size_min < 8 || self.size_max < self.size_min {
            return bad(format!("face sizes {}..={} (minimum 8)", self.size_min, self.size_max));
        }
        if self.faces_max < self.faces_min || self.decoys_max < self.decoys_min {
            return bad("count ranges need max >= min".into());
        }
        if self.size_max > self.width || self.size_max > self.height {
            return bad(format!(
                "face size {} does not fit a {}x{} image",
                self.size_max, self.width, self.height
            ));
        }
        if !(0.0..1.0).contains(&self.noise) || self.contrast <= 0.0 || self.noise + self.contrast > 1.0 {
            return bad("need 0 <= noise < noise + contrast <= 1".into());
        }
        Ok(())
    }
}

/// Images with their face boxes, in matching order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<Tensor<f32>>,
    pub boxes: Vec<Vec<BBox>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn ground_truth(&self) -> crate::evalkit::GroundTruthSet {
        self.names
            .iter()
            .zip(&self.boxes)
            .map(|(n, b)| (n.clone(), b.iter().map(|&bb| crate::evalkit::GroundTruth::new(bb)).collect()))
            .collect()
    }

    pub fn annotations(&self) -> Vec<AnnotationRecord> {
        self.names
            .iter()
            .zip(&self.boxes)
            .map(|(n, bs)| AnnotationRecord {
                path: n.clone(),
                faces: bs
                    .iter()
                    .map(|b| FaceAnnotation {
                        x: b.x1,
                        y: b.y1,
                        w: b.width(),
                        h: b.height(),
                        attrs: [0; 6],
                    })
                    .collect(),
            })
            .collect()
    }

    /// Splits off the first `n` images.
    pub fn split(mut self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let rest = Dataset {
            names: self.names.split_off(n),
            images: self.images.split_off(n),
            boxes: self.boxes.split_off(n),
        };
        (self, rest)
    }
}

/// Deterministic per-item RNG stream derived from `(seed, a, b)`.
pub fn stream_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b);
    rng
}

const DECOY_MARKER: usize = 4;
const MARKER_CLEARANCE: usize = 16;

/// Noise backgrounds with bright, non-touching squares as faces, plus
/// optional marked decoy squares (see [`SynthConfig::decoys_max`]).
pub fn synth_dataset(cfg: &SynthConfig, n_images: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut ds = Dataset::default();
    for idx in 0..n_images {
        let mut rng = stream_rng(seed, 0x5EED, idx as u64);
        let (w, h) = (cfg.width, cfg.height);
        let mut data: Vec<f32> = (0..w * h).map(|_| rng.random::<f32>() * cfg.noise).collect();
        // (x, y, w, h); faces first, then decoy squares and their markers
        let mut rects: Vec<(usize, usize, usize, usize)> = Vec::new();
        let clear_by = |rects: &[(usize, usize, usize, usize)], (x, y, rw, rh): (usize, usize, usize, usize), gap: usize| {
            rects.iter().all(|&(bx, by, bw, bh)| {
                x >= bx + bw + gap || bx >= x + rw + gap || y >= by + bh + gap || by >= y + rh + gap
            })
        };
        // one pixel of background between shapes keeps them separable
        let clear = |rects: &[(usize, usize, usize, usize)], r| clear_by(rects, r, 1);
        let faces = rng.random_range(cfg.faces_min..=cfg.faces_max);
        for _ in 0..faces {
            for _attempt in 0..100 {
                let s = rng.random_range(cfg.size_min..=cfg.size_max);
                let r = (rng.random_range(0..=w - s), rng.random_range(0..=h - s), s, s);
                if clear(&rects, r) {
                    rects.push(r);
                    break;
                }
            }
        }
        let n_faces = rects.len();
        let decoys = rng.random_range(cfg.decoys_min..=cfg.decoys_max);
        for _ in 0..decoys {
            for _attempt in 0..100 {
                let s = rng.random_range(cfg.size_min..=cfg.size_max);
                let (x, y) = (rng.random_range(0..=w - s) as isize, rng.random_range(0..=h - s) as isize);
                let gap = rng.random_range(6..=12usize) as isize;
                let (si, m) = (s as isize, DECOY_MARKER as isize);
                let mid = (si - m) / 2;
                let (mx, my) = match rng.random_range(0..4) {
                    0 => (x - gap - m, y + mid),
                    1 => (x + si + gap, y + mid),
                    2 => (x + mid, y - gap - m),
                    _ => (x + mid, y + si + gap),
                };
                if mx < 0 || my < 0 || mx + m > w as isize || my + m > h as isize {
                    continue;
                }
                let square = (x as usize, y as usize, s, s);
                let marker = (mx as usize, my as usize, DECOY_MARKER, DECOY_MARKER);
                // markers stay well away from everything but their own decoy
                if clear(&rects, square) && clear_by(&rects, marker, MARKER_CLEARANCE) {
                    rects.push(square);
                    rects.push(marker);
                    break;
                }
            }
        }
        for &(x, y, rw, rh) in &rects {
            let level = cfg.noise + cfg.contrast * rng.random_range(0.5..=1.0f32);
            for yy in y..y + rh {
                for xx in x..x + rw {
                    data[yy * w + xx] = level;
                }
            }
        }
        ds.names.push(format!("synth_{idx:05}.pgm"));
        ds.images.push(Tensor::from_vec(&[1, h, w], data)?);
        ds.boxes.push(
            rects[..n_faces]
                .iter()
                .map(|&(x, y, s, _)| BBox::from_xywh(x as f64, y as f64, s as f64, s as f64))
                .collect::<Result<_>>()?,
        );
    }
    Ok(ds)
}

/// Bounding boxes of the 4-connected regions brighter than the noise ceiling,
/// in scan order. Faces are the square ones.
pub fn recover_squares(image: &Tensor<f32>, noise: f32) -> Vec<BBox> {
    let (_, h, w) = image.chw();
    let d = image.data();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        if seen[start] || d[start] <= noise {
            continue;
        }
        let (mut x1, mut y1, mut x2, mut y2) = (w, h, 0, 0);
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x + 1);
            y2 = y2.max(y + 1);
            let mut push = |q: usize| {
                if !seen[q] && d[q] > noise {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
        }
        out.push(BBox {
            x1: x1 as f64,
            y1: y1 as f64,
            x2: x2 as f64,
            y2: y2 as f64,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugConfig {
    /// Crop side as a fraction of the shorter image side.
    pub crop_min: f64,
    pub crop_max: f64,
    pub output_size: usize,
    pub hflip: f64,
    pub brightness: f32,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            crop_min: 0.3,
            crop_max: 1.0,
            output_size: 128,
            hflip: 0.5,
            brightness: 0.1,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.crop_min && self.crop_min <= self.crop_max && self.crop_max <= 1.0) {
            return Err(Error::Config(format!(
                "crop ratio range [{}, {}] must lie in (0, 1]",
                self.crop_min, self.crop_max
            )));
        }
        if self.output_size == 0 {
            return Err(Error::Config("augmentation output size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip) || self.brightness < 0.0 {
            return Err(Error::Config("bad flip probability or brightness amplitude".into()));
        }
        Ok(())
    }
}

const CROP_ATTEMPTS: usize = 50;

fn crop_boxes(gts: &[BBox], cx: f64, cy: f64, side: f64) -> Vec<BBox> {
    gts.iter()
        .filter_map(|g| {
            let moved = BBox {
                x1: g.x1 - cx,
                y1: g.y1 - cy,
                x2: g.x2 - cx,
                y2: g.y2 - cy,
            };
            let kept = moved.clip(side, side)?;
            (kept.area() >= 0.5 * g.area()).then_some(kept)
        })
        .collect()
}

/// Random square crop, nearest-neighbour resize, optional mirror and
/// brightness shift.
///
/// Faces keep their clipped box when at least half of their area survives
/// the crop. A crop is retried (up to 50 times) when it would lose every face
/// of a non-empty image; after that the centred full square is used.
pub fn augment(
    image: &Tensor<f32>,
    gts: &[BBox],
    cfg: &AugConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Vec<BBox>)> {
    cfg.validate()?;
    let (c, h, w) = image.chw();
    let short = h.min(w);
    let mut chosen = None;
    for _ in 0..CROP_ATTEMPTS {
        let ratio = if cfg.crop_max > cfg.crop_min {
            rng.random_range(cfg.crop_min..=cfg.crop_max)
        } else {
            cfg.crop_min
        };
        let side = ((ratio * short as f64).round() as usize).clamp(1, short);
        let x0 = rng.random_range(0..=w - side);
        let y0 = rng.random_range(0..=h - side);
        let boxes = crop_boxes(gts, x0 as f64, y0 as f64, side as f64);
        if gts.is_empty() || !boxes.is_empty() {
            chosen = Some((x0, y0, side, boxes));
            break;
        }
    }
    let (x0, y0, side, boxes) = chosen.unwrap_or_else(|| {
        let (x0, y0) = ((w - short) / 2, (h - short) / 2);
        let boxes = crop_boxes(gts, x0 as f64, y0 as f64, short as f64);
        (x0, y0, short, boxes)
    });

    let out = cfg.output_size;
    let flip = rng.random_bool(cfg.hflip);
    let shift = if cfg.brightness > 0.0 {
        rng.random_range(-cfg.brightness..=cfg.brightness)
    } else {
        0.0
    };
    let src = image.data();
    let mut data = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        for oy in 0..out {
            let sy = y0 + ((oy * side) / out).min(side - 1);
            for ox in 0..out {
                let fx = if flip { out - 1 - ox } else { ox };
                let sx = x0 + ((fx * side) / out).min(side - 1);
                data.push((src[(ch * h + sy) * w + sx] + shift).clamp(0.0, 1.0));
            }
        }
    }
    let scale = out as f64 / side as f64;
    let size = out as f64;
    let boxes = boxes
        .into_iter()
        .map(|b| {
            let s = BBox {
                x1: b.x1 * scale,
                y1: b.y1 * scale,
                x2: b.x2 * scale,
                y2: b.y2 * scale,
            };
            if flip {
                BBox {
                    x1: size - s.x2,
                    x2: size - s.x1,
                    ..s
                }
            } else {
                s
            }
        })
        .collect();
    Ok((Tensor::from_vec(&[c, out, out], data)?, boxes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_single_face() {
        let r = parse_widerface_annotations("a.jpg\n1\n10 10 20 20 0 0 0 0 0 0\n").unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].path, "a.jpg");
        assert_eq!(r[0].faces[0].bbox(), Some(BBox::new(10., 10., 30., 30.).unwrap()));
    }

    #[test]
    fn parse_zero_count_placeholder() {
        let text = "b.jpg\n0\n0 0 0 0 0 0 0 0 0 0\nc.jpg\n1\n1 2 3 4 1 0 2 0 1 0\n";
        let r = parse_widerface_annotations(text).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r[0].faces.is_empty());
        assert_eq!(r[1].faces[0].attrs, [1, 0, 2, 0, 1, 0]);
        // no placeholder at all is also accepted
        let r = parse_widerface_annotations("b.jpg\n0\nc.jpg\n0\n").unwrap();
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn truncated_stream_names_line() {
        let err = parse_widerface_annotations("a.jpg\n2\n1 1 5 5 0 0 0 0 0 0\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            e => panic!("{e:?}"),
        }
        let err = parse_widerface_annotations("a.jpg\n1\n1 x 5 5 0 0 0 0 0 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn zero_size_face_kept_ignored() {
        let r = parse_widerface_annotations("a.jpg\n1\n4 4 0 7 0 0 0 0 0 0\n").unwrap();
        assert!(r[0].faces[0].ignored());
        assert!(r[0].faces[0].bbox().is_none());
    }

    #[test]
    fn serialize_roundtrip() {
        let text = "x/a.jpg\n2\n10 10 20 20 0 0 0 0 0 0\n3 4 0 0 2 1 1 1 0 2\nb.jpg\n0\n0 0 0 0 0 0 0 0 0 0\n";
        let r = parse_widerface_annotations(text).unwrap();
        assert_eq!(serialize_widerface_annotations(&r), text);
        assert_eq!(parse_widerface_annotations(&serialize_widerface_annotations(&r)).unwrap(), r);
    }

    #[test]
    fn ppm_fixtures() {
        let t = load_ppm(b"P5\n1 1\n255\n\xff").unwrap();
        assert_eq!(t.data(), &[1.0]);
        let t = load_ppm(b"P6\n# comment\n1 1\n255\n\xff\x00\x00").unwrap();
        assert!((t.data()[0] - 0.299).abs() < 1e-6);
        assert!(load_ppm(b"P3\n1 1\n255\n0").is_err());
        assert!(load_ppm(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(load_ppm(b"P5\n1").is_err());
        assert!(load_ppm(b"P5\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn pgm_roundtrip() {
        let t = Tensor::from_vec(&[1, 2, 3], vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let back = load_ppm(&write_pgm(&t)).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn synth_basics() {
        let cfg = SynthConfig::default();
        assert!(synth_dataset(&cfg, 0, 1).unwrap().is_empty());
        assert_eq!(synth_dataset(&cfg, 4, 7).unwrap(), synth_dataset(&cfg, 4, 7).unwrap());
        let one = SynthConfig {
            faces_min: 1,
            faces_max: 1,
            size_min: 16,
            size_max: 16,
            ..cfg.clone()
        };
        let ds = synth_dataset(&one, 1, 3).unwrap();
        assert_eq!(ds.boxes[0].len(), 1);
        assert_eq!(ds.boxes[0][0].area(), 256.0);
        let big = SynthConfig {
            size_min: 80,
            size_max: 80,
            ..cfg
        };
        assert!(synth_dataset(&big, 1, 1).is_err());
    }

    #[test]
    fn synth_squares_recoverable() {
        let cfg = SynthConfig {
            decoys_max: 1,
            ..SynthConfig::default()
        };
        let ds = synth_dataset(&cfg, 40, 11).unwrap();
        let mut markers_seen = 0;
        for (img, boxes) in ds.images.iter().zip(&ds.boxes) {
            let mut want = boxes.clone();
            let regions = recover_squares(img, cfg.noise);
            let markers: Vec<&BBox> = regions.iter().filter(|b| b.width() == DECOY_MARKER as f64).collect();
            markers_seen += markers.len();
            // a square with a marker 6..=12 px off one side is a decoy
            let near = |b: &BBox, m: &BBox| {
                let dx = (m.x1 - b.x2).max(b.x1 - m.x2);
                let dy = (m.y1 - b.y2).max(b.y1 - m.y2);
                let gap = dx.max(dy);
                (6.0..=12.0).contains(&gap) && dx.min(dy) < 0.0
            };
            let mut got: Vec<BBox> = regions
                .iter()
                .filter(|b| b.width() > DECOY_MARKER as f64 && !markers.iter().any(|m| near(b, m)))
                .copied()
                .collect();
            let key = |b: &BBox| (b.y1 as i64, b.x1 as i64);
            want.sort_by_key(key);
            got.sort_by_key(key);
            assert_eq!(got, want);
        }
        assert!(markers_seen > 0);
    }

    fn square_image(n: usize) -> Tensor<f32> {
        Tensor::from_vec(&[1, n, n], (0..n * n).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap()
    }

    #[test]
    fn pure_rescale() {
        let cfg = AugConfig {
            crop_min: 1.0,
            crop_max: 1.0,
            output_size: 128,
            hflip: 0.0,
            brightness: 0.0,
        };
        let gt = BBox::new(4.0, 8.0, 20.0, 30.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (img, boxes) = augment(&square_image(64), &[gt], &cfg, &mut rng).unwrap();
        assert_eq!(img.dims(), &[1, 128, 128]);
        assert_eq!(boxes, vec![BBox::new(8.0, 16.0, 40.0, 60.0).unwrap()]);
    }

    #[test]
    fn flip_mirrors_box() {
        let cfg = AugConfig {
            crop_min: 1.0,
            crop_max: 1.0,
            output_size: 100,
            hflip: 1.0,
            brightness: 0.0,
        };
        let gt = BBox::new(10.0, 0.0, 20.0, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (img, boxes) = augment(&square_image(100), &[gt], &cfg, &mut rng).unwrap();
        assert_eq!(boxes, vec![BBox::new(80.0, 0.0, 90.0, 10.0).unwrap()]);
        assert_eq!(img.data()[0], square_image(100).data()[99]);
    }

    #[test]
    fn face_outside_crop_dropped() {
        // 0.5 crops of a 100px image never reach both corners at once; only
        // the full-image fallback keeps both
        let cfg = AugConfig {
            crop_min: 0.5,
            crop_max: 0.5,
            output_size: 50,
            hflip: 0.0,
            brightness: 0.0,
        };
        let near = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let far = BBox::new(90.0, 90.0, 100.0, 100.0).unwrap();
        let fallback = vec![
            BBox::new(0.0, 0.0, 5.0, 5.0).unwrap(),
            BBox::new(45.0, 45.0, 50.0, 50.0).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cropped = 0;
        for _ in 0..40 {
            let (_, boxes) = augment(&square_image(100), &[near, far], &cfg, &mut rng).unwrap();
            if boxes.len() == 1 {
                cropped += 1;
            } else {
                assert_eq!(boxes, fallback);
            }
        }
        assert!(cropped > 0);
    }

    #[test]
    fn augment_keeps_boxes_valid_and_inside() {
        let cfg = AugConfig {
            output_size: 64,
            ..AugConfig::default()
        };
        let ds = synth_dataset(&SynthConfig::default(), 30, 2).unwrap();
        for (i, (img, gts)) in ds.images.iter().zip(&ds.boxes).enumerate() {
            let mut rng = stream_rng(4, 1, i as u64);
            let (out, boxes) = augment(img, gts, &cfg, &mut rng).unwrap();
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for b in boxes {
                assert!(b.is_valid());
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
            }
        }
    }
}

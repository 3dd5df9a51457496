//! Boxes, Jaccard overlap, anchor tiling and receptive-field arithmetic.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, corner convention.
///
/// Area uses exclusive semantics: `(x2 - x1) * (y2 - y1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting non-positive or non-finite sides.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate(0)?;
        Ok(b)
    }

    /// Converts an `(x, y, w, h)` annotation into corner form.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub(crate) fn validate(&self, index: usize) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::DegenerateBox {
                index,
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
            })
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Intersection with the rectangle `[0, w] x [0, h]`, or `None` if nothing is left.
    pub fn clip(&self, w: f64, h: f64) -> Option<BBox> {
        let b = BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        };
        b.is_valid().then_some(b)
    }

    /// Overlap without validation; callers guarantee both boxes are valid.
    #[inline]
    pub(crate) fn iou_unchecked(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }
}

/// Jaccard overlap of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate(0)?;
    b.validate(1)?;
    Ok(a.iou_unchecked(b))
}

/// Dense `rows x cols` overlap table.
#[derive(Debug, Clone, PartialEq)]
pub struct IouMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl IouMatrix {
    /// Wraps an explicit table; used for hand-built matching fixtures.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::shape("iou_matrix", "ragged rows"));
        }
        Ok(IouMatrix {
            rows: n_rows,
            cols: n_cols,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }
}

/// Pairwise overlap table, entry `(i, j) = iou(a[i], b[j])`.
pub fn iou_matrix(a: &[BBox], b: &[BBox]) -> Result<IouMatrix> {
    for (i, bx) in a.iter().enumerate() {
        bx.validate(i)?;
    }
    for (j, bx) in b.iter().enumerate() {
        bx.validate(j)?;
    }
    let mut data = Vec::with_capacity(a.len() * b.len());
    for x in a {
        data.extend(b.iter().map(|y| x.iou_unchecked(y)));
    }
    Ok(IouMatrix {
        rows: a.len(),
        cols: b.len(),
        data,
    })
}

/// One detection layer of the anchor tiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorLayer {
    pub stride: u32,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorConfig {
    pub layers: Vec<AnchorLayer>,
    pub image_w: u32,
    pub image_h: u32,
}

impl Default for AnchorConfig {
    /// Six layers, strides 4..128, anchor side four times the stride, 640x640 input.
    fn default() -> Self {
        Self::with_strides(&[4, 8, 16, 32, 64, 128], 640, 640)
    }
}

impl AnchorConfig {
    /// Layers with `size = 4 * stride`.
    pub fn with_strides(strides: &[u32], image_w: u32, image_h: u32) -> Self {
        AnchorConfig {
            layers: strides
                .iter()
                .map(|&s| AnchorLayer {
                    stride: s,
                    size: 4 * s,
                })
                .collect(),
            image_w,
            image_h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_w == 0 || self.image_h == 0 {
            return Err(Error::Config(format!(
                "image size must be positive, got {}x{}",
                self.image_w, self.image_h
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("at least one anchor layer required".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.stride == 0 || l.size == 0 {
                return Err(Error::Config(format!("anchor layer {i}: zero stride or size")));
            }
        }
        if self.layers.windows(2).any(|w| w[1].stride <= w[0].stride) {
            return Err(Error::Config("anchor strides must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Feature-map `(rows, cols)` of every layer, by ceiling division.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| {
                (
                    self.image_h.div_ceil(l.stride) as usize,
                    self.image_w.div_ceil(l.stride) as usize,
                )
            })
            .collect()
    }

    pub fn anchor_count(&self) -> usize {
        self.layer_dims().iter().map(|(r, c)| r * c).sum()
    }

    /// Parses the plain-text form:
    ///
    /// ```text
    /// image_w = 640
    /// image_h = 640
    /// strides = 4,8,16,32,64,128
    /// sizes = 16,32,64,128,256,512
    /// ```
    ///
    /// `sizes` defaults to four times each stride when absent.
    pub fn parse(text: &str) -> Result<Self> {
        let mut image_w = None;
        let mut image_h = None;
        let mut strides: Option<Vec<u32>> = None;
        let mut sizes: Option<Vec<u32>> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            let parse_u32 = |v: &str| {
                v.trim().parse::<u32>().map_err(|e| Error::Parse {
                    line: n + 1,
                    msg: format!("{key}: {e}"),
                })
            };
            match key.trim() {
                "image_w" => image_w = Some(parse_u32(value)?),
                "image_h" => image_h = Some(parse_u32(value)?),
                "strides" => strides = Some(parse_u32_list(value, n + 1)?),
                "sizes" => sizes = Some(parse_u32_list(value, n + 1)?),
                other => {
                    return Err(Error::Parse {
                        line: n + 1,
                        msg: format!("unknown anchor key {other:?}"),
                    })
                }
            }
        }
        let default = AnchorConfig::default();
        let strides =
            strides.unwrap_or_else(|| default.layers.iter().map(|l| l.stride).collect());
        let sizes = sizes.unwrap_or_else(|| strides.iter().map(|s| 4 * s).collect());
        if sizes.len() != strides.len() {
            return Err(Error::Config(format!(
                "{} strides but {} sizes",
                strides.len(),
                sizes.len()
            )));
        }
        let cfg = AnchorConfig {
            layers: strides
                .into_iter()
                .zip(sizes)
                .map(|(stride, size)| AnchorLayer { stride, size })
                .collect(),
            image_w: image_w.unwrap_or(default.image_w),
            image_h: image_h.unwrap_or(default.image_h),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let join = |f: fn(&AnchorLayer) -> u32| {
            self.layers
                .iter()
                .map(|l| f(l).to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "image_w = {}\nimage_h = {}\nstrides = {}\nsizes = {}\n",
            self.image_w,
            self.image_h,
            join(|l| l.stride),
            join(|l| l.size)
        )
    }
}

pub(crate) fn parse_u32_list(value: &str, line: usize) -> Result<Vec<u32>> {
    value
        .split(',')
        .map(|s| {
            s.trim().parse::<u32>().map_err(|e| Error::Parse {
                line,
                msg: format!("bad integer {s:?}: {e}"),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOffset {
    pub start: usize,
    pub rows: usize,
    pub cols: usize,
    pub stride: u32,
    pub size: u32,
}

impl LayerOffset {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat, layer-major then row-major list of square anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    anchors: Vec<BBox>,
    layers: Vec<LayerOffset>,
    image_w: u32,
    image_h: u32,
}

impl AnchorGrid {
    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    pub fn layers(&self) -> &[LayerOffset] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn image_size(&self) -> (u32, u32) {
        (self.image_w, self.image_h)
    }

    /// `(layer, row, col)` of a flat anchor index.
    pub fn locate(&self, index: usize) -> Option<(usize, usize, usize)> {
        let layer = self
            .layers
            .iter()
            .rposition(|l| l.start <= index && index < l.start + l.len())?;
        let local = index - self.layers[layer].start;
        let cols = self.layers[layer].cols;
        Some((layer, local / cols, local % cols))
    }

    /// CSV dump: `layer,row,col,x1,y1,x2,y2`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,row,col,x1,y1,x2,y2\n");
        for (li, l) in self.layers.iter().enumerate() {
            for r in 0..l.rows {
                for c in 0..l.cols {
                    let a = &self.anchors[l.start + r * l.cols + c];
                    let _ = writeln!(out, "{li},{r},{c},{},{},{},{}", a.x1, a.y1, a.x2, a.y2);
                }
            }
        }
        out
    }
}

/// Tiles one square anchor per feature-map cell, centred at `((c + 0.5) s, (r + 0.5) s)`.
///
/// Anchors are not clipped to the image.
pub fn generate_anchors(cfg: &AnchorConfig) -> Result<AnchorGrid> {
    cfg.validate()?;
    let mut anchors = Vec::with_capacity(cfg.anchor_count());
    let mut layers = Vec::with_capacity(cfg.layers.len());
    for (layer, (rows, cols)) in cfg.layers.iter().zip(cfg.layer_dims()) {
        let start = anchors.len();
        let stride = f64::from(layer.stride);
        let size = f64::from(layer.size);
        for r in 0..rows {
            let cy = (r as f64 + 0.5) * stride;
            for c in 0..cols {
                let cx = (c as f64 + 0.5) * stride;
                anchors.push(BBox::from_center(cx, cy, size, size));
            }
        }
        layers.push(LayerOffset {
            start,
            rows,
            cols,
            stride: layer.stride,
            size: layer.size,
        });
    }
    Ok(AnchorGrid {
        anchors,
        layers,
        image_w: cfg.image_w,
        image_h: cfg.image_h,
    })
}

/// A convolution-like layer as seen by receptive-field arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kernel: u32,
    pub stride: u32,
}

impl LayerSpec {
    pub fn new(kernel: u32, stride: u32) -> Result<Self> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel must be odd and >= 1, got {kernel}")));
        }
        if stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        Ok(LayerSpec { kernel, stride })
    }

    pub fn conv3(stride: u32) -> Self {
        LayerSpec { kernel: 3, stride }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RfStep {
    pub rf_size: u64,
    pub jump: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RfInfo {
    pub rf_size: u64,
    pub jump: u64,
    pub trace: Vec<RfStep>,
}

/// Receptive field of the top of a layer stack: `rf += (k - 1) * jump; jump *= s`.
pub fn receptive_field(stack: &[LayerSpec]) -> Result<RfInfo> {
    if stack.is_empty() {
        return Err(Error::Config("receptive field of an empty stack".into()));
    }
    let mut rf = 1u64;
    let mut jump = 1u64;
    let mut trace = Vec::with_capacity(stack.len());
    for l in stack {
        rf += u64::from(l.kernel - 1) * jump;
        jump *= u64::from(l.stride);
        trace.push(RfStep { rf_size: rf, jump });
    }
    Ok(RfInfo {
        rf_size: rf,
        jump,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_fixtures() {
        assert_eq!(iou(&b(0., 0., 10., 10.), &b(0., 0., 10., 10.)).unwrap(), 1.0);
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(5., 5., 6., 6.)).unwrap(), 0.0);
        let v = iou(&b(0., 0., 2., 2.), &b(1., 1., 3., 3.)).unwrap();
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn iou_rejects_degenerate() {
        let bad = BBox {
            x1: 0.,
            y1: 0.,
            x2: 0.,
            y2: 5.,
        };
        assert!(iou(&bad, &b(0., 0., 1., 1.)).is_err());
        assert!(BBox::new(3., 0., 1., 1.).is_err());
    }

    #[test]
    fn iou_matrix_fixtures() {
        let m = iou_matrix(&[b(0., 0., 2., 2.)], &[b(0., 0., 2., 2.), b(10., 10., 12., 12.)])
            .unwrap();
        assert_eq!(m.to_rows(), vec![vec![1.0, 0.0]]);

        let m = iou_matrix(&[], &[b(0., 0., 2., 2.)]).unwrap();
        assert_eq!((m.rows(), m.cols()), (0, 1));

        let side = [b(0., 0., 4., 4.), b(2., 2., 6., 6.)];
        let m = iou_matrix(&side, &side).unwrap();
        let off = 4.0 / 28.0;
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(1, 1), 1.0);
        assert!((m.get(0, 1) - off).abs() < 1e-15);
        assert!((m.get(1, 0) - off).abs() < 1e-15);
    }

    #[test]
    fn iou_matrix_reports_bad_index() {
        let bad = BBox {
            x1: 1.,
            y1: 1.,
            x2: 1.,
            y2: 1.,
        };
        match iou_matrix(&[b(0., 0., 1., 1.), bad], &[]) {
            Err(Error::DegenerateBox { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn default_grid_counts() {
        let grid = generate_anchors(&AnchorConfig::default()).unwrap();
        let counts: Vec<usize> = grid.layers().iter().map(LayerOffset::len).collect();
        assert_eq!(counts, vec![25600, 6400, 1600, 400, 100, 25]);
        assert_eq!(grid.len(), 34_125);
    }

    #[test]
    fn small_grids() {
        let cfg = AnchorConfig {
            layers: vec![AnchorLayer { stride: 4, size: 16 }],
            image_w: 4,
            image_h: 4,
        };
        let grid = generate_anchors(&cfg).unwrap();
        assert_eq!(grid.anchors(), &[b(-6., -6., 10., 10.)]);

        let cfg = AnchorConfig {
            image_w: 8,
            ..cfg
        };
        let grid = generate_anchors(&cfg).unwrap();
        assert_eq!(grid.len(), 2);
        assert_eq!((grid.layers()[0].rows, grid.layers()[0].cols), (1, 2));
        assert_eq!(grid.locate(1), Some((0, 0, 1)));
    }

    #[test]
    fn zero_image_rejected() {
        let cfg = AnchorConfig::with_strides(&[4], 0, 10);
        assert!(generate_anchors(&cfg).is_err());
    }

    #[test]
    fn config_text_roundtrip() {
        let cfg = AnchorConfig::with_strides(&[4, 8], 64, 48);
        assert_eq!(AnchorConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(AnchorConfig::parse("strides = 8,4\n").is_err());
        assert!(AnchorConfig::parse("bogus = 1\n").is_err());
    }

    #[test]
    fn csv_dump_header_and_rows() {
        let cfg = AnchorConfig::with_strides(&[4], 8, 4);
        let csv = generate_anchors(&cfg).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,row,col,x1,y1,x2,y2");
        assert_eq!(lines[2], "0,0,1,-2,-6,14,10");
    }

    #[test]
    fn receptive_field_fixtures() {
        let rf = receptive_field(&[LayerSpec::conv3(1)]).unwrap();
        assert_eq!((rf.rf_size, rf.jump), (3, 1));
        let rf = receptive_field(&[LayerSpec::conv3(1), LayerSpec::conv3(1)]).unwrap();
        assert_eq!(rf.rf_size, 5);
        let rf = receptive_field(&[LayerSpec::conv3(2), LayerSpec::conv3(1)]).unwrap();
        assert_eq!((rf.rf_size, rf.jump), (7, 2));
        assert!(receptive_field(&[]).is_err());
        assert!(LayerSpec::new(4, 1).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let ab = iou(&a, &c).unwrap();
            let ba = iou(&c, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn anchor_count_matches_enumeration(
            w in 1u32..300,
            h in 1u32..300,
            first in 1u32..6,
            n_layers in 1usize..5,
        ) {
            let strides: Vec<u32> = (0..n_layers).map(|i| first << i).collect();
            let cfg = AnchorConfig::with_strides(&strides, w, h);
            let grid = generate_anchors(&cfg).unwrap();
            let mut expected = 0usize;
            for &s in &strides {
                let mut rows = 0;
                let mut y = 0;
                while y < h { rows += 1; y += s; }
                let mut cols = 0;
                let mut x = 0;
                while x < w { cols += 1; x += s; }
                expected += rows * cols;
            }
            prop_assert_eq!(grid.len(), expected);
            for l in grid.layers() {
                for a in &grid.anchors()[l.start..l.start + l.len()] {
                    prop_assert_eq!(a.width(), f64::from(l.size));
                    prop_assert_eq!(a.height(), f64::from(l.size));
                }
            }
        }
    }
}

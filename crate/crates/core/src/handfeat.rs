//! Hand-centric feature generation.
//!
//! Turns a frame's feature map plus detected hand boxes into a single
//! feature vector: the union of all hand boxes is pooled with RoIAlign and
//! added element-wise onto the frame's global context feature. RGB and flow
//! vectors are concatenated downstream.
//!
//! Coordinate conventions: a feature-map cell `(i, j)` (row `i`, column `j`)
//! has its center at continuous coordinates `(x, y) = (j + 0.5, i + 0.5)`.
//! Bilinear samples taken outside the map read as zero.

use ndarray::{Array1, Array3};

use crate::error::{Error, Result};

/// Coordinate frame a box lives in: image pixels or feature-map cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordFrame {
    Image,
    Feature,
}

/// Axis-aligned rectangle with strictly positive extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub frame: CoordFrame,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, frame: CoordFrame) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinates ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox(format!(
                "empty extent ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(BoundingBox { x1, y1, x2, y2, frame })
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

    /// True if `other` lies entirely inside `self`.
    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

/// Intersection-over-union of two boxes in the same frame.
///
/// Disjoint boxes give 0, identical boxes give 1.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// C×H×W grid of spatial activations for one frame and modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Array3<f64>,
}

impl FeatureMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidMap(format!("zero-sized map {c}x{h}x{w}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMap("non-finite value".into()));
        }
        Ok(FeatureMap { values })
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }
}

/// Dense vector of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Array1<f64>,
}

impl FeatureVector {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMap("non-finite feature value".into()));
        }
        Ok(FeatureVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array1<f64> {
        self.values
    }
}

/// Minimal axis-aligned envelope of a non-empty set of boxes.
///
/// All boxes must share a coordinate frame. An empty list is reported as
/// [`Error::NoDetection`] so callers can apply the full-frame fallback.
pub fn union_boxes(boxes: &[BoundingBox]) -> Result<BoundingBox> {
    let first = boxes
        .first()
        .ok_or_else(|| Error::NoDetection("empty box list".into()))?;
    let mut env = *first;
    for b in &boxes[1..] {
        if b.frame != env.frame {
            return Err(Error::InvalidBox("mixed coordinate frames in union".into()));
        }
        env.x1 = env.x1.min(b.x1);
        env.y1 = env.y1.min(b.y1);
        env.x2 = env.x2.max(b.x2);
        env.y2 = env.y2.max(b.y2);
    }
    Ok(env)
}

/// Map an image-frame box onto a feature grid of `map_h`×`map_w` cells.
///
/// Coordinates are divided by `stride` and clipped to the grid. A clip that
/// collapses to zero area widens to one cell centered at the clipped point
/// (detector jitter at image borders must not abort feature extraction); a
/// box entirely outside the grid is a no-detection.
pub fn image_to_feature_coords(
    bx: &BoundingBox,
    stride: f64,
    map_h: usize,
    map_w: usize,
) -> Result<BoundingBox> {
    if bx.frame != CoordFrame::Image {
        return Err(Error::InvalidBox("expected image-frame box".into()));
    }
    if !(stride > 0.0) || !stride.is_finite() {
        return Err(Error::InvalidBox(format!("invalid stride {stride}")));
    }
    let (w, h) = (map_w as f64, map_h as f64);
    let x1 = bx.x1 / stride;
    let y1 = bx.y1 / stride;
    let x2 = bx.x2 / stride;
    let y2 = bx.y2 / stride;
    // strictly outside errors; a box tangent to the border clips to zero area
    // and is widened below
    if x2 < 0.0 || y2 < 0.0 || x1 > w || y1 > h {
        return Err(Error::NoDetection("box outside feature map".into()));
    }
    let cx1 = x1.clamp(0.0, w);
    let cy1 = y1.clamp(0.0, h);
    let cx2 = x2.clamp(0.0, w);
    let cy2 = y2.clamp(0.0, h);
    let (cx1, cx2) = widen_if_degenerate(cx1, cx2, w);
    let (cy1, cy2) = widen_if_degenerate(cy1, cy2, h);
    BoundingBox::new(cx1, cy1, cx2, cy2, CoordFrame::Feature)
}

fn widen_if_degenerate(lo: f64, hi: f64, max: f64) -> (f64, f64) {
    if hi > lo {
        return (lo, hi);
    }
    let center = 0.5 * (lo + hi);
    (((center - 0.5).max(0.0)), ((center + 0.5).min(max)))
}

/// Bilinear interpolation of the four nearest cell centers at `(x, y)`.
/// Cells outside the map contribute zero.
fn bilinear(values: &Array3<f64>, c: usize, x: f64, y: f64) -> f64 {
    let (_, h, w) = values.dim();
    let fx = x - 0.5;
    let fy = y - 0.5;
    let j0f = fx.floor();
    let i0f = fy.floor();
    let dx = fx - j0f;
    let dy = fy - i0f;
    let i0 = i0f as isize;
    let j0 = j0f as isize;
    let at = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            values[(c, i as usize, j as usize)]
        }
    };
    (1.0 - dy) * ((1.0 - dx) * at(i0, j0) + dx * at(i0, j0 + 1))
        + dy * ((1.0 - dx) * at(i0 + 1, j0) + dx * at(i0 + 1, j0 + 1))
}

/// RoIAlign: pool a feature-frame ROI into an `out_h`×`out_w` grid.
///
/// The ROI is split into equal bins; each bin is sampled at
/// `samples_per_axis`² regularly spaced interior points (centers of an equal
/// subdivision of the bin) and averages their bilinear interpolations.
pub fn roi_align(
    map: &FeatureMap,
    roi: &BoundingBox,
    out_h: usize,
    out_w: usize,
    samples_per_axis: usize,
) -> Result<FeatureMap> {
    if roi.frame != CoordFrame::Feature {
        return Err(Error::InvalidBox("expected feature-frame roi".into()));
    }
    if out_h == 0 || out_w == 0 || samples_per_axis == 0 {
        return Err(Error::InvalidMap(format!(
            "output grid {out_h}x{out_w} with {samples_per_axis} samples per axis"
        )));
    }
    let c = map.channels();
    let bin_h = roi.height() / out_h as f64;
    let bin_w = roi.width() / out_w as f64;
    let s = samples_per_axis;
    let step_y = bin_h / s as f64;
    let step_x = bin_w / s as f64;
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        for by in 0..out_h {
            let y0 = roi.y1 + by as f64 * bin_h;
            for bx in 0..out_w {
                let x0 = roi.x1 + bx as f64 * bin_w;
                let mut sum = 0.0;
                for iy in 0..s {
                    let y = y0 + (iy as f64 + 0.5) * step_y;
                    for ix in 0..s {
                        let x = x0 + (ix as f64 + 0.5) * step_x;
                        sum += bilinear(map.values(), ch, x, y);
                    }
                }
                out[(ch, by, bx)] = sum / (s * s) as f64;
            }
        }
    }
    FeatureMap::new(out)
}

/// Per-channel mean over all spatial cells.
pub fn global_avg_pool(map: &FeatureMap) -> FeatureVector {
    let (c, h, w) = map.values().dim();
    let n = (h * w) as f64;
    let mut out = Array1::zeros(c);
    for ch in 0..c {
        let mut sum = 0.0;
        for i in 0..h {
            for j in 0..w {
                sum += map.values()[(ch, i, j)];
            }
        }
        out[ch] = sum / n;
    }
    FeatureVector { values: out }
}

/// Element-wise sum of the global context feature and the hand feature.
pub fn hand_centric_combine(context: &FeatureVector, hand: &FeatureVector) -> Result<FeatureVector> {
    if context.dim() != hand.dim() {
        return Err(Error::DimMismatch(format!(
            "context dim {} vs hand dim {}",
            context.dim(),
            hand.dim()
        )));
    }
    Ok(FeatureVector {
        values: context.values() + hand.values(),
    })
}

/// RoIAlign pooling parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandFeatParams {
    pub out_size: usize,
    pub samples_per_axis: usize,
}

impl Default for HandFeatParams {
    fn default() -> Self {
        HandFeatParams {
            out_size: 7,
            samples_per_axis: 2,
        }
    }
}

impl HandFeatParams {
    pub fn validate(&self) -> Result<()> {
        if self.out_size == 0 || self.samples_per_axis == 0 {
            return Err(Error::InvalidConfig(format!(
                "pooling grid {}x{} with {} samples per axis",
                self.out_size, self.out_size, self.samples_per_axis
            )));
        }
        Ok(())
    }
}

/// Full hand-centric feature for one frame and modality.
///
/// `context + avg_pool(roi_align(map, union(boxes)))`, where the union box is
/// mapped from image to feature coordinates via `stride`. With no boxes (or a
/// union that falls off the map) the ROI is the full frame, so the hand term
/// equals the context term and the output is exactly twice the context.
pub fn generate_hand_centric(
    map: &FeatureMap,
    boxes: &[BoundingBox],
    stride: f64,
    params: &HandFeatParams,
) -> Result<FeatureVector> {
    let context = global_avg_pool(map);
    let roi = union_boxes(boxes)
        .and_then(|u| image_to_feature_coords(&u, stride, map.height(), map.width()));
    let hand = match roi {
        Ok(roi) => {
            let pooled = roi_align(map, &roi, params.out_size, params.out_size, params.samples_per_axis)?;
            global_avg_pool(&pooled)
        }
        Err(Error::NoDetection(_)) => context.clone(),
        Err(e) => return Err(e),
    };
    hand_centric_combine(&context, &hand)
}

/// RGB values followed by flow values, order fixed.
pub fn concat_modalities(rgb: &FeatureVector, flow: &FeatureVector) -> FeatureVector {
    let mut values = Array1::zeros(rgb.dim() + flow.dim());
    for (i, v) in rgb.values().iter().enumerate() {
        values[i] = *v;
    }
    for (i, v) in flow.values().iter().enumerate() {
        values[rgb.dim() + i] = *v;
    }
    FeatureVector { values }
}

//! Multi-level domain-adaptive hand detector.
//!
//! A small strided conv pyramid feeds three consumers: per-cell domain
//! classifiers (through gradient reversal) at every level, an
//! uncertainty-weighted context vector summarizing all levels, and a dense
//! single-anchor box head on one chosen level. Source images carry box
//! supervision; target images only ever contribute through the domain
//! classifiers, so with the domain weight and reversal strength both zero the
//! parameter gradients collapse exactly onto supervised source-only training.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;

use ndarray::{Array1, Array2, Array3};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversarial::GrlConfig;
use crate::autodiff::{softmax_rows, ConvGeom, Params, Tape, Var};
use crate::error::{Error, Result};
use crate::handfeat::{iou, BoundingBox, CoordFrame, FeatureMap};

/// How per-level uncertainty turns into a context attention weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UncertaintyMode {
    /// Weight = 1 − u: trust levels whose domain classifier is confident.
    AttentionOnCertain,
    /// Weight = u: the opposite convention, kept for ablation.
    AttentionOnUncertain,
    /// Weight = 1 regardless of uncertainty.
    Off,
}

/// Attention weight for one level given its normalized uncertainty u ∈ [0, 1].
pub fn uncertainty_attention(u: f64, mode: UncertaintyMode) -> f64 {
    match mode {
        UncertaintyMode::AttentionOnCertain => 1.0 - u,
        UncertaintyMode::AttentionOnUncertain => u,
        UncertaintyMode::Off => 1.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub num_levels: usize,
    /// Output channels per pyramid level; length must equal `num_levels`.
    pub channels: Vec<usize>,
    /// Square input side; each 3×3 stride-2 pad-1 level halves it exactly.
    pub image_size: usize,
    pub image_channels: usize,
    /// Pyramid level whose grid the box head predicts on.
    pub head_level: usize,
    /// Side length of the square anchor box, in image pixels.
    pub anchor_size: f64,
    /// Width of each level's contribution to the context vector.
    pub context_width: usize,
    pub uncertainty_mode: UncertaintyMode,
    /// Weight of the mean per-level domain loss in the total objective.
    pub domain_weight: f64,
    pub grl: GrlConfig,
    pub confidence_threshold: f64,
    pub max_detections: usize,
}

impl DetectorConfig {
    /// Defaults sized for 32×32 single-channel bench images.
    pub fn desk() -> Self {
        DetectorConfig {
            num_levels: 3,
            channels: vec![8, 12, 16],
            image_size: 32,
            image_channels: 1,
            head_level: 0,
            anchor_size: 10.0,
            context_width: 8,
            uncertainty_mode: UncertaintyMode::AttentionOnCertain,
            domain_weight: 0.1,
            grl: GrlConfig::constant(0.3).expect("constant grl"),
            confidence_threshold: 0.5,
            max_detections: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_levels < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 pyramid levels, got {}",
                self.num_levels
            )));
        }
        if self.channels.len() != self.num_levels || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidConfig(format!(
                "channels {:?} must list one positive width per level",
                self.channels
            )));
        }
        if self.image_channels == 0 {
            return Err(Error::InvalidConfig("image_channels must be positive".into()));
        }
        let divisor = 1usize << self.num_levels;
        if self.image_size == 0 || self.image_size % divisor != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} must be a positive multiple of 2^{}",
                self.image_size, self.num_levels
            )));
        }
        // implied by exact halving, but the invariant is load-bearing
        for l in 1..self.num_levels {
            if self.level_side(l) >= self.level_side(l - 1) {
                return Err(Error::InvalidConfig("level resolution must strictly decrease".into()));
            }
        }
        if self.head_level >= self.num_levels {
            return Err(Error::InvalidConfig(format!(
                "head_level {} out of range for {} levels",
                self.head_level, self.num_levels
            )));
        }
        if !(self.anchor_size > 0.0) || !self.anchor_size.is_finite() {
            return Err(Error::InvalidConfig(format!("anchor_size {} must be positive", self.anchor_size)));
        }
        if self.context_width == 0 {
            return Err(Error::InvalidConfig("context_width must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::InvalidConfig(format!(
                "confidence_threshold {} outside [0, 1]",
                self.confidence_threshold
            )));
        }
        if self.max_detections == 0 {
            return Err(Error::InvalidConfig("max_detections must be positive".into()));
        }
        if !(self.domain_weight >= 0.0) || !self.domain_weight.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "domain_weight {} must be non-negative",
                self.domain_weight
            )));
        }
        Ok(())
    }

    /// Grid side length at `level`.
    pub fn level_side(&self, level: usize) -> usize {
        self.image_size >> (level + 1)
    }

    /// Image pixels per grid step at `level`.
    pub fn level_stride(&self, level: usize) -> f64 {
        (1usize << (level + 1)) as f64
    }

    fn level_cells(&self, level: usize) -> usize {
        let s = self.level_side(level);
        s * s
    }

    fn head_input_width(&self) -> usize {
        self.channels[self.head_level] + self.num_levels * self.context_width
    }
}

/// One training image: pixels plus ground-truth boxes in image coordinates.
/// Target-domain images carry no boxes.
#[derive(Debug, Clone)]
pub struct DetImage {
    pub pixels: Array3<f64>,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxPrediction {
    pub bbox: BoundingBox,
    pub confidence: f64,
}

/// Scalar losses of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLosses {
    pub detection: f64,
    /// Per-level domain losses; empty when no target images were given.
    pub levels: Vec<f64>,
    pub total: f64,
}

/// Center of the anchor for cell index `cell` on a `side`×`side` grid.
pub fn anchor_center(cell: usize, side: usize, stride: f64) -> (f64, f64) {
    let i = cell / side;
    let j = cell % side;
    ((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride)
}

/// Regression targets (tx, ty, tw, th) for a ground-truth box against one
/// anchor: center offsets in stride units, log size ratios clamped to ±4.
pub fn encode_box(gt: &BoundingBox, acx: f64, acy: f64, stride: f64, anchor_size: f64) -> [f64; 4] {
    let cx = 0.5 * (gt.x1 + gt.x2);
    let cy = 0.5 * (gt.y1 + gt.y2);
    [
        (cx - acx) / stride,
        (cy - acy) / stride,
        (gt.width() / anchor_size).ln().clamp(-4.0, 4.0),
        (gt.height() / anchor_size).ln().clamp(-4.0, 4.0),
    ]
}

/// Inverse of `encode_box`, clipped to the image; degenerate results decode to
/// None instead of an invalid box.
pub fn decode_box(
    t: [f64; 4],
    acx: f64,
    acy: f64,
    stride: f64,
    anchor_size: f64,
    image_size: f64,
) -> Option<BoundingBox> {
    let cx = acx + t[0] * stride;
    let cy = acy + t[1] * stride;
    let w = anchor_size * t[2].clamp(-4.0, 4.0).exp();
    let h = anchor_size * t[3].clamp(-4.0, 4.0).exp();
    let x1 = (cx - 0.5 * w).clamp(0.0, image_size);
    let x2 = (cx + 0.5 * w).clamp(0.0, image_size);
    let y1 = (cy - 0.5 * h).clamp(0.0, image_size);
    let y2 = (cy + 0.5 * h).clamp(0.0, image_size);
    BoundingBox::new(x1, y1, x2, y2, CoordFrame::Image).ok()
}

/// Greedy non-maximum suppression: keep candidates in descending confidence
/// order (ties keep input order), dropping any with IoU > 0.5 against an
/// already kept box, up to `max_keep`.
pub fn suppress(mut candidates: Vec<BoxPrediction>, max_keep: usize) -> Vec<BoxPrediction> {
    candidates.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).expect("finite confidence"));
    let mut kept: Vec<BoxPrediction> = Vec::new();
    for cand in candidates {
        if kept.len() == max_keep {
            break;
        }
        if kept.iter().all(|k| iou(&k.bbox, &cand.bbox) <= 0.5) {
            kept.push(cand);
        }
    }
    kept
}

fn entropy01(probs: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in probs {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    (h / LN_2).clamp(0.0, 1.0)
}

fn affine(tape: &mut Tape, vars: &BTreeMap<String, Var>, prefix: &str, x: Var) -> Var {
    let z = tape.matmul(x, vars[&format!("{prefix}.w1")]);
    tape.add_row_broadcast(z, vars[&format!("{prefix}.b1")])
}

fn mlp2(tape: &mut Tape, vars: &BTreeMap<String, Var>, prefix: &str, x: Var) -> Var {
    let h = affine(tape, vars, prefix, x);
    let h = tape.relu(h);
    let z = tape.matmul(h, vars[&format!("{prefix}.w2")]);
    tape.add_row_broadcast(z, vars[&format!("{prefix}.b2")])
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    use rand::Rng;
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

fn insert_mlp(params: &mut Params, rng: &mut ChaCha8Rng, prefix: &str, dims: &[usize]) {
    for (i, pair) in dims.windows(2).enumerate() {
        params.insert(&format!("{prefix}.w{}", i + 1), xavier(rng, pair[0], pair[1]));
        params.insert(&format!("{prefix}.b{}", i + 1), Array2::zeros((1, pair[1])));
    }
}

/// Tape handles for every loss of one detector step.
pub struct BuiltStep {
    pub detection: Var,
    /// One domain loss per level; empty when no target images were given.
    pub levels: Vec<Var>,
    pub total: Var,
    /// Normalized uncertainty per image (source first) per level.
    pub uncertainties: Vec<Vec<f64>>,
    /// Number of positive head cells across the source images.
    pub positives: usize,
}

impl BuiltStep {
    pub fn losses(&self, tape: &Tape) -> StepLosses {
        StepLosses {
            detection: tape.value(self.detection)[(0, 0)],
            levels: self.levels.iter().map(|&v| tape.value(v)[(0, 0)]).collect(),
            total: tape.value(self.total)[(0, 0)],
        }
    }
}

pub struct DetectorModel {
    cfg: DetectorConfig,
    params: Params,
}

impl DetectorModel {
    pub fn init(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut in_c = cfg.image_channels;
        for (l, &out_c) in cfg.channels.iter().enumerate() {
            params.insert(&format!("conv.{l}.w"), xavier(&mut rng, in_c * 9, out_c));
            params.insert(&format!("conv.{l}.b"), Array2::zeros((1, out_c)));
            insert_mlp(&mut params, &mut rng, &format!("disc.{l}"), &[out_c, out_c, 2]);
            insert_mlp(&mut params, &mut rng, &format!("ctx.{l}"), &[out_c, cfg.context_width]);
            in_c = out_c;
        }
        let head_c = cfg.channels[cfg.head_level];
        insert_mlp(&mut params, &mut rng, "head", &[cfg.head_input_width(), head_c, 5]);
        params.quantize_f32();
        Ok(DetectorModel { cfg, params })
    }

    pub fn from_parts(cfg: DetectorConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        Ok(DetectorModel { cfg, params })
    }

    pub fn cfg(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn into_parts(self) -> (DetectorConfig, Params) {
        (self.cfg, self.params)
    }

    fn check_image(&self, pixels: &Array3<f64>) -> Result<()> {
        let want = (self.cfg.image_channels, self.cfg.image_size, self.cfg.image_size);
        if pixels.dim() != want {
            return Err(Error::DimMismatch(format!(
                "image {:?} does not match configured {:?}",
                pixels.dim(),
                want
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMap("non-finite pixel".into()));
        }
        Ok(())
    }

    /// Feature maps of every pyramid level for one image.
    pub fn backbone_forward(&self, pixels: &Array3<f64>) -> Result<Vec<FeatureMap>> {
        self.check_image(pixels)?;
        let mut tape = Tape::new();
        let vars = self.params.leaf_all(&mut tape);
        let net = self.build_network(&mut tape, &vars, &[pixels.clone()], 0.0);
        let mut maps = Vec::with_capacity(self.cfg.num_levels);
        for (l, &cells) in net.cells.iter().enumerate() {
            let side = self.cfg.level_side(l);
            let c = self.cfg.channels[l];
            let v = tape.value(cells);
            let map = Array3::from_shape_fn((c, side, side), |(ci, y, x)| v[(y * side + x, ci)]);
            maps.push(FeatureMap::new(map)?);
        }
        Ok(maps)
    }

    /// Per-level domain losses and per-image normalized uncertainties for one
    /// source/target pair, without touching the detection head.
    pub fn level_domain_losses(
        &self,
        source: &Array3<f64>,
        target: &Array3<f64>,
        progress: f64,
    ) -> Result<(Vec<f64>, Vec<[f64; 2]>)> {
        self.check_image(source)?;
        self.check_image(target)?;
        let mut tape = Tape::new();
        let vars = self.params.leaf_all(&mut tape);
        let net = self.build_network(&mut tape, &vars, &[source.clone(), target.clone()], progress);
        let losses = self.domain_losses(&mut tape, &net, 1, 1);
        let values: Vec<f64> = losses.iter().map(|&v| tape.value(v)[(0, 0)]).collect();
        let uncert: Vec<[f64; 2]> = (0..self.cfg.num_levels)
            .map(|l| [net.uncertainties[0][l], net.uncertainties[1][l]])
            .collect();
        Ok((values, uncert))
    }

    /// Uncertainty-weighted context vector and per-level uncertainties for one
    /// image.
    pub fn uncertainty_and_context(&self, pixels: &Array3<f64>) -> Result<(Vec<f64>, Array1<f64>)> {
        self.check_image(pixels)?;
        let mut tape = Tape::new();
        let vars = self.params.leaf_all(&mut tape);
        let net = self.build_network(&mut tape, &vars, &[pixels.clone()], 0.0);
        let ctx = self.context_rows(&mut tape, &vars, &net);
        let row = tape.value(ctx).row(0).to_owned();
        Ok((net.uncertainties[0].clone(), row))
    }

    /// Detections for one image: confidence ≥ threshold, greedy suppression,
    /// strongest first, at most `max_detections`, boxes clipped to the image.
    pub fn detect(&self, pixels: &Array3<f64>) -> Result<Vec<BoxPrediction>> {
        self.check_image(pixels)?;
        let mut tape = Tape::new();
        let vars = self.params.leaf_all(&mut tape);
        let net = self.build_network(&mut tape, &vars, &[pixels.clone()], 0.0);
        let head = self.head_rows(&mut tape, &vars, &net, 1);
        let out = tape.value(head);
        let side = self.cfg.level_side(self.cfg.head_level);
        let stride = self.cfg.level_stride(self.cfg.head_level);
        let mut candidates = Vec::new();
        for cell in 0..self.cfg.level_cells(self.cfg.head_level) {
            let confidence = crate::autodiff::sigmoid(out[(cell, 0)]);
            if confidence < self.cfg.confidence_threshold {
                continue;
            }
            let t = [out[(cell, 1)], out[(cell, 2)], out[(cell, 3)], out[(cell, 4)]];
            let (acx, acy) = anchor_center(cell, side, stride);
            if let Some(bbox) = decode_box(
                t,
                acx,
                acy,
                stride,
                self.cfg.anchor_size,
                self.cfg.image_size as f64,
            ) {
                candidates.push(BoxPrediction { bbox, confidence });
            }
        }
        Ok(suppress(candidates, self.cfg.max_detections))
    }

    /// Losses of one step without gradients.
    pub fn step_losses(
        &self,
        sources: &[DetImage],
        targets: &[DetImage],
        progress: f64,
    ) -> Result<StepLosses> {
        let mut tape = Tape::new();
        let vars = self.params.leaf_all(&mut tape);
        let built = self.build_step(&mut tape, &vars, sources, targets, progress)?;
        Ok(built.losses(&tape))
    }

    /// Losses of one step plus the gradient of the total for every parameter.
    pub fn step_gradients(
        &self,
        sources: &[DetImage],
        targets: &[DetImage],
        progress: f64,
    ) -> Result<(StepLosses, BTreeMap<String, Array2<f64>>)> {
        let mut tape = Tape::new();
        let vars = self.params.leaf_all(&mut tape);
        let built = self.build_step(&mut tape, &vars, sources, targets, progress)?;
        tape.backward(built.total);
        let losses = built.losses(&tape);
        Ok((losses, self.params.grads_from(&tape, &vars)))
    }

    /// Builds every loss of one step on `tape`. With no target images the
    /// domain branch is skipped entirely and the total is the detection loss.
    pub fn build_step(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        sources: &[DetImage],
        targets: &[DetImage],
        progress: f64,
    ) -> Result<BuiltStep> {
        if sources.is_empty() {
            return Err(Error::EmptyBatch("detector step needs at least one source image".into()));
        }
        for img in sources.iter().chain(targets) {
            self.check_image(&img.pixels)?;
            if img.boxes.iter().any(|b| b.frame != CoordFrame::Image) {
                return Err(Error::InvalidBox("ground truth must use image coordinates".into()));
            }
        }
        let pixels: Vec<Array3<f64>> = sources
            .iter()
            .chain(targets)
            .map(|img| img.pixels.clone())
            .collect();
        let net = self.build_network(tape, vars, &pixels, progress);
        let detection = self.detection_loss(tape, vars, &net, sources)?;
        let levels = if targets.is_empty() {
            Vec::new()
        } else {
            self.domain_losses(tape, &net, sources.len(), targets.len())
        };
        let total = if levels.is_empty() {
            detection.0
        } else {
            let mut acc = levels[0];
            for &l in &levels[1..] {
                acc = tape.add(acc, l);
            }
            let mean = tape.scale(acc, 1.0 / levels.len() as f64);
            let weighted = tape.scale(mean, self.cfg.domain_weight);
            tape.add(detection.0, weighted)
        };
        Ok(BuiltStep {
            detection: detection.0,
            levels,
            total,
            uncertainties: net.uncertainties,
            positives: detection.1,
        })
    }

    /// Conv pyramid plus domain-classifier logits for a stack of images.
    fn build_network(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        images: &[Array3<f64>],
        progress: f64,
    ) -> Network {
        let b = images.len();
        let plane = self.cfg.image_channels * self.cfg.image_size * self.cfg.image_size;
        let mut rows = Array2::zeros((b, plane));
        for (bi, img) in images.iter().enumerate() {
            for (k, &v) in img.iter().enumerate() {
                rows[(bi, k)] = v;
            }
        }
        let mut planes = tape.leaf(rows);
        let lambda = self.cfg.grl.lambda_at(progress);
        let mut cells = Vec::with_capacity(self.cfg.num_levels);
        let mut logits = Vec::with_capacity(self.cfg.num_levels);
        let mut uncertainties = vec![Vec::with_capacity(self.cfg.num_levels); b];
        let mut in_c = self.cfg.image_channels;
        let mut in_s = self.cfg.image_size;
        for l in 0..self.cfg.num_levels {
            let geom = ConvGeom { in_c, in_h: in_s, in_w: in_s, kernel: 3, stride: 2, pad: 1 };
            let cols = tape.im2col(planes, geom);
            let z = tape.matmul(cols, vars[&format!("conv.{l}.w")]);
            let z = tape.add_row_broadcast(z, vars[&format!("conv.{l}.b")]);
            let act = tape.relu(z);
            let rev = tape.grl(act, lambda);
            let lg = mlp2(tape, vars, &format!("disc.{l}"), rev);
            let probs = softmax_rows(&tape.value(lg));
            let s_cells = self.cfg.level_cells(l);
            for bi in 0..b {
                let mut u = 0.0;
                for cell in 0..s_cells {
                    let row = probs.row(bi * s_cells + cell);
                    u += entropy01(&[row[0], row[1]]);
                }
                uncertainties[bi].push(u / s_cells as f64);
            }
            cells.push(act);
            logits.push(lg);
            planes = tape.cells_to_planes(act, b);
            in_c = self.cfg.channels[l];
            in_s = self.cfg.level_side(l);
        }
        Network { batch: b, cells, logits, uncertainties }
    }

    /// One domain loss per level: mean cross-entropy over every cell of every
    /// image in the batch against its image's domain label.
    fn domain_losses(
        &self,
        tape: &mut Tape,
        net: &Network,
        num_source: usize,
        num_target: usize,
    ) -> Vec<Var> {
        debug_assert_eq!(net.batch, num_source + num_target);
        let mut out = Vec::with_capacity(self.cfg.num_levels);
        for l in 0..self.cfg.num_levels {
            let s_cells = self.cfg.level_cells(l);
            let mut labels = Vec::with_capacity(net.batch * s_cells);
            for bi in 0..net.batch {
                let domain = usize::from(bi >= num_source);
                labels.extend(std::iter::repeat(domain).take(s_cells));
            }
            let lp = tape.log_softmax(net.logits[l]);
            out.push(tape.nll_mean(lp, &labels));
        }
        out
    }

    /// Context rows, one per image: concatenation over levels of the
    /// attention-weighted projection of the level's mean cell activation.
    /// Attention weights are plain numbers derived from classifier outputs, so
    /// no gradient reaches the classifiers through this path.
    fn context_rows(&self, tape: &mut Tape, vars: &BTreeMap<String, Var>, net: &Network) -> Var {
        let mut parts = Vec::with_capacity(self.cfg.num_levels);
        for l in 0..self.cfg.num_levels {
            let gap = tape.mean_rows_grouped(net.cells[l], self.cfg.level_cells(l));
            let proj = affine(tape, vars, &format!("ctx.{l}"), gap);
            let att = Array2::from_shape_fn((net.batch, self.cfg.context_width), |(bi, _)| {
                uncertainty_attention(net.uncertainties[bi][l], self.cfg.uncertainty_mode)
            });
            parts.push(tape.mul_const(proj, &att));
        }
        let mut ctx = parts[0];
        for &p in &parts[1..] {
            ctx = tape.concat_cols(ctx, p);
        }
        ctx
    }

    /// Head outputs (objectness logit + 4 offsets) for every head-level cell
    /// of the first `num_images` images in the batch.
    fn head_rows(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        net: &Network,
        num_images: usize,
    ) -> Var {
        let s_cells = self.cfg.level_cells(self.cfg.head_level);
        let rows: Vec<usize> = (0..num_images * s_cells).collect();
        let head_cells = tape.select_rows(net.cells[self.cfg.head_level], &rows);
        let ctx = self.context_rows(tape, vars, net);
        let ctx_idx: Vec<usize> = rows.iter().map(|r| r / s_cells).collect();
        let ctx_rows = tape.select_rows(ctx, &ctx_idx);
        let joined = tape.concat_cols(head_cells, ctx_rows);
        mlp2(tape, vars, "head", joined)
    }

    /// Supervised loss on the source images: objectness BCE over all head
    /// cells plus mean L1 over the offsets of positive cells. Returns the loss
    /// and the positive-cell count.
    fn detection_loss(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        net: &Network,
        sources: &[DetImage],
    ) -> Result<(Var, usize)> {
        let head = self.head_rows(tape, vars, net, sources.len());
        let side = self.cfg.level_side(self.cfg.head_level);
        let stride = self.cfg.level_stride(self.cfg.head_level);
        let s_cells = self.cfg.level_cells(self.cfg.head_level);
        let mut obj_targets = Array2::zeros((sources.len() * s_cells, 1));
        let mut pos_rows = Vec::new();
        let mut pos_targets = Vec::new();
        for (bi, img) in sources.iter().enumerate() {
            for cell in 0..s_cells {
                let (acx, acy) = anchor_center(cell, side, stride);
                let mut best: Option<(f64, &BoundingBox)> = None;
                for gt in &img.boxes {
                    if gt.x1 <= acx && acx <= gt.x2 && gt.y1 <= acy && acy <= gt.y2 {
                        let dx = 0.5 * (gt.x1 + gt.x2) - acx;
                        let dy = 0.5 * (gt.y1 + gt.y2) - acy;
                        let d2 = dx * dx + dy * dy;
                        if best.map_or(true, |(bd, _)| d2 < bd) {
                            best = Some((d2, gt));
                        }
                    }
                }
                if let Some((_, gt)) = best {
                    let row = bi * s_cells + cell;
                    obj_targets[(row, 0)] = 1.0;
                    pos_rows.push(row);
                    pos_targets.push(encode_box(gt, acx, acy, stride, self.cfg.anchor_size));
                }
            }
        }
        let obj = tape.select_cols(head, 0, 1);
        let bce = tape.bce_with_logits_mean(obj, &obj_targets);
        if pos_rows.is_empty() {
            return Ok((bce, 0));
        }
        let offsets = tape.select_cols(head, 1, 5);
        let picked = tape.select_rows(offsets, &pos_rows);
        let mut target = Array2::zeros((pos_rows.len(), 4));
        for (i, t) in pos_targets.iter().enumerate() {
            for j in 0..4 {
                target[(i, j)] = t[j];
            }
        }
        let l1 = tape.l1_mean(picked, &target);
        Ok((tape.add(bce, l1), pos_rows.len()))
    }
}

struct Network {
    batch: usize,
    /// Per level: (batch·cells)×channels activations after relu.
    cells: Vec<Var>,
    /// Per level: (batch·cells)×2 domain logits, fed through gradient reversal.
    logits: Vec<Var>,
    /// Per image per level: mean cell entropy normalized to [0, 1].
    uncertainties: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg() -> DetectorConfig {
        DetectorConfig {
            num_levels: 2,
            channels: vec![3, 4],
            image_size: 8,
            image_channels: 1,
            head_level: 0,
            anchor_size: 4.0,
            context_width: 3,
            uncertainty_mode: UncertaintyMode::AttentionOnCertain,
            domain_weight: 0.25,
            grl: GrlConfig::constant(0.4).unwrap(),
            confidence_threshold: 0.5,
            max_detections: 3,
        }
    }

    fn rand_pixels(rng: &mut ChaCha8Rng, cfg: &DetectorConfig) -> Array3<f64> {
        Array3::from_shape_fn((cfg.image_channels, cfg.image_size, cfg.image_size), |_| {
            rng.gen_range(-1.0..1.0)
        })
    }

    fn rand_source(rng: &mut ChaCha8Rng, cfg: &DetectorConfig) -> DetImage {
        let s = cfg.image_size as f64;
        let cx = rng.gen_range(0.2 * s..0.8 * s);
        let cy = rng.gen_range(0.2 * s..0.8 * s);
        let half = rng.gen_range(0.08 * s..0.18 * s);
        let bbox = BoundingBox::new(
            (cx - half).max(0.0),
            (cy - half).max(0.0),
            (cx + half).min(s),
            (cy + half).min(s),
            CoordFrame::Image,
        )
        .unwrap();
        DetImage { pixels: rand_pixels(rng, cfg), boxes: vec![bbox] }
    }

    fn rand_target(rng: &mut ChaCha8Rng, cfg: &DetectorConfig) -> DetImage {
        DetImage { pixels: rand_pixels(rng, cfg), boxes: Vec::new() }
    }

    #[test]
    fn config_validation() {
        assert!(DetectorConfig::desk().validate().is_ok());
        let mut c = tiny_cfg();
        c.num_levels = 1;
        c.channels = vec![3];
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.channels = vec![3];
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.image_size = 10;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.head_level = 2;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.confidence_threshold = 1.5;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.max_detections = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.anchor_size = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn backbone_shapes_shrink_and_repeat() {
        let cfg = tiny_cfg();
        let model = DetectorModel::init(cfg.clone(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pixels = rand_pixels(&mut rng, &cfg);
        let maps = model.backbone_forward(&pixels).unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!(maps[0].values().dim(), (3, 4, 4));
        assert_eq!(maps[1].values().dim(), (4, 2, 2));
        assert!(maps[0].height() > maps[1].height());
        let again = model.backbone_forward(&pixels).unwrap();
        for (a, b) in maps.iter().zip(&again) {
            assert_eq!(a.values(), b.values());
        }
    }

    // a classifier with zeroed parameters outputs (0.5, 0.5) on every cell
    #[test]
    fn symmetric_classifier_hits_ln2_loss_and_unit_uncertainty() {
        let cfg = tiny_cfg();
        let mut model = DetectorModel::init(cfg.clone(), 3).unwrap();
        for l in 0..cfg.num_levels {
            for part in ["w1", "b1", "w2", "b2"] {
                model.params_mut().get_mut(&format!("disc.{l}.{part}")).fill(0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = rand_pixels(&mut rng, &cfg);
        let t = rand_pixels(&mut rng, &cfg);
        let (losses, uncert) = model.level_domain_losses(&s, &t, 0.5).unwrap();
        for l in 0..cfg.num_levels {
            assert!((losses[l] - LN_2).abs() < 1e-12, "level {l} loss {}", losses[l]);
            assert!((uncert[l][0] - 1.0).abs() < 1e-12);
            assert!((uncert[l][1] - 1.0).abs() < 1e-12);
        }
    }

    // hand-built filters that separate the domains by sign drive both the
    // domain loss and the uncertainty to zero
    #[test]
    fn separable_domains_drive_loss_and_uncertainty_down() {
        let mut cfg = tiny_cfg();
        cfg.channels = vec![1, 1];
        let mut model = DetectorModel::init(cfg.clone(), 4).unwrap();
        for l in 0..2 {
            model.params_mut().get_mut(&format!("conv.{l}.w")).fill(1.0 / 9.0);
            model.params_mut().get_mut(&format!("conv.{l}.b")).fill(0.0);
            model.params_mut().get_mut(&format!("disc.{l}.w1")).fill(1.0);
            model.params_mut().get_mut(&format!("disc.{l}.b1")).fill(0.0);
            let w2 = model.params_mut().get_mut(&format!("disc.{l}.w2"));
            w2[(0, 0)] = 200.0;
            w2[(0, 1)] = 0.0;
            let b2 = model.params_mut().get_mut(&format!("disc.{l}.b2"));
            b2[(0, 0)] = -10.0;
            b2[(0, 1)] = 10.0;
        }
        let bright = Array3::from_elem((1, 8, 8), 1.0);
        let dark = Array3::from_elem((1, 8, 8), -1.0);
        let (losses, uncert) = model.level_domain_losses(&bright, &dark, 0.0).unwrap();
        for l in 0..2 {
            assert!(losses[l] < 1e-6, "level {l} loss {}", losses[l]);
            assert!(uncert[l][0] < 1e-6);
            assert!(uncert[l][1] < 1e-6);
        }
    }

    fn scalar_conv_levels(cfg: &DetectorConfig, params: &Params, pixels: &Array3<f64>) -> Vec<Array3<f64>> {
        let mut input = pixels.clone();
        let mut maps = Vec::new();
        for l in 0..cfg.num_levels {
            let (in_c, in_s, _) = input.dim();
            let out_c = cfg.channels[l];
            let side = cfg.level_side(l);
            let w = params.get(&format!("conv.{l}.w"));
            let b = params.get(&format!("conv.{l}.b"));
            let mut out = Array3::zeros((out_c, side, side));
            for co in 0..out_c {
                for oy in 0..side {
                    for ox in 0..side {
                        let mut acc = 0.0;
                        for ci in 0..in_c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= in_s as isize || ix >= in_s as isize {
                                        continue;
                                    }
                                    acc += w[((ci * 3 + ky) * 3 + kx, co)]
                                        * input[(ci, iy as usize, ix as usize)];
                                }
                            }
                        }
                        out[(co, oy, ox)] = (acc + b[(0, co)]).max(0.0);
                    }
                }
            }
            maps.push(out.clone());
            input = out;
        }
        maps
    }

    fn scalar_mlp2(params: &Params, prefix: &str, x: &[f64]) -> Vec<f64> {
        let w1 = params.get(&format!("{prefix}.w1"));
        let b1 = params.get(&format!("{prefix}.b1"));
        let w2 = params.get(&format!("{prefix}.w2"));
        let b2 = params.get(&format!("{prefix}.b2"));
        let hidden: Vec<f64> = (0..w1.dim().1)
            .map(|j| {
                let mut acc = 0.0;
                for (i, &v) in x.iter().enumerate() {
                    acc += v * w1[(i, j)];
                }
                (acc + b1[(0, j)]).max(0.0)
            })
            .collect();
        (0..w2.dim().1)
            .map(|k| {
                let mut acc = 0.0;
                for (j, &h) in hidden.iter().enumerate() {
                    acc += h * w2[(j, k)];
                }
                acc + b2[(0, k)]
            })
            .collect()
    }

    fn scalar_softmax(z: &[f64]) -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|&e| e / sum).collect()
    }

    fn cell_vec(map: &Array3<f64>, cell: usize) -> Vec<f64> {
        let (c, _, w) = map.dim();
        let (y, x) = (cell / w, cell % w);
        (0..c).map(|ci| map[(ci, y, x)]).collect()
    }

    // every published number of one step re-derived with plain loops
    #[test]
    fn step_losses_match_scalar_recomputation() {
        let cfg = tiny_cfg();
        let model = DetectorModel::init(cfg.clone(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sources = vec![rand_source(&mut rng, &cfg), rand_source(&mut rng, &cfg)];
        let targets = vec![rand_target(&mut rng, &cfg)];
        let got = model.step_losses(&sources, &targets, 0.37).unwrap();

        let images: Vec<(&DetImage, usize)> = sources
            .iter()
            .map(|i| (i, 0))
            .chain(targets.iter().map(|i| (i, 1)))
            .collect();
        let maps: Vec<Vec<Array3<f64>>> = images
            .iter()
            .map(|(img, _)| scalar_conv_levels(&cfg, model.params(), &img.pixels))
            .collect();

        // domain losses and uncertainties
        let mut uncert = vec![vec![0.0; cfg.num_levels]; images.len()];
        let mut level_losses = vec![0.0; cfg.num_levels];
        for l in 0..cfg.num_levels {
            let cells = cfg.level_cells(l);
            let mut acc = 0.0;
            for (bi, (_, domain)) in images.iter().enumerate() {
                let mut ent = 0.0;
                for cell in 0..cells {
                    let logits = scalar_mlp2(model.params(), &format!("disc.{l}"), &cell_vec(&maps[bi][l], cell));
                    let p = scalar_softmax(&logits);
                    acc -= p[*domain].ln();
                    ent += entropy01(&p);
                }
                uncert[bi][l] = ent / cells as f64;
            }
            level_losses[l] = acc / (images.len() * cells) as f64;
        }
        for l in 0..cfg.num_levels {
            assert!((got.levels[l] - level_losses[l]).abs() < 1e-9, "level {l}");
        }

        // context per image
        let ctx: Vec<Vec<f64>> = (0..images.len())
            .map(|bi| {
                let mut row = Vec::new();
                for l in 0..cfg.num_levels {
                    let map = &maps[bi][l];
                    let cells = cfg.level_cells(l);
                    let gap: Vec<f64> = (0..cfg.channels[l])
                        .map(|c| {
                            let mut acc = 0.0;
                            for cell in 0..cells {
                                acc += cell_vec(map, cell)[c];
                            }
                            acc / cells as f64
                        })
                        .collect();
                    let w = model.params().get(&format!("ctx.{l}.w1"));
                    let b = model.params().get(&format!("ctx.{l}.b1"));
                    let att = uncertainty_attention(uncert[bi][l], cfg.uncertainty_mode);
                    for k in 0..cfg.context_width {
                        let mut acc = 0.0;
                        for (i, &g) in gap.iter().enumerate() {
                            acc += g * w[(i, k)];
                        }
                        row.push((acc + b[(0, k)]) * att);
                    }
                }
                row
            })
            .collect();

        // detection loss over source images
        let side = cfg.level_side(cfg.head_level);
        let stride = cfg.level_stride(cfg.head_level);
        let cells = cfg.level_cells(cfg.head_level);
        let mut bce = 0.0;
        let mut l1_terms = Vec::new();
        for (bi, img) in sources.iter().enumerate() {
            for cell in 0..cells {
                let mut input = cell_vec(&maps[bi][cfg.head_level], cell);
                input.extend(ctx[bi].iter().cloned());
                let out = scalar_mlp2(model.params(), "head", &input);
                let (acx, acy) = anchor_center(cell, side, stride);
                let gt = img.boxes.iter().find(|g| {
                    g.x1 <= acx && acx <= g.x2 && g.y1 <= acy && acy <= g.y2
                });
                let t = f64::from(gt.is_some());
                let z: f64 = out[0];
                bce += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
                if let Some(g) = gt {
                    let enc = encode_box(g, acx, acy, stride, cfg.anchor_size);
                    for j in 0..4 {
                        l1_terms.push((out[1 + j] - enc[j]).abs());
                    }
                }
            }
        }
        bce /= (sources.len() * cells) as f64;
        let mut det = bce;
        if !l1_terms.is_empty() {
            det += l1_terms.iter().sum::<f64>() / l1_terms.len() as f64;
        }
        assert!((got.detection - det).abs() < 1e-9, "det {} vs {}", got.detection, det);

        let mean_levels: f64 = level_losses.iter().sum::<f64>() / cfg.num_levels as f64;
        let total = det + cfg.domain_weight * mean_levels;
        assert!((got.total - total).abs() < 1e-9, "total {} vs {}", got.total, total);
    }

    #[test]
    fn context_vector_matches_scalar_composition() {
        let cfg = tiny_cfg();
        let model = DetectorModel::init(cfg.clone(), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let pixels = rand_pixels(&mut rng, &cfg);
        let (uncert, ctx) = model.uncertainty_and_context(&pixels).unwrap();
        assert_eq!(ctx.len(), cfg.num_levels * cfg.context_width);
        assert!(uncert.iter().all(|&u| (0.0..=1.0).contains(&u)));

        let maps = scalar_conv_levels(&cfg, model.params(), &pixels);
        let mut expect = Vec::new();
        for l in 0..cfg.num_levels {
            let cells = cfg.level_cells(l);
            let mut ent = 0.0;
            for cell in 0..cells {
                let logits = scalar_mlp2(model.params(), &format!("disc.{l}"), &cell_vec(&maps[l], cell));
                ent += entropy01(&scalar_softmax(&logits));
            }
            let u = ent / cells as f64;
            assert!((u - uncert[l]).abs() < 1e-9);
            let att = uncertainty_attention(u, cfg.uncertainty_mode);
            let w = model.params().get(&format!("ctx.{l}.w1"));
            let b = model.params().get(&format!("ctx.{l}.b1"));
            for k in 0..cfg.context_width {
                let mut acc = 0.0;
                for c in 0..cfg.channels[l] {
                    let mut gap = 0.0;
                    for cell in 0..cells {
                        gap += maps[l][(c, cell / cfg.level_side(l), cell % cfg.level_side(l))];
                    }
                    acc += gap / cells as f64 * w[(c, k)];
                }
                expect.push((acc + b[(0, k)]) * att);
            }
        }
        for (a, b) in ctx.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_weight_modes() {
        assert_eq!(uncertainty_attention(0.25, UncertaintyMode::AttentionOnCertain), 0.75);
        assert_eq!(uncertainty_attention(0.25, UncertaintyMode::AttentionOnUncertain), 0.25);
        assert_eq!(uncertainty_attention(0.25, UncertaintyMode::Off), 1.0);
        assert_eq!(uncertainty_attention(1.0, UncertaintyMode::AttentionOnCertain), 0.0);
        assert_eq!(uncertainty_attention(0.0, UncertaintyMode::AttentionOnCertain), 1.0);
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let (cx, cy) = (rng.gen_range(4.0..28.0), rng.gen_range(4.0..28.0));
            let (hw, hh) = (rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0));
            let gt = BoundingBox::new(cx - hw, cy - hh, cx + hw, cy + hh, CoordFrame::Image).unwrap();
            let (acx, acy) = (rng.gen_range(0.0..32.0), rng.gen_range(0.0..32.0));
            let enc = encode_box(&gt, acx, acy, 2.0, 4.0);
            let back = decode_box(enc, acx, acy, 2.0, 4.0, 32.0).unwrap();
            assert!((back.x1 - gt.x1).abs() < 1e-9);
            assert!((back.y1 - gt.y1).abs() < 1e-9);
            assert!((back.x2 - gt.x2).abs() < 1e-9);
            assert!((back.y2 - gt.y2).abs() < 1e-9);
        }
    }

    #[test]
    fn decode_clamps_scale_and_clips_to_image() {
        // log-scale offsets saturate at ±4
        let big = decode_box([0.0, 0.0, 50.0, 50.0], 16.0, 16.0, 2.0, 1.0, 32.0).unwrap();
        assert!(big.x2 - big.x1 <= 32.0 && big.y2 - big.y1 <= 32.0);
        let want = 4.0_f64.exp();
        let unclipped = decode_box([0.0, 0.0, 50.0, 50.0], 16.0, 16.0, 2.0, 0.1, 32.0).unwrap();
        assert!((unclipped.width() - 0.1 * want).abs() < 1e-9);
        // a center far outside the image decodes to nothing after clipping
        assert!(decode_box([100.0, 100.0, 0.0, 0.0], 16.0, 16.0, 2.0, 4.0, 32.0).is_none());
    }

    #[test]
    fn suppression_orders_filters_and_truncates() {
        let mk = |x1: f64, conf: f64| BoxPrediction {
            bbox: BoundingBox::new(x1, 0.0, x1 + 10.0, 10.0, CoordFrame::Image).unwrap(),
            confidence: conf,
        };
        // two heavy overlaps and one clean box
        let kept = suppress(vec![mk(0.0, 0.6), mk(1.0, 0.9), mk(20.0, 0.3)], 5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].bbox.x1, 1.0);
        assert_eq!(kept[1].bbox.x1, 20.0);
        // truncation after suppression
        let kept = suppress(vec![mk(0.0, 0.9), mk(40.0, 0.8), mk(80.0, 0.7)], 2);
        assert_eq!(kept.len(), 2);
        assert!(kept[0].confidence >= kept[1].confidence);
        // ties keep input order
        let kept = suppress(vec![mk(0.0, 0.5), mk(40.0, 0.5)], 5);
        assert_eq!(kept[0].bbox.x1, 0.0);
        // exact 0.5 overlap survives: the rule is strictly greater
        let a = BoxPrediction {
            bbox: BoundingBox::new(0.0, 0.0, 10.0, 10.0, CoordFrame::Image).unwrap(),
            confidence: 0.9,
        };
        let b = BoxPrediction {
            bbox: BoundingBox::new(0.0, 0.0, 10.0, 5.0, CoordFrame::Image).unwrap(),
            confidence: 0.8,
        };
        assert_eq!(suppress(vec![a, b], 5).len(), 2);
    }

    #[test]
    fn detect_respects_threshold_and_output_contract() {
        let mut cfg = tiny_cfg();
        cfg.confidence_threshold = 0.999_999;
        let model = DetectorModel::init(cfg.clone(), 41).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let pixels = rand_pixels(&mut rng, &cfg);
        assert!(model.detect(&pixels).unwrap().is_empty());

        let mut cfg = tiny_cfg();
        cfg.confidence_threshold = 0.0;
        let model = DetectorModel::init(cfg.clone(), 41).unwrap();
        let dets = model.detect(&pixels).unwrap();
        assert!(!dets.is_empty() && dets.len() <= cfg.max_detections);
        for d in &dets {
            assert!(d.bbox.x1 >= 0.0 && d.bbox.y1 >= 0.0);
            assert!(d.bbox.x2 <= cfg.image_size as f64 && d.bbox.y2 <= cfg.image_size as f64);
            assert!(d.bbox.frame == CoordFrame::Image);
        }
        for pair in dets.windows(2) {
            assert!(pair[0].confidence >= pair[1].confidence);
        }
        for i in 0..dets.len() {
            for j in i + 1..dets.len() {
                assert!(iou(&dets[i].bbox, &dets[j].bbox) <= 0.5);
            }
        }
    }

    #[test]
    fn total_composes_detection_and_domain_terms() {
        let cfg = tiny_cfg();
        let model = DetectorModel::init(cfg.clone(), 51).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let sources = vec![rand_source(&mut rng, &cfg)];
        let targets = vec![rand_target(&mut rng, &cfg), rand_target(&mut rng, &cfg)];
        let losses = model.step_losses(&sources, &targets, 0.2).unwrap();
        assert_eq!(losses.levels.len(), cfg.num_levels);
        let mean: f64 = losses.levels.iter().sum::<f64>() / cfg.num_levels as f64;
        assert!((losses.total - (losses.detection + cfg.domain_weight * mean)).abs() < 1e-12);

        let mut cfg0 = tiny_cfg();
        cfg0.domain_weight = 0.0;
        let model0 = DetectorModel::from_parts(cfg0, model.params().clone()).unwrap();
        let l0 = model0.step_losses(&sources, &targets, 0.2).unwrap();
        assert_eq!(l0.total, l0.detection);

        let solo = model.step_losses(&sources, &[], 0.2).unwrap();
        assert!(solo.levels.is_empty());
        assert_eq!(solo.total, solo.detection);
    }

    // with the domain weight and reversal strength both zero, target images
    // must not leave any trace in the gradients
    #[test]
    fn disabled_adaptation_matches_source_only_gradients() {
        let mut cfg = tiny_cfg();
        cfg.domain_weight = 0.0;
        cfg.grl = GrlConfig::constant(0.0).unwrap();
        let model = DetectorModel::init(cfg.clone(), 61).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        for step in 0..3 {
            let sources = vec![rand_source(&mut rng, &cfg), rand_source(&mut rng, &cfg)];
            let targets = vec![rand_target(&mut rng, &cfg), rand_target(&mut rng, &cfg)];
            let (paired_losses, paired) = model.step_gradients(&sources, &targets, 0.5).unwrap();
            let (solo_losses, solo) = model.step_gradients(&sources, &[], 0.5).unwrap();
            assert!((paired_losses.detection - solo_losses.detection).abs() < 1e-12);
            for (name, g) in &paired {
                let diff = (g - &solo[name]).iter().fold(0.0f64, |m, &v| m.max(v.abs()));
                assert!(diff < 1e-9, "step {step} param {name} diff {diff}");
            }
            // swapping the target images must change nothing either
            let other = vec![rand_target(&mut rng, &cfg), rand_target(&mut rng, &cfg)];
            let (_, swapped) = model.step_gradients(&sources, &other, 0.5).unwrap();
            for (name, g) in &paired {
                let diff = (g - &swapped[name]).iter().fold(0.0f64, |m, &v| m.max(v.abs()));
                assert!(diff < 1e-9, "step {step} param {name} swapped diff {diff}");
            }
        }
    }

    #[test]
    fn positive_cells_follow_anchor_containment() {
        let cfg = tiny_cfg();
        let model = DetectorModel::init(cfg.clone(), 71).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        // centers lie at odd coordinates; [1,5]² contains the 9 centers {1,3,5}²
        let bbox = BoundingBox::new(1.0, 1.0, 5.0, 5.0, CoordFrame::Image).unwrap();
        let img = DetImage { pixels: rand_pixels(&mut rng, &cfg), boxes: vec![bbox] };
        let mut tape = Tape::new();
        let vars = model.params().leaf_all(&mut tape);
        let built = model.build_step(&mut tape, &vars, &[img], &[], 0.0).unwrap();
        assert_eq!(built.positives, 9);

        // a box that dodges every anchor center yields objectness-only loss
        let bbox = BoundingBox::new(1.2, 1.2, 2.8, 2.8, CoordFrame::Image).unwrap();
        let img = DetImage { pixels: rand_pixels(&mut rng, &cfg), boxes: vec![bbox] };
        let mut tape = Tape::new();
        let vars = model.params().leaf_all(&mut tape);
        let built = model.build_step(&mut tape, &vars, &[img], &[], 0.0).unwrap();
        assert_eq!(built.positives, 0);
    }

    #[test]
    fn step_rejects_empty_sources_and_bad_frames() {
        let cfg = tiny_cfg();
        let model = DetectorModel::init(cfg.clone(), 81).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let err = model.step_losses(&[], &[rand_target(&mut rng, &cfg)], 0.0);
        assert!(matches!(err, Err(Error::EmptyBatch(_))));
        let mut img = rand_source(&mut rng, &cfg);
        img.boxes = vec![BoundingBox::new(0.0, 0.0, 2.0, 2.0, CoordFrame::Feature).unwrap()];
        assert!(matches!(model.step_losses(&[img], &[], 0.0), Err(Error::InvalidBox(_))));
        let bad = Array3::zeros((2, 8, 8));
        assert!(model.detect(&bad).is_err());
    }
}

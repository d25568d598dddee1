//! The two-stage training pipeline: a small convolutional feature extractor,
//! detector training with source/target image pairs, per-clip feature
//! extraction into a cache, and the domain-adaptive action model trained on
//! that cache.
//!
//! Every stage shuffles with a generator derived from (seed, stage, epoch)
//! alone, so a run restored mid-way sees the same batch order as one that
//! never stopped, and checkpoints carry parameters plus optimizer buffers on
//! the f32 grid to make resumption bit-exact.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::action::{build_losses, ActionConfig, ActionModel, ClipFeatures, TupleMode, TuplePlan};
use crate::adversarial::{DomainLabel, GrlConfig, GrlSchedule};
use crate::autodiff::{ConvGeom, Params, Tape};
use crate::dataio::{CacheEntry, Checkpoint};
use crate::error::{Error, Result};
use crate::handdet::{BoxPrediction, DetImage, DetectorConfig, DetectorModel, UncertaintyMode};
use crate::handfeat::{
    concat_modalities, generate_hand_centric, global_avg_pool, BoundingBox, FeatureMap,
    HandFeatParams,
};
use crate::metrics::{average_predictions, PredictionRecord};
use crate::optim::{Optimizer, TrainSchedule};
use crate::synth::{mix, substream, ActionDataset, DetectorDataset, Split, SynthClipRecord};

const TAG_EXTRACTOR: u64 = 11;
const TAG_DETECTOR: u64 = 12;
const TAG_DA: u64 = 13;

/// Two 1×1 convolutional streams (one per modality) over the input maps,
/// with verb and noun linear heads on the pooled concatenation. The streams
/// are what the pipeline keeps; the heads only supervise them.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConfig {
    pub map_channels: usize,
    pub feat_channels: usize,
    pub num_verbs: usize,
    pub num_nouns: usize,
}

impl ExtractorConfig {
    pub fn desk() -> Self {
        ExtractorConfig { map_channels: 8, feat_channels: 16, num_verbs: 4, num_nouns: 6 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.map_channels == 0 || self.feat_channels == 0 {
            return Err(Error::InvalidConfig("zero extractor width".into()));
        }
        if self.num_verbs == 0 || self.num_nouns == 0 {
            return Err(Error::InvalidConfig("need at least one class per head".into()));
        }
        Ok(())
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

#[derive(Debug, Clone)]
pub struct ExtractorModel {
    cfg: ExtractorConfig,
    params: Params,
}

impl ExtractorModel {
    pub fn init(cfg: ExtractorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, f) = (cfg.map_channels, cfg.feat_channels);
        let mut params = Params::new();
        for stream in ["rgb", "flow"] {
            params.insert(&format!("{stream}.w"), xavier(&mut rng, c, f));
            params.insert(&format!("{stream}.b"), Array2::zeros((1, f)));
        }
        params.insert("verb.w", xavier(&mut rng, 2 * f, cfg.num_verbs));
        params.insert("verb.b", Array2::zeros((1, cfg.num_verbs)));
        params.insert("noun.w", xavier(&mut rng, 2 * f, cfg.num_nouns));
        params.insert("noun.b", Array2::zeros((1, cfg.num_nouns)));
        params.quantize_f32();
        Ok(ExtractorModel { cfg, params })
    }

    pub fn from_parts(cfg: ExtractorConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        let reference = ExtractorModel::init(cfg.clone(), 0)?;
        check_same_shapes(&reference.params, &params)?;
        Ok(ExtractorModel { cfg, params })
    }

    pub fn cfg(&self) -> &ExtractorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Evaluation-mode forward of one modality stream on one map:
    /// out[f, y, x] = relu(b[f] + Σ_c w[c, f]·map[c, y, x]).
    fn encode_with(&self, prefix: &str, map: &FeatureMap) -> Result<FeatureMap> {
        let v = map.values();
        let (c, h, w) = v.dim();
        if c != self.cfg.map_channels {
            return Err(Error::DimMismatch(format!(
                "map has {c} channels, extractor expects {}",
                self.cfg.map_channels
            )));
        }
        let wm = self.params.get(&format!("{prefix}.w"));
        let bm = self.params.get(&format!("{prefix}.b"));
        let f = self.cfg.feat_channels;
        let mut out = Array3::zeros((f, h, w));
        for fi in 0..f {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        acc += v[(ci, y, x)] * wm[(ci, fi)];
                    }
                    out[(fi, y, x)] = (acc + bm[(0, fi)]).max(0.0);
                }
            }
        }
        FeatureMap::new(out)
    }

    pub fn encode_rgb(&self, map: &FeatureMap) -> Result<FeatureMap> {
        self.encode_with("rgb", map)
    }

    pub fn encode_flow(&self, map: &FeatureMap) -> Result<FeatureMap> {
        self.encode_with("flow", map)
    }

    /// Joint verb+noun cross-entropy of one labelled batch, with gradients.
    pub fn batch_gradients(
        &self,
        clips: &[&SynthClipRecord],
    ) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
        if clips.is_empty() {
            return Err(Error::EmptyBatch("extractor batch".into()));
        }
        let t = clips[0].rgb.len();
        let (c, h, w) = clips[0].rgb[0].values().dim();
        if c != self.cfg.map_channels {
            return Err(Error::DimMismatch(format!(
                "maps have {c} channels, extractor expects {}",
                self.cfg.map_channels
            )));
        }
        let mut verbs = Vec::with_capacity(clips.len());
        let mut nouns = Vec::with_capacity(clips.len());
        for clip in clips {
            let (v, n) = clip
                .label
                .ok_or_else(|| Error::MissingLabels(format!("clip {} is unlabelled", clip.id)))?;
            if v >= self.cfg.num_verbs || n >= self.cfg.num_nouns {
                return Err(Error::InvalidConfig(format!("label ({v}, {n}) outside class counts")));
            }
            verbs.push(v);
            nouns.push(n);
            if clip.rgb.len() != t || clip.flow.len() != t {
                return Err(Error::DimMismatch(format!("clip {} frame count differs", clip.id)));
            }
            for m in clip.rgb.iter().chain(clip.flow.iter()) {
                if m.values().dim() != (c, h, w) {
                    return Err(Error::DimMismatch(format!("clip {} map shape differs", clip.id)));
                }
            }
        }
        let plane = c * h * w;
        let stack = |pick: &dyn Fn(&SynthClipRecord) -> &Vec<FeatureMap>| {
            let mut rows = Array2::zeros((clips.len() * t, plane));
            for (bi, clip) in clips.iter().enumerate() {
                for (ti, m) in pick(clip).iter().enumerate() {
                    for (j, &val) in m.values().iter().enumerate() {
                        rows[(bi * t + ti, j)] = val;
                    }
                }
            }
            rows
        };
        let mut tape = Tape::new();
        let vars = self.params.leaf_all(&mut tape);
        let geom = ConvGeom { in_c: c, in_h: h, in_w: w, kernel: 1, stride: 1, pad: 0 };
        let mut pooled = Vec::new();
        for (stream, rows) in [("rgb", stack(&|r| &r.rgb)), ("flow", stack(&|r| &r.flow))] {
            let x = tape.leaf(rows);
            let cells = tape.im2col(x, geom);
            let hmat = tape.matmul(cells, vars[&format!("{stream}.w")]);
            let hmat = tape.add_row_broadcast(hmat, vars[&format!("{stream}.b")]);
            let hmat = tape.relu(hmat);
            pooled.push(tape.mean_rows_grouped(hmat, t * h * w));
        }
        let feat = tape.concat_cols(pooled[0], pooled[1]);
        let mut head_loss = |name: &str, labels: &[usize]| {
            let logits = tape.matmul(feat, vars[&format!("{name}.w")]);
            let logits = tape.add_row_broadcast(logits, vars[&format!("{name}.b")]);
            let logp = tape.log_softmax(logits);
            tape.nll_mean(logp, labels)
        };
        let lv = head_loss("verb", &verbs);
        let ln = head_loss("noun", &nouns);
        let total = tape.add(lv, ln);
        tape.backward(total);
        let loss = tape.value(total)[(0, 0)];
        Ok((loss, self.params.grads_from(&tape, &vars)))
    }
}

/// A finished training stage: the model, mean loss per epoch, and the number
/// of optimizer steps taken.
pub struct ExtractorRun {
    pub model: ExtractorModel,
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

pub struct DetectorRun {
    pub model: DetectorModel,
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

pub struct DaRun {
    pub model: ActionModel,
    pub epoch_totals: Vec<f64>,
    pub steps: u64,
    pub checkpoint: Checkpoint,
}

fn batch_ranges(n: usize, batch: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        out.push((start, end));
        start = end;
    }
    out
}

/// Trains the two-stream extractor on labelled source training clips with
/// joint verb+noun cross-entropy.
pub fn train_feature_extractor(
    ds: &ActionDataset,
    cfg: ExtractorConfig,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<ExtractorRun> {
    schedule.validate()?;
    let clips: Vec<&SynthClipRecord> = ds
        .records
        .iter()
        .filter(|r| r.domain == DomainLabel::Source && r.split == Split::Train)
        .collect();
    if clips.is_empty() {
        return Err(Error::EmptyBatch("no source training clips".into()));
    }
    for clip in &clips {
        if clip.label.is_none() {
            return Err(Error::MissingLabels(format!("source clip {} lacks a label", clip.id)));
        }
    }
    let mut model = ExtractorModel::init(cfg, seed)?;
    let mut opt = Optimizer::from_schedule(schedule);
    let mut step = 0u64;
    let mut epoch_losses = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut substream(seed, TAG_EXTRACTOR, epoch as u64, 0));
        let mut sum = 0.0;
        let ranges = batch_ranges(clips.len(), schedule.batch_size);
        for &(a, b) in &ranges {
            let batch: Vec<&SynthClipRecord> = order[a..b].iter().map(|&i| clips[i]).collect();
            let (loss, grads) = model.batch_gradients(&batch)?;
            step += 1;
            opt.step(&mut model.params, &grads, schedule.lr_at(epoch), step);
            sum += loss;
        }
        epoch_losses.push(sum / ranges.len() as f64);
    }
    Ok(ExtractorRun { model, epoch_losses, steps: step })
}

/// Trains the hand detector on (source, target) image pairs. Every epoch
/// pairs each source image with two distinct shuffled target images, so the
/// pair count is twice the source count. With no target images the run
/// degenerates to plain supervised training on source.
pub fn train_hand_detector(
    ds: &DetectorDataset,
    cfg: DetectorConfig,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<DetectorRun> {
    schedule.validate()?;
    let pick = |domain, split| -> Vec<DetImage> {
        ds.records
            .iter()
            .filter(|r| r.domain == domain && r.split == split)
            .map(|r| DetImage { pixels: r.pixels.clone(), boxes: r.boxes.clone() })
            .collect()
    };
    let sources = pick(DomainLabel::Source, Split::Train);
    let targets = pick(DomainLabel::Target, Split::Train);
    if sources.is_empty() {
        return Err(Error::EmptyBatch("no source training images".into()));
    }
    for (i, s) in sources.iter().enumerate() {
        if s.boxes.is_empty() {
            return Err(Error::MissingLabels(format!("source image {i} has no boxes")));
        }
    }
    let mut model = DetectorModel::init(cfg, seed)?;
    let mut opt = Optimizer::from_schedule(schedule);
    let units = if targets.is_empty() { sources.len() } else { 2 * sources.len() };
    let steps_per_epoch = batch_ranges(units, schedule.batch_size).len() as u64;
    let total_steps = steps_per_epoch * schedule.epochs as u64;
    let mut step = 0u64;
    let mut epoch_losses = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let mut rng = substream(seed, TAG_DETECTOR, epoch as u64, 0);
        let mut pairs: Vec<(usize, Option<usize>)> = if targets.is_empty() {
            (0..sources.len()).map(|i| (i, None)).collect()
        } else {
            let mut tperm: Vec<usize> = (0..targets.len()).collect();
            tperm.shuffle(&mut rng);
            (0..2 * sources.len())
                .map(|k| (k % sources.len(), Some(tperm[k % tperm.len()])))
                .collect()
        };
        pairs.shuffle(&mut rng);
        let mut sum = 0.0;
        let ranges = batch_ranges(pairs.len(), schedule.batch_size);
        for &(a, b) in &ranges {
            let src: Vec<DetImage> = pairs[a..b].iter().map(|&(s, _)| sources[s].clone()).collect();
            let tgt: Vec<DetImage> = pairs[a..b]
                .iter()
                .filter_map(|&(_, t)| t.map(|i| targets[i].clone()))
                .collect();
            let progress = step as f64 / total_steps as f64;
            let (losses, grads) = model.step_gradients(&src, &tgt, progress)?;
            step += 1;
            opt.step(model.params_mut(), &grads, schedule.lr_at(epoch), step);
            sum += losses.total;
        }
        epoch_losses.push(sum / ranges.len() as f64);
    }
    Ok(DetectorRun { model, epoch_losses, steps: step })
}

/// How a clip's per-frame maps turn into one cached feature row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FeatureMode {
    /// Detector boxes plus pooled hand region and global context.
    HandCentric,
    /// Global average pooling only; no detector involved.
    RawGlobal,
}

impl FeatureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::HandCentric => "hand_centric",
            FeatureMode::RawGlobal => "raw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hand_centric" => Ok(FeatureMode::HandCentric),
            "raw" => Ok(FeatureMode::RawGlobal),
            other => Err(Error::InvalidConfig(format!("unknown feature mode {other:?}"))),
        }
    }
}

/// Single-channel rendering a detector consumes: the per-pixel channel mean,
/// re-centered to zero mean over the image. The hand signature is a constant
/// added to every channel, so it survives as a deviation from the image mean
/// while zero-mean class patterns cancel; re-centering removes any global
/// exposure offset the way a camera's auto-exposure would.
pub fn detector_rendering(map: &FeatureMap) -> Array3<f64> {
    let v = map.values();
    let (c, h, w) = v.dim();
    let mut out = Array3::from_shape_fn((1, h, w), |(_, y, x)| {
        (0..c).map(|ci| v[(ci, y, x)]).sum::<f64>() / c as f64
    });
    let mean = out.sum() / (h * w) as f64;
    out.mapv_inplace(|p| p - mean);
    out
}

/// Detector data built from clip-frame renderings, taking every
/// `frame_stride`-th frame: the detector trains on exactly the image family
/// it sees at extraction time. Source frames keep their ground-truth box;
/// target truth goes only to the sidecar.
pub fn rendering_detector_dataset(ds: &ActionDataset, frame_stride: usize) -> Result<DetectorDataset> {
    if frame_stride == 0 {
        return Err(Error::InvalidConfig("frame stride must be positive".into()));
    }
    let mut records = Vec::new();
    let mut sidecar = BTreeMap::new();
    for rec in &ds.records {
        for (t, map) in rec.rgb.iter().enumerate().step_by(frame_stride) {
            let id = format!("{}_f{t}", rec.id);
            let boxes = vec![rec.boxes[t].clone()];
            sidecar.insert(id.clone(), boxes.clone());
            records.push(crate::synth::SynthImageRecord {
                id,
                domain: rec.domain,
                split: rec.split,
                pixels: detector_rendering(map),
                boxes: if rec.domain == DomainLabel::Source { boxes } else { Vec::new() },
            });
        }
    }
    Ok(DetectorDataset { records, sidecar })
}

/// Runs the extractor (and, in hand-centric mode, the detector) over every
/// clip and returns one cache entry per clip with T feature rows, quantized
/// to the f32 grid so the on-disk cache reproduces them bit-exactly.
enum BoxSource<'a> {
    Pooled,
    Model(&'a DetectorModel),
    Table(&'a BTreeMap<String, Vec<BoxPrediction>>),
}

impl BoxSource<'_> {
    // frame boxes for hand-centric pooling; None means raw global pooling
    fn frame_boxes(&self, rec: &SynthClipRecord, t: usize, rgb: &FeatureMap) -> Result<Option<Vec<BoundingBox>>> {
        match self {
            BoxSource::Pooled => Ok(None),
            BoxSource::Model(d) => {
                let (_, h, w) = rgb.values().dim();
                let size = d.cfg().image_size;
                if h != size || w != size || d.cfg().image_channels != 1 {
                    return Err(Error::InvalidConfig(format!(
                        "detector expects 1×{size}×{size} images, maps are {h}×{w}"
                    )));
                }
                let rendering = detector_rendering(rgb);
                Ok(Some(d.detect(&rendering)?.into_iter().map(|p| p.bbox).collect()))
            }
            BoxSource::Table(table) => {
                let key = format!("{}_f{t}", rec.id);
                let preds = table.get(&key).ok_or_else(|| {
                    Error::InvalidConfig(format!("detection file has no entry for frame {key}"))
                })?;
                Ok(Some(preds.iter().map(|p| p.bbox.clone()).collect()))
            }
        }
    }
}

fn extract_with_source(
    records: &[SynthClipRecord],
    extractor: &ExtractorModel,
    boxes: BoxSource,
    hf: &HandFeatParams,
) -> Result<Vec<CacheEntry>> {
    if records.is_empty() {
        return Err(Error::EmptyBatch("no clips to extract".into()));
    }
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let mut rows: Vec<Array1<f64>> = Vec::with_capacity(rec.rgb.len());
        for (t, (rgb, flow)) in rec.rgb.iter().zip(&rec.flow).enumerate() {
            let enc_rgb = extractor.encode_rgb(rgb)?;
            let enc_flow = extractor.encode_flow(flow)?;
            let (v_rgb, v_flow) = match boxes.frame_boxes(rec, t, rgb)? {
                Some(bs) => (
                    generate_hand_centric(&enc_rgb, bs.as_slice(), 1.0, hf)?,
                    generate_hand_centric(&enc_flow, bs.as_slice(), 1.0, hf)?,
                ),
                None => (global_avg_pool(&enc_rgb), global_avg_pool(&enc_flow)),
            };
            let fused = concat_modalities(&v_rgb, &v_flow);
            rows.push(fused.values().mapv(|x| x as f32 as f64));
        }
        let d = rows[0].len();
        let mut features = Array2::zeros((rows.len(), d));
        for (t, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::DimMismatch(format!("clip {} varies in feature width", rec.id)));
            }
            features.row_mut(t).assign(row);
        }
        out.push(CacheEntry {
            clip_id: rec.id.clone(),
            domain: rec.domain,
            split: rec.split,
            label: rec.label,
            features,
        });
    }
    Ok(out)
}

pub fn extract_features(
    records: &[SynthClipRecord],
    extractor: &ExtractorModel,
    detector: Option<&DetectorModel>,
    hf: &HandFeatParams,
    mode: FeatureMode,
) -> Result<Vec<CacheEntry>> {
    let source = match (mode, detector) {
        (FeatureMode::HandCentric, Some(d)) => BoxSource::Model(d),
        (FeatureMode::HandCentric, None) => {
            return Err(Error::InvalidConfig("hand-centric extraction needs a detector".into()))
        }
        (FeatureMode::RawGlobal, _) => BoxSource::Pooled,
    };
    extract_with_source(records, extractor, source, hf)
}

/// Hand-centric extraction from a detection file instead of a live detector:
/// the table maps every frame id `{clip_id}_f{t}` to its predicted boxes.
pub fn extract_features_from_detections(
    records: &[SynthClipRecord],
    extractor: &ExtractorModel,
    detections: &BTreeMap<String, Vec<BoxPrediction>>,
    hf: &HandFeatParams,
) -> Result<Vec<CacheEntry>> {
    extract_with_source(records, extractor, BoxSource::Table(detections), hf)
}

fn check_cache_side(
    entries: &[CacheEntry],
    domain: DomainLabel,
    cfg: &ActionConfig,
    need_labels: bool,
) -> Result<Vec<ClipFeatures>> {
    if entries.is_empty() {
        return Err(Error::EmptyBatch(format!("no {} cache entries", domain.as_str())));
    }
    let mut clips = Vec::with_capacity(entries.len());
    for e in entries {
        if e.domain != domain {
            return Err(Error::InvalidConfig(format!(
                "clip {} is {}, expected {}",
                e.clip_id,
                e.domain.as_str(),
                domain.as_str()
            )));
        }
        if e.features.dim() != (cfg.num_seg, cfg.input_dim) {
            return Err(Error::DimMismatch(format!(
                "clip {} features are {:?}, model expects ({}, {})",
                e.clip_id,
                e.features.dim(),
                cfg.num_seg,
                cfg.input_dim
            )));
        }
        if need_labels && e.label.is_none() {
            return Err(Error::MissingLabels(format!("source clip {} lacks a label", e.clip_id)));
        }
        let label = if domain == DomainLabel::Source { e.label } else { None };
        clips.push(ClipFeatures::new(e.features.clone(), domain, label));
    }
    Ok(clips)
}

/// Trains the domain-adaptive action model on cached features. `resume`
/// continues from a checkpoint written by a run with the same config and
/// schedule; `stop_epoch` halts after that epoch so the checkpoint can be
/// resumed later. Batch order depends only on (seed, epoch), and the
/// returned checkpoint carries optimizer buffers, so stop-and-resume
/// reproduces the uninterrupted run bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn train_da_model(
    source: &[CacheEntry],
    target: &[CacheEntry],
    cfg: ActionConfig,
    schedule: &TrainSchedule,
    seed: u64,
    resume: Option<&Checkpoint>,
    stop_epoch: Option<usize>,
) -> Result<DaRun> {
    cfg.validate()?;
    schedule.validate()?;
    let src = check_cache_side(source, DomainLabel::Source, &cfg, true)?;
    let tgt = check_cache_side(target, DomainLabel::Target, &cfg, false)?;
    let steps_per_epoch = batch_ranges(src.len(), schedule.batch_size).len() as u64;
    let total_steps = steps_per_epoch * schedule.epochs as u64;
    let cfg_text = action_config_text(&cfg);
    let (mut model, mut opt, mut step) = match resume {
        None => (
            ActionModel::init(cfg.clone(), seed)?,
            Optimizer::from_schedule(schedule),
            0u64,
        ),
        Some(ck) => {
            if ck.config_text != cfg_text {
                return Err(Error::CheckpointMismatch(
                    "checkpoint was trained with a different config".into(),
                ));
            }
            if ck.step % steps_per_epoch != 0 {
                return Err(Error::CheckpointMismatch(format!(
                    "step {} is not an epoch boundary of {steps_per_epoch}",
                    ck.step
                )));
            }
            let (m, state) = action_from_checkpoint_parts(&cfg, ck)?;
            let mut o = Optimizer::from_schedule(schedule);
            o.import_state(state);
            (m, o, ck.step)
        }
    };
    let start_epoch = (step / steps_per_epoch) as usize;
    let end_epoch = stop_epoch.unwrap_or(schedule.epochs).min(schedule.epochs);
    let mut epoch_totals = Vec::new();
    for epoch in start_epoch..end_epoch {
        let mut rng = substream(seed, TAG_DA, epoch as u64, 0);
        let mut sidx: Vec<usize> = (0..src.len()).collect();
        sidx.shuffle(&mut rng);
        let mut tidx: Vec<usize> = (0..tgt.len()).collect();
        tidx.shuffle(&mut rng);
        let mut sum = 0.0;
        let ranges = batch_ranges(src.len(), schedule.batch_size);
        for (k, &(a, b)) in ranges.iter().enumerate() {
            let sb: Vec<ClipFeatures> = sidx[a..b].iter().map(|&i| src[i].clone()).collect();
            let tb: Vec<ClipFeatures> =
                (a..b).map(|j| tgt[tidx[j % tidx.len()]].clone()).collect();
            let progress = step as f64 / total_steps as f64;
            let tuple_seed = mix(seed ^ mix(TAG_DA) ^ mix(epoch as u64 ^ mix(k as u64)));
            let plan = TuplePlan::build(&cfg, sb.len() + tb.len(), tuple_seed);
            let mut tape = Tape::new();
            let vars = model.params.leaf_all(&mut tape);
            let built = build_losses(&mut tape, &vars, &cfg, &sb, &tb, progress, &plan, None)?;
            tape.backward(built.total);
            let grads = model.params.grads_from(&tape, &vars);
            sum += tape.value(built.total)[(0, 0)];
            step += 1;
            opt.step(&mut model.params, &grads, schedule.lr_at(epoch), step);
        }
        epoch_totals.push(sum / ranges.len() as f64);
    }
    let mut arrays: BTreeMap<String, Array2<f64>> =
        model.params.iter().map(|(n, v)| (n.clone(), v.clone())).collect();
    for (name, buf) in opt.export_state() {
        arrays.insert(format!("opt.{name}"), buf);
    }
    let checkpoint = Checkpoint { config_text: cfg_text, step, arrays };
    Ok(DaRun { model, epoch_totals, steps: step, checkpoint })
}

/// Evaluation-mode predictions for every cache entry, in input order.
pub fn predict_records(model: &ActionModel, entries: &[CacheEntry]) -> Result<Vec<PredictionRecord>> {
    entries
        .iter()
        .map(|e| {
            let (verb, noun) = model.predict(&e.features)?;
            Ok(PredictionRecord { clip_id: e.clip_id.clone(), verb, noun })
        })
        .collect()
}

/// Mean of every model's predicted distributions, per clip. Models must
/// agree on class counts.
pub fn ensemble_predict(models: &[ActionModel], entries: &[CacheEntry]) -> Result<Vec<PredictionRecord>> {
    let first = models
        .first()
        .ok_or_else(|| Error::EmptyBatch("no models to ensemble".into()))?;
    for m in models.iter().skip(1) {
        if m.cfg.num_verbs != first.cfg.num_verbs || m.cfg.num_nouns != first.cfg.num_nouns {
            return Err(Error::CheckpointMismatch("ensemble members disagree on class counts".into()));
        }
    }
    let runs: Vec<Vec<PredictionRecord>> = models
        .iter()
        .map(|m| predict_records(m, entries))
        .collect::<Result<_>>()?;
    average_predictions(&runs)
}

fn check_same_shapes(reference: &Params, got: &Params) -> Result<()> {
    let ref_shapes: BTreeMap<&String, (usize, usize)> =
        reference.iter().map(|(n, v)| (n, v.dim())).collect();
    let got_shapes: BTreeMap<&String, (usize, usize)> = got.iter().map(|(n, v)| (n, v.dim())).collect();
    if ref_shapes != got_shapes {
        return Err(Error::CheckpointMismatch(
            "parameter names or shapes do not match the config".into(),
        ));
    }
    Ok(())
}

fn params_from_arrays(arrays: &BTreeMap<String, Array2<f64>>) -> Params {
    let mut p = Params::new();
    for (name, v) in arrays {
        p.insert(name, v.clone());
    }
    p
}

fn fmt_grl(out: &mut String, grl: &GrlConfig) {
    out.push_str(&format!("grl_lambda={}\n", grl.lambda_value));
    match grl.schedule {
        GrlSchedule::Constant => out.push_str("grl_schedule=constant\n"),
        GrlSchedule::Ramp { steepness } => out.push_str(&format!("grl_schedule=ramp:{steepness}\n")),
    }
}

fn parse_grl(map: &BTreeMap<String, String>) -> Result<GrlConfig> {
    let lambda: f64 = text_field(map, "grl_lambda")?;
    let sched = req(map, "grl_schedule")?;
    let schedule = if sched == "constant" {
        GrlSchedule::Constant
    } else if let Some(s) = sched.strip_prefix("ramp:") {
        GrlSchedule::Ramp {
            steepness: s
                .parse()
                .map_err(|_| Error::CheckpointMismatch(format!("bad ramp steepness {s:?}")))?,
        }
    } else {
        return Err(Error::CheckpointMismatch(format!("unknown reversal schedule {sched:?}")));
    };
    GrlConfig::new(lambda, schedule)
}

fn text_lines(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::CheckpointMismatch(format!("bad config line {line:?}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

fn req<'m>(map: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::CheckpointMismatch(format!("config lacks {key}")))
}

fn text_field<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    req(map, key)?
        .parse()
        .map_err(|_| Error::CheckpointMismatch(format!("bad value for {key}")))
}

fn list_field(map: &BTreeMap<String, String>, key: &str) -> Result<Vec<usize>> {
    req(map, key)?
        .split(',')
        .map(|s| {
            s.parse()
                .map_err(|_| Error::CheckpointMismatch(format!("bad list entry {s:?} in {key}")))
        })
        .collect()
}

pub fn extractor_config_text(cfg: &ExtractorConfig) -> String {
    format!(
        "kind=extractor\nmap_channels={}\nfeat_channels={}\nnum_verbs={}\nnum_nouns={}\n",
        cfg.map_channels, cfg.feat_channels, cfg.num_verbs, cfg.num_nouns
    )
}

pub fn detector_config_text(cfg: &DetectorConfig) -> String {
    let mut s = String::from("kind=detector\n");
    s.push_str(&format!("num_levels={}\n", cfg.num_levels));
    let chans: Vec<String> = cfg.channels.iter().map(|c| c.to_string()).collect();
    s.push_str(&format!("channels={}\n", chans.join(",")));
    s.push_str(&format!("image_size={}\n", cfg.image_size));
    s.push_str(&format!("image_channels={}\n", cfg.image_channels));
    s.push_str(&format!("head_level={}\n", cfg.head_level));
    s.push_str(&format!("anchor_size={}\n", cfg.anchor_size));
    s.push_str(&format!("context_width={}\n", cfg.context_width));
    let mode = match cfg.uncertainty_mode {
        UncertaintyMode::AttentionOnCertain => "certain",
        UncertaintyMode::AttentionOnUncertain => "uncertain",
        UncertaintyMode::Off => "off",
    };
    s.push_str(&format!("uncertainty_mode={mode}\n"));
    s.push_str(&format!("domain_weight={}\n", cfg.domain_weight));
    fmt_grl(&mut s, &cfg.grl);
    s.push_str(&format!("confidence_threshold={}\n", cfg.confidence_threshold));
    s.push_str(&format!("max_detections={}\n", cfg.max_detections));
    s
}

pub fn action_config_text(cfg: &ActionConfig) -> String {
    let mut s = String::from("kind=action\n");
    s.push_str(&format!("num_seg={}\n", cfg.num_seg));
    s.push_str(&format!("feat_dim={}\n", cfg.feat_dim));
    s.push_str(&format!("input_dim={}\n", cfg.input_dim));
    s.push_str(&format!("num_verbs={}\n", cfg.num_verbs));
    s.push_str(&format!("num_nouns={}\n", cfg.num_nouns));
    let scales: Vec<String> = cfg.relation_scales.iter().map(|n| n.to_string()).collect();
    s.push_str(&format!("relation_scales={}\n", scales.join(",")));
    match cfg.tuples_per_scale {
        TupleMode::Exhaustive => s.push_str("tuples=exhaustive\n"),
        TupleMode::Sampled(n) => s.push_str(&format!("tuples=sampled:{n}\n")),
    }
    s.push_str(&format!("lambda_spatial={}\n", cfg.lambda_spatial));
    s.push_str(&format!("lambda_relation={}\n", cfg.lambda_relation));
    s.push_str(&format!("lambda_temporal={}\n", cfg.lambda_temporal));
    s.push_str(&format!("gamma_attentive={}\n", cfg.gamma_attentive));
    fmt_grl(&mut s, &cfg.grl);
    s
}

pub fn parse_extractor_config(text: &str) -> Result<ExtractorConfig> {
    let map = text_lines(text)?;
    if req(&map, "kind")? != "extractor" {
        return Err(Error::CheckpointMismatch("not an extractor checkpoint".into()));
    }
    let cfg = ExtractorConfig {
        map_channels: text_field(&map, "map_channels")?,
        feat_channels: text_field(&map, "feat_channels")?,
        num_verbs: text_field(&map, "num_verbs")?,
        num_nouns: text_field(&map, "num_nouns")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_detector_config(text: &str) -> Result<DetectorConfig> {
    let map = text_lines(text)?;
    if req(&map, "kind")? != "detector" {
        return Err(Error::CheckpointMismatch("not a detector checkpoint".into()));
    }
    let mode = match req(&map, "uncertainty_mode")? {
        "certain" => UncertaintyMode::AttentionOnCertain,
        "uncertain" => UncertaintyMode::AttentionOnUncertain,
        "off" => UncertaintyMode::Off,
        other => {
            return Err(Error::CheckpointMismatch(format!("unknown uncertainty mode {other:?}")))
        }
    };
    let cfg = DetectorConfig {
        num_levels: text_field(&map, "num_levels")?,
        channels: list_field(&map, "channels")?,
        image_size: text_field(&map, "image_size")?,
        image_channels: text_field(&map, "image_channels")?,
        head_level: text_field(&map, "head_level")?,
        anchor_size: text_field(&map, "anchor_size")?,
        context_width: text_field(&map, "context_width")?,
        uncertainty_mode: mode,
        domain_weight: text_field(&map, "domain_weight")?,
        grl: parse_grl(&map)?,
        confidence_threshold: text_field(&map, "confidence_threshold")?,
        max_detections: text_field(&map, "max_detections")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_action_config(text: &str) -> Result<ActionConfig> {
    let map = text_lines(text)?;
    if req(&map, "kind")? != "action" {
        return Err(Error::CheckpointMismatch("not an action-model checkpoint".into()));
    }
    let tuples = req(&map, "tuples")?;
    let tuples_per_scale = if tuples == "exhaustive" {
        TupleMode::Exhaustive
    } else if let Some(n) = tuples.strip_prefix("sampled:") {
        TupleMode::Sampled(
            n.parse()
                .map_err(|_| Error::CheckpointMismatch(format!("bad tuple count {n:?}")))?,
        )
    } else {
        return Err(Error::CheckpointMismatch(format!("unknown tuple mode {tuples:?}")));
    };
    let cfg = ActionConfig {
        num_seg: text_field(&map, "num_seg")?,
        feat_dim: text_field(&map, "feat_dim")?,
        input_dim: text_field(&map, "input_dim")?,
        num_verbs: text_field(&map, "num_verbs")?,
        num_nouns: text_field(&map, "num_nouns")?,
        relation_scales: list_field(&map, "relation_scales")?,
        tuples_per_scale,
        lambda_spatial: text_field(&map, "lambda_spatial")?,
        lambda_relation: text_field(&map, "lambda_relation")?,
        lambda_temporal: text_field(&map, "lambda_temporal")?,
        gamma_attentive: text_field(&map, "gamma_attentive")?,
        grl: parse_grl(&map)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn extractor_checkpoint(model: &ExtractorModel, step: u64) -> Checkpoint {
    Checkpoint {
        config_text: extractor_config_text(&model.cfg),
        step,
        arrays: model.params.iter().map(|(n, v)| (n.clone(), v.clone())).collect(),
    }
}

pub fn checkpoint_to_extractor(ck: &Checkpoint) -> Result<ExtractorModel> {
    let cfg = parse_extractor_config(&ck.config_text)?;
    ExtractorModel::from_parts(cfg, params_from_arrays(&ck.arrays))
}

pub fn detector_checkpoint(model: &DetectorModel, step: u64) -> Checkpoint {
    Checkpoint {
        config_text: detector_config_text(model.cfg()),
        step,
        arrays: model.params().iter().map(|(n, v)| (n.clone(), v.clone())).collect(),
    }
}

pub fn checkpoint_to_detector(ck: &Checkpoint) -> Result<DetectorModel> {
    let cfg = parse_detector_config(&ck.config_text)?;
    let reference = DetectorModel::init(cfg.clone(), 0)?;
    let params = params_from_arrays(&ck.arrays);
    check_same_shapes(reference.params(), &params)?;
    DetectorModel::from_parts(cfg, params)
}

/// Splits a checkpoint's arrays into model parameters and optimizer buffers
/// (the `opt.`-prefixed entries).
fn action_from_checkpoint_parts(
    cfg: &ActionConfig,
    ck: &Checkpoint,
) -> Result<(ActionModel, BTreeMap<String, Array2<f64>>)> {
    let mut params = Params::new();
    let mut state = BTreeMap::new();
    for (name, v) in &ck.arrays {
        match name.strip_prefix("opt.") {
            Some(rest) => {
                state.insert(rest.to_string(), v.clone());
            }
            None => params.insert(name, v.clone()),
        }
    }
    let reference = ActionModel::init(cfg.clone(), 0)?;
    check_same_shapes(&reference.params, &params)?;
    Ok((ActionModel::from_parts(cfg.clone(), params)?, state))
}

pub fn checkpoint_to_action(ck: &Checkpoint) -> Result<ActionModel> {
    let cfg = parse_action_config(&ck.config_text)?;
    Ok(action_from_checkpoint_parts(&cfg, ck)?.0)
}

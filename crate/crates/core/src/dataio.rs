//! On-disk formats: tensor payloads, dataset manifests with sealed truth
//! sidecars, feature caches, and training checkpoints.
//!
//! Numeric payloads hold 32-bit little-endian floats behind a dimension
//! header; everything that reaches disk is already on the f32 grid, so write
//! followed by read reproduces in-memory values bit-exactly. Manifests and
//! sidecars are tab-separated text with full-precision decimal floats. All
//! writes go through a temp file and an atomic rename, so readers never see a
//! partial file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::adversarial::{Distribution, DomainLabel};
use crate::error::{Error, Result};
use crate::handdet::BoxPrediction;
use crate::metrics::PredictionRecord;
use crate::handfeat::{BoundingBox, CoordFrame, FeatureMap};
use crate::synth::{ActionDataset, DetectorDataset, Split, SynthClipRecord, SynthImageRecord};

const TENSOR_MAGIC: &[u8; 8] = b"HSTNSR1\n";
const CHECKPOINT_MAGIC: &[u8; 8] = b"HSCKPT1\n";

/// Dense row-major f32 block with explicit dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::DimMismatch(format!(
                "tensor dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_array2(a: &Array2<f64>) -> Self {
        let (r, c) = a.dim();
        Tensor {
            dims: vec![r, c],
            data: a.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        if self.dims.len() != 2 {
            return Err(Error::DimMismatch(format!("expected 2-d tensor, got {:?}", self.dims)));
        }
        let (r, c) = (self.dims[0], self.dims[1]);
        Ok(Array2::from_shape_fn((r, c), |(i, j)| self.data[i * c + j] as f64))
    }

    pub fn from_array3(a: &Array3<f64>) -> Self {
        let (d0, d1, d2) = a.dim();
        Tensor {
            dims: vec![d0, d1, d2],
            data: a.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_array3(&self) -> Result<Array3<f64>> {
        if self.dims.len() != 3 {
            return Err(Error::DimMismatch(format!("expected 3-d tensor, got {:?}", self.dims)));
        }
        let (d0, d1, d2) = (self.dims[0], self.dims[1], self.dims[2]);
        Ok(Array3::from_shape_fn((d0, d1, d2), |(i, j, k)| {
            self.data[(i * d1 + j) * d2 + k] as f64
        }))
    }
}

/// Writes via a sibling temp file and rename, so the path never holds a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("{v} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Reader { buf, pos: 0, path }
    }

    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::format(self.path.display().to_string(), msg))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return self.fail(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let b = self.take(count.checked_mul(4).ok_or_else(|| {
            Error::format(self.path.display().to_string(), "length overflow")
        })?)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return self.fail(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

pub fn write_tensor_file(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(TENSOR_MAGIC);
    put_u32(&mut buf, tensors.len())?;
    for t in tensors {
        put_u32(&mut buf, t.dims.len())?;
        for &d in &t.dims {
            put_u32(&mut buf, d)?;
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<Tensor>> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf, path);
    if r.take(8)? != TENSOR_MAGIC {
        return r.fail("not a tensor file");
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let ndim = r.u32()?;
        if ndim > 8 {
            return r.fail(format!("implausible rank {ndim}"));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()?);
        }
        let len: usize = dims.iter().product();
        let data = r.f32s(len)?;
        out.push(Tensor { dims, data });
    }
    r.done()?;
    Ok(out)
}

/// Trained state: the flat config text it was built with, the global step
/// counter, and every named parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub step: u64,
    pub arrays: BTreeMap<String, Array2<f64>>,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, ckpt.config_text.len())?;
    buf.extend_from_slice(ckpt.config_text.as_bytes());
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    put_u32(&mut buf, ckpt.arrays.len())?;
    for (name, a) in &ckpt.arrays {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        let (rows, cols) = a.dim();
        put_u32(&mut buf, rows)?;
        put_u32(&mut buf, cols)?;
        for &v in a.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf, path);
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointMismatch(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let cfg_len = r.u32()?;
    let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| Error::format(path.display().to_string(), "config text not utf-8"))?;
    let step = r.u64()?;
    let count = r.u32()?;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::format(path.display().to_string(), "array name not utf-8"))?;
        let rows = r.u32()?;
        let cols = r.u32()?;
        let data = r.f32s(rows * cols)?;
        let a = Array2::from_shape_fn((rows, cols), |(i, j)| data[i * cols + j] as f64);
        if arrays.insert(name.clone(), a).is_some() {
            return Err(Error::CheckpointMismatch(format!("duplicate array {name}")));
        }
    }
    r.done()?;
    Ok(Checkpoint { config_text, step, arrays })
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(Error::InvalidConfig(format!("record id {id:?} not filesystem-safe")));
    }
    Ok(())
}

fn label_str(label: Option<(usize, usize)>) -> String {
    match label {
        Some((v, n)) => format!("{v},{n}"),
        None => "-".into(),
    }
}

fn parse_label(s: &str, path: &Path) -> Result<Option<(usize, usize)>> {
    if s == "-" {
        return Ok(None);
    }
    let (v, n) = s
        .split_once(',')
        .ok_or_else(|| Error::format(path.display().to_string(), format!("bad label {s:?}")))?;
    let parse = |x: &str| {
        x.parse::<usize>()
            .map_err(|_| Error::format(path.display().to_string(), format!("bad label {s:?}")))
    };
    Ok(Some((parse(v)?, parse(n)?)))
}

fn manifest_fields<'l>(line: &'l str, n: usize, path: &Path) -> Result<Vec<&'l str>> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != n {
        return Err(Error::format(
            path.display().to_string(),
            format!("expected {n} tab-separated fields, got {}", fields.len()),
        ));
    }
    Ok(fields)
}

fn boxes_str(boxes: &[BoundingBox]) -> String {
    if boxes.is_empty() {
        return "-".into();
    }
    boxes
        .iter()
        .map(|b| format!("{} {} {} {}", b.x1, b.y1, b.x2, b.y2))
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_boxes(s: &str, path: &Path) -> Result<Vec<BoundingBox>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for part in s.split(';') {
        let nums: Vec<f64> = part
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::format(path.display().to_string(), format!("bad box {part:?}")))
            })
            .collect::<Result<_>>()?;
        if nums.len() != 4 {
            return Err(Error::format(path.display().to_string(), format!("bad box {part:?}")));
        }
        out.push(BoundingBox::new(nums[0], nums[1], nums[2], nums[3], CoordFrame::Image)?);
    }
    Ok(out)
}

fn payload_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("payloads").join(format!("{id}.bin"))
}

/// Lays out `dir/manifest.tsv`, `dir/sidecar.tsv`, and one payload per record
/// holding the two modality stacks (T×C×H×W each) and the per-frame boxes.
/// The manifest shows labels only where the records carry them; the sidecar
/// holds the truth for every record.
pub fn write_action_dataset(dir: &Path, ds: &ActionDataset) -> Result<()> {
    let mut manifest = String::from("# id\tdomain\tsplit\tlabel\tpayload\n");
    for rec in &ds.records {
        check_id(&rec.id)?;
        let t = rec.rgb.len();
        if t == 0 || rec.flow.len() != t || rec.boxes.len() != t {
            return Err(Error::DimMismatch(format!(
                "record {} has inconsistent frame counts",
                rec.id
            )));
        }
        let (c, h, w) = rec.rgb[0].values().dim();
        let stack = |maps: &[FeatureMap]| -> Result<Tensor> {
            let mut data = Vec::with_capacity(t * c * h * w);
            for m in maps {
                if m.values().dim() != (c, h, w) {
                    return Err(Error::DimMismatch(format!("record {} mixes map shapes", rec.id)));
                }
                data.extend(m.values().iter().map(|&v| v as f32));
            }
            Tensor::new(vec![t, c, h, w], data)
        };
        let mut box_data = Vec::with_capacity(t * 4);
        for b in &rec.boxes {
            box_data.extend([b.x1 as f32, b.y1 as f32, b.x2 as f32, b.y2 as f32]);
        }
        let tensors = [stack(&rec.rgb)?, stack(&rec.flow)?, Tensor::new(vec![t, 4], box_data)?];
        write_tensor_file(&payload_path(dir, &rec.id), &tensors)?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\tpayloads/{}.bin\n",
            rec.id,
            rec.domain.as_str(),
            rec.split.as_str(),
            label_str(rec.label),
            rec.id
        ));
    }
    write_atomic(&dir.join("manifest.tsv"), manifest.as_bytes())?;
    let mut sidecar = String::from("# id\tverb,noun\n");
    for (id, &(v, n)) in &ds.sidecar {
        sidecar.push_str(&format!("{id}\t{v},{n}\n"));
    }
    write_atomic(&dir.join("sidecar.tsv"), sidecar.as_bytes())
}

pub fn read_action_dataset(dir: &Path) -> Result<ActionDataset> {
    let manifest_path = dir.join("manifest.tsv");
    let text = fs::read_to_string(&manifest_path)?;
    let mut records = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let f = manifest_fields(line, 5, &manifest_path)?;
        let id = f[0].to_string();
        let payload = read_tensor_file(&dir.join(f[4]))?;
        if payload.len() != 3 {
            return Err(Error::format(
                manifest_path.display().to_string(),
                format!("record {id} payload has {} tensors, expected 3", payload.len()),
            ));
        }
        let unstack = |tensor: &Tensor| -> Result<Vec<FeatureMap>> {
            if tensor.dims.len() != 4 {
                return Err(Error::DimMismatch(format!("record {id} map stack not 4-d")));
            }
            let (t, c, h, w) = (tensor.dims[0], tensor.dims[1], tensor.dims[2], tensor.dims[3]);
            let plane = c * h * w;
            (0..t)
                .map(|ti| {
                    let a = Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
                        tensor.data[ti * plane + (ci * h + y) * w + x] as f64
                    });
                    FeatureMap::new(a)
                })
                .collect()
        };
        let rgb = unstack(&payload[0])?;
        let flow = unstack(&payload[1])?;
        let bt = &payload[2];
        if bt.dims.len() != 2 || bt.dims[1] != 4 || bt.dims[0] != rgb.len() {
            return Err(Error::DimMismatch(format!("record {id} box tensor malformed")));
        }
        let boxes = (0..bt.dims[0])
            .map(|i| {
                BoundingBox::new(
                    bt.data[i * 4] as f64,
                    bt.data[i * 4 + 1] as f64,
                    bt.data[i * 4 + 2] as f64,
                    bt.data[i * 4 + 3] as f64,
                    CoordFrame::Image,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(SynthClipRecord {
            id,
            domain: DomainLabel::parse(f[1])?,
            split: Split::parse(f[2])?,
            label: parse_label(f[3], &manifest_path)?,
            rgb,
            flow,
            boxes,
        });
    }
    let sidecar_path = dir.join("sidecar.tsv");
    let text = fs::read_to_string(&sidecar_path)?;
    let mut sidecar = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let f = manifest_fields(line, 2, &sidecar_path)?;
        let label = parse_label(f[1], &sidecar_path)?
            .ok_or_else(|| Error::format(sidecar_path.display().to_string(), "sidecar row without label"))?;
        sidecar.insert(f[0].to_string(), label);
    }
    Ok(ActionDataset { records, sidecar })
}

/// Same layout as the action dataset: manifest, truth sidecar, and one
/// payload per image holding the pixel grid and the emitted boxes.
pub fn write_detector_dataset(dir: &Path, ds: &DetectorDataset) -> Result<()> {
    let mut manifest = String::from("# id\tdomain\tsplit\tboxes\tpayload\n");
    for rec in &ds.records {
        check_id(&rec.id)?;
        let mut box_data = Vec::with_capacity(rec.boxes.len() * 4);
        for b in &rec.boxes {
            box_data.extend([b.x1 as f32, b.y1 as f32, b.x2 as f32, b.y2 as f32]);
        }
        let tensors = [
            Tensor::from_array3(&rec.pixels),
            Tensor::new(vec![rec.boxes.len(), 4], box_data)?,
        ];
        write_tensor_file(&payload_path(dir, &rec.id), &tensors)?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\tpayloads/{}.bin\n",
            rec.id,
            rec.domain.as_str(),
            rec.split.as_str(),
            rec.boxes.len(),
            rec.id
        ));
    }
    write_atomic(&dir.join("manifest.tsv"), manifest.as_bytes())?;
    let mut sidecar = String::from("# id\tboxes\n");
    for (id, boxes) in &ds.sidecar {
        sidecar.push_str(&format!("{id}\t{}\n", boxes_str(boxes)));
    }
    write_atomic(&dir.join("sidecar.tsv"), sidecar.as_bytes())
}

pub fn read_detector_dataset(dir: &Path) -> Result<DetectorDataset> {
    let manifest_path = dir.join("manifest.tsv");
    let text = fs::read_to_string(&manifest_path)?;
    let mut records = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let f = manifest_fields(line, 5, &manifest_path)?;
        let id = f[0].to_string();
        let payload = read_tensor_file(&dir.join(f[4]))?;
        if payload.len() != 2 {
            return Err(Error::format(
                manifest_path.display().to_string(),
                format!("record {id} payload has {} tensors, expected 2", payload.len()),
            ));
        }
        let pixels = payload[0].to_array3()?;
        let bt = &payload[1];
        if bt.dims.len() != 2 || bt.dims[1] != 4 {
            return Err(Error::DimMismatch(format!("record {id} box tensor malformed")));
        }
        let boxes = (0..bt.dims[0])
            .map(|i| {
                BoundingBox::new(
                    bt.data[i * 4] as f64,
                    bt.data[i * 4 + 1] as f64,
                    bt.data[i * 4 + 2] as f64,
                    bt.data[i * 4 + 3] as f64,
                    CoordFrame::Image,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(SynthImageRecord {
            id,
            domain: DomainLabel::parse(f[1])?,
            split: Split::parse(f[2])?,
            pixels,
            boxes,
        });
    }
    let sidecar_path = dir.join("sidecar.tsv");
    let text = fs::read_to_string(&sidecar_path)?;
    let mut sidecar = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let f = manifest_fields(line, 2, &sidecar_path)?;
        sidecar.insert(f[0].to_string(), parse_boxes(f[1], &sidecar_path)?);
    }
    Ok(DetectorDataset { records, sidecar })
}

/// One clip's extracted features: T rows of the fused per-frame vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub clip_id: String,
    pub domain: DomainLabel,
    pub split: Split,
    pub label: Option<(usize, usize)>,
    pub features: Array2<f64>,
}

pub fn write_feature_cache(dir: &Path, entries: &[CacheEntry]) -> Result<()> {
    let mut manifest = String::from("# id\tdomain\tsplit\tlabel\tpayload\n");
    for e in entries {
        check_id(&e.clip_id)?;
        write_tensor_file(&payload_path(dir, &e.clip_id), &[Tensor::from_array2(&e.features)])?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\tpayloads/{}.bin\n",
            e.clip_id,
            e.domain.as_str(),
            e.split.as_str(),
            label_str(e.label),
            e.clip_id
        ));
    }
    write_atomic(&dir.join("cache.tsv"), manifest.as_bytes())
}

pub fn read_feature_cache(dir: &Path) -> Result<Vec<CacheEntry>> {
    let manifest_path = dir.join("cache.tsv");
    let text = fs::read_to_string(&manifest_path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let f = manifest_fields(line, 5, &manifest_path)?;
        let payload = read_tensor_file(&dir.join(f[4]))?;
        if payload.len() != 1 {
            return Err(Error::format(
                manifest_path.display().to_string(),
                format!("cache entry {} payload has {} tensors, expected 1", f[0], payload.len()),
            ));
        }
        out.push(CacheEntry {
            clip_id: f[0].to_string(),
            domain: DomainLabel::parse(f[1])?,
            split: Split::parse(f[2])?,
            label: parse_label(f[3], &manifest_path)?,
            features: payload[0].to_array2()?,
        });
    }
    Ok(out)
}

/// One line per clip: `id<TAB>verb probs<TAB>noun probs`, probabilities
/// comma-joined in shortest round-trip decimal, so read after write restores
/// the distributions bit-exactly.
pub fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    let mut text = String::from("# clip_id\tverb_probs\tnoun_probs\n");
    let join = |d: &Distribution| {
        d.probs().iter().map(|p| p.to_string()).collect::<Vec<_>>().join(",")
    };
    for p in preds {
        check_id(&p.clip_id)?;
        text.push_str(&format!("{}\t{}\t{}\n", p.clip_id, join(&p.verb), join(&p.noun)));
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let parse_dist = |s: &str| -> Result<Distribution> {
        let probs: Vec<f64> = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::format(path.display().to_string(), format!("bad probability {t:?}")))
            })
            .collect::<Result<_>>()?;
        Distribution::new(probs.into())
    };
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let fields = manifest_fields(line, 3, path)?;
        out.push(PredictionRecord {
            clip_id: fields[0].to_string(),
            verb: parse_dist(fields[1])?,
            noun: parse_dist(fields[2])?,
        });
    }
    if out.is_empty() {
        return Err(Error::format(path.display().to_string(), "no prediction rows"));
    }
    Ok(out)
}

/// One line per image: `id<TAB>detections`, each detection
/// `x1 y1 x2 y2 confidence`, detections joined by `;`, `-` when the image has
/// none. Feature extraction accepts this file in place of running a detector.
pub fn write_detections(path: &Path, dets: &BTreeMap<String, Vec<BoxPrediction>>) -> Result<()> {
    let mut text = String::from("# image_id\tx1 y1 x2 y2 confidence;...\n");
    for (id, preds) in dets {
        check_id(id)?;
        let cell = if preds.is_empty() {
            "-".into()
        } else {
            preds
                .iter()
                .map(|p| {
                    format!("{} {} {} {} {}", p.bbox.x1, p.bbox.y1, p.bbox.x2, p.bbox.y2, p.confidence)
                })
                .collect::<Vec<_>>()
                .join(";")
        };
        text.push_str(&format!("{id}\t{cell}\n"));
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_detections(path: &Path) -> Result<BTreeMap<String, Vec<BoxPrediction>>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let fields = manifest_fields(line, 2, path)?;
        let mut preds = Vec::new();
        if fields[1] != "-" {
            for part in fields[1].split(';') {
                let nums: Vec<f64> = part
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<f64>().map_err(|_| {
                            Error::format(path.display().to_string(), format!("bad detection {part:?}"))
                        })
                    })
                    .collect::<Result<_>>()?;
                if nums.len() != 5 {
                    return Err(Error::format(
                        path.display().to_string(),
                        format!("bad detection {part:?}"),
                    ));
                }
                preds.push(BoxPrediction {
                    bbox: BoundingBox::new(nums[0], nums[1], nums[2], nums[3], CoordFrame::Image)?,
                    confidence: nums[4],
                });
            }
        }
        if out.insert(fields[0].to_string(), preds).is_some() {
            return Err(Error::format(
                path.display().to_string(),
                format!("duplicate image id {:?}", fields[0]),
            ));
        }
    }
    Ok(out)
}

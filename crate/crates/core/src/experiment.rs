//! End-to-end experiment driver: synthesize data, train the extractor and
//! the hand detector once per seed, then train and evaluate one adaptive
//! action model per (variant, seed). Stage-1 artifacts are shared across
//! variants so ablations differ only in the knobs under test.

use std::collections::BTreeMap;
use std::path::Path;

use crate::action::ActionConfig;
use crate::dataio::{write_checkpoint, write_feature_cache};
use crate::error::{Error, Result};
use crate::handdet::DetectorConfig;
use crate::handfeat::HandFeatParams;
use crate::adversarial::DomainLabel;
use crate::metrics::{evaluate, MetricsReport};
use crate::optim::{OptimizerKind, TrainSchedule};
use crate::synth::{gen_action_dataset, Split, SynthConfig};
use crate::train::{
    detector_checkpoint, extract_features, extractor_checkpoint, predict_records,
    train_da_model, train_feature_extractor, train_hand_detector, FeatureMode,
};

/// One ablation arm: whether the adversarial losses are on, and which
/// feature mode feeds the action model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub adversarial: bool,
    pub features: FeatureMode,
}

pub const VARIANT_NAMES: [&str; 4] =
    ["source_only_raw", "source_only_hand", "full_da_raw", "full_da_hand"];

impl Variant {
    pub fn parse(name: &str) -> Result<Variant> {
        let (adversarial, features) = match name {
            "source_only_raw" => (false, FeatureMode::RawGlobal),
            "source_only_hand" => (false, FeatureMode::HandCentric),
            "full_da_raw" => (true, FeatureMode::RawGlobal),
            "full_da_hand" => (true, FeatureMode::HandCentric),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown variant {other:?}, expected one of {VARIANT_NAMES:?}"
                )))
            }
        };
        Ok(Variant { adversarial, features })
    }

    pub fn name(&self) -> &'static str {
        match (self.adversarial, self.features) {
            (false, FeatureMode::RawGlobal) => "source_only_raw",
            (false, FeatureMode::HandCentric) => "source_only_hand",
            (true, FeatureMode::RawGlobal) => "full_da_raw",
            (true, FeatureMode::HandCentric) => "full_da_hand",
        }
    }
}

/// Every knob of the full pipeline. `action.input_dim` is overwritten per
/// run from the cache width, so both feature modes share one config.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    pub extractor: crate::train::ExtractorConfig,
    pub extractor_schedule: TrainSchedule,
    pub detector: DetectorConfig,
    pub detector_schedule: TrainSchedule,
    /// Every n-th clip frame becomes a detector training rendering.
    pub detector_frame_stride: usize,
    pub action: ActionConfig,
    pub da_schedule: TrainSchedule,
    pub handfeat: HandFeatParams,
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
}

impl PipelineConfig {
    /// Sizes chosen so the whole four-variant, three-seed sweep finishes in
    /// minutes on one core. The target shift is affine-only: with channel
    /// permutation on, marginal alignment has no preference for the correct
    /// class correspondence and adaptation cannot work unsupervised.
    pub fn desk_scale() -> Self {
        let mut synth = SynthConfig::desk();
        synth.box_min = 8.0;
        synth.box_max = 14.0;
        synth.distractors = 8;
        synth.channel_permutation = false;
        synth.scale_range = (0.7, 1.4);
        synth.offset_magnitude = 0.25;
        PipelineConfig {
            extractor: crate::train::ExtractorConfig::desk(),
            extractor_schedule: TrainSchedule {
                optimizer: OptimizerKind::Adam,
                learning_rate: 0.01,
                decay_factor: 0.1,
                decay_interval: 25,
                epochs: 30,
                momentum: 0.0,
                weight_decay: 1e-4,
                batch_size: 8,
            },
            detector: {
                let mut det = DetectorConfig::desk();
                det.domain_weight = 0.5;
                det.grl = crate::adversarial::GrlConfig::constant(0.3).expect("grl");
                det.confidence_threshold = 0.1;
                det
            },
            detector_schedule: TrainSchedule {
                optimizer: OptimizerKind::Adam,
                learning_rate: 1e-3,
                decay_factor: 0.1,
                decay_interval: 10,
                epochs: 14,
                momentum: 0.0,
                weight_decay: 0.0,
                batch_size: 8,
            },
            detector_frame_stride: 2,
            action: ActionConfig {
                num_seg: synth.num_frames,
                feat_dim: 64,
                input_dim: 32,
                num_verbs: synth.num_verbs,
                num_nouns: synth.num_nouns,
                relation_scales: (2..=8).collect(),
                tuples_per_scale: crate::action::TupleMode::Exhaustive,
                lambda_spatial: 0.75,
                lambda_relation: 0.5,
                lambda_temporal: 0.75,
                gamma_attentive: 0.003,
                grl: crate::adversarial::GrlConfig::new(
                    0.3,
                    crate::adversarial::GrlSchedule::Ramp { steepness: 10.0 },
                )
                .expect("ramp grl"),
            },
            da_schedule: TrainSchedule {
                optimizer: OptimizerKind::Sgd,
                learning_rate: 0.02,
                decay_factor: 0.1,
                decay_interval: 120,
                epochs: 150,
                momentum: 0.0,
                weight_decay: 1e-3,
                batch_size: 4,
            },
            handfeat: HandFeatParams::default(),
            variants: VARIANT_NAMES.iter().map(|s| s.to_string()).collect(),
            seeds: vec![1, 2, 3],
            synth,
        }
    }

    /// Published-scale schedules: larger data, longer runs, sampled relation
    /// tuples. Provided for parity, not for interactive use.
    pub fn paper_scale() -> Self {
        let mut cfg = Self::desk_scale();
        cfg.synth.clips_per_split = 64;
        cfg.synth.num_frames = 20;
        cfg.synth.detector_source_images = 96;
        cfg.synth.detector_eval_images = 48;
        cfg.extractor.feat_channels = 512;
        cfg.extractor_schedule = TrainSchedule {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.01,
            decay_factor: 0.1,
            decay_interval: 20,
            epochs: 60,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 16,
        };
        cfg.detector_schedule = TrainSchedule {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            decay_factor: 0.1,
            decay_interval: 4,
            epochs: 10,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 16,
        };
        cfg.action.num_seg = 20;
        cfg.action.feat_dim = 1024;
        cfg.action.input_dim = 1024;
        cfg.action.relation_scales = (2..=20).collect();
        cfg.action.tuples_per_scale = crate::action::TupleMode::Sampled(3);
        cfg.da_schedule = TrainSchedule {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 3e-3,
            decay_factor: 0.1,
            decay_interval: 10,
            epochs: 30,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 16,
        };
        cfg
    }

    pub fn scale_preset(name: &str) -> Result<Self> {
        match name {
            "desk-scale" => Ok(Self::desk_scale()),
            "paper-scale" => Ok(Self::paper_scale()),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset {other:?}, expected \"desk-scale\" or \"paper-scale\""
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.extractor.validate()?;
        self.extractor_schedule.validate()?;
        self.detector.validate()?;
        self.detector_schedule.validate()?;
        self.action.validate()?;
        self.da_schedule.validate()?;
        self.handfeat.validate()?;
        if self.extractor.map_channels != self.synth.map_channels {
            return Err(Error::InvalidConfig(format!(
                "extractor reads {} channels but clips carry {}",
                self.extractor.map_channels, self.synth.map_channels
            )));
        }
        if self.extractor.num_verbs != self.synth.num_verbs
            || self.extractor.num_nouns != self.synth.num_nouns
        {
            return Err(Error::InvalidConfig("extractor heads disagree with label space".into()));
        }
        if self.action.num_verbs != self.synth.num_verbs
            || self.action.num_nouns != self.synth.num_nouns
        {
            return Err(Error::InvalidConfig("action heads disagree with label space".into()));
        }
        if self.action.num_seg != self.synth.num_frames {
            return Err(Error::InvalidConfig(format!(
                "action model expects {} segments but clips have {} frames",
                self.action.num_seg, self.synth.num_frames
            )));
        }
        if self.detector.image_size != self.synth.detector_image_size {
            return Err(Error::InvalidConfig(format!(
                "detector expects {}px images but the benchmark emits {}px",
                self.detector.image_size, self.synth.detector_image_size
            )));
        }
        let hand = self.variants.iter().any(|v| {
            Variant::parse(v).map(|p| p.features == FeatureMode::HandCentric).unwrap_or(false)
        });
        if hand && (self.detector.image_size != self.synth.map_size || self.detector.image_channels != 1)
        {
            return Err(Error::InvalidConfig(format!(
                "hand-centric extraction renders {0}\u{d7}{0} maps to one channel, detector wants {1} channel(s) at {2}px",
                self.synth.map_size, self.detector.image_channels, self.detector.image_size
            )));
        }
        if self.variants.is_empty() {
            return Err(Error::InvalidConfig("no variants selected".into()));
        }
        for v in &self.variants {
            Variant::parse(v)?;
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("no seeds selected".into()));
        }
        if self.detector_frame_stride == 0 {
            return Err(Error::InvalidConfig("detector frame stride must be positive".into()));
        }
        Ok(())
    }
}

/// Metrics for one trained model.
#[derive(Debug, Clone)]
pub struct ExperimentRow {
    pub variant: String,
    pub seed: u64,
    pub metrics: MetricsReport,
}

/// All rows of a sweep plus per-variant means, in config order.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rows: Vec<ExperimentRow>,
    pub means: Vec<(String, MetricsReport)>,
}

fn mean_report(rows: &[&MetricsReport]) -> MetricsReport {
    let n = rows.len() as f64;
    let sum = |f: fn(&MetricsReport) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    MetricsReport {
        verb_top1: sum(|r| r.verb_top1),
        verb_top5: sum(|r| r.verb_top5),
        noun_top1: sum(|r| r.noun_top1),
        noun_top5: sum(|r| r.noun_top5),
        action_top1: sum(|r| r.action_top1),
        action_top5: sum(|r| r.action_top5),
    }
}

impl ExperimentReport {
    fn from_rows(rows: Vec<ExperimentRow>, variants: &[String]) -> Self {
        let means = variants
            .iter()
            .map(|v| {
                let picked: Vec<&MetricsReport> =
                    rows.iter().filter(|r| &r.variant == v).map(|r| &r.metrics).collect();
                (v.clone(), mean_report(&picked))
            })
            .collect();
        ExperimentReport { rows, means }
    }

    pub fn mean_for(&self, variant: &str) -> Option<&MetricsReport> {
        self.means.iter().find(|(v, _)| v == variant).map(|(_, m)| m)
    }

    /// Text table, one row per (variant, seed) plus a mean row per variant.
    pub fn render_table(&self) -> String {
        let mut out = String::from(
            "variant            seed   verb@1   verb@5   noun@1   noun@5   act@1    act@5\n",
        );
        let line = |out: &mut String, name: &str, seed: &str, m: &MetricsReport| {
            out.push_str(&format!(
                "{name:<18} {seed:>4} {:8.2} {:8.2} {:8.2} {:8.2} {:8.2} {:8.2}\n",
                m.verb_top1, m.verb_top5, m.noun_top1, m.noun_top5, m.action_top1, m.action_top5
            ));
        };
        for (variant, mean) in &self.means {
            for row in self.rows.iter().filter(|r| &r.variant == variant) {
                line(&mut out, variant, &row.seed.to_string(), &row.metrics);
            }
            line(&mut out, variant, "mean", mean);
        }
        out
    }

    /// Machine-readable rendering: `variant.seed.metric=value` lines plus a
    /// `variant.mean.metric=value` block per variant.
    pub fn render_kv(&self) -> String {
        let mut out = String::new();
        for (variant, mean) in &self.means {
            for row in self.rows.iter().filter(|r| &r.variant == variant) {
                out.push_str(&row.metrics.kv_lines(&format!("{variant}.{}", row.seed)));
            }
            out.push_str(&mean.kv_lines(&format!("{variant}.mean")));
        }
        out
    }
}

fn side<'a>(
    entries: &'a [crate::dataio::CacheEntry],
    domain: DomainLabel,
    split: Split,
) -> Vec<crate::dataio::CacheEntry> {
    entries.iter().filter(|e| e.domain == domain && e.split == split).cloned().collect()
}

/// Runs the full sweep. Stage-1 models (extractor, detector) and the
/// feature caches are built once per seed and shared across variants; the
/// detector is trained only when some variant needs hand-centric features.
/// With `out` set, checkpoints, caches, and both report renderings are
/// written under it.
pub fn run_experiment(cfg: &PipelineConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut rows: Vec<ExperimentRow> = Vec::new();
    let variants: Vec<Variant> =
        cfg.variants.iter().map(|v| Variant::parse(v)).collect::<Result<_>>()?;
    let need_hand = variants.iter().any(|v| v.features == FeatureMode::HandCentric);
    let need_raw = variants.iter().any(|v| v.features == FeatureMode::RawGlobal);
    for &seed in &cfg.seeds {
        let mut synth_cfg = cfg.synth.clone();
        synth_cfg.seed = seed;
        let action_ds = gen_action_dataset(&synth_cfg)?;
        let extractor =
            train_feature_extractor(&action_ds, cfg.extractor.clone(), &cfg.extractor_schedule, seed)?
                .model;
        let detector = if need_hand {
            let det_ds = crate::train::rendering_detector_dataset(&action_ds, cfg.detector_frame_stride)?;
            Some(train_hand_detector(&det_ds, cfg.detector.clone(), &cfg.detector_schedule, seed)?.model)
        } else {
            None
        };
        if let Some(dir) = out {
            let sd = dir.join(format!("seed{seed}"));
            crate::dataio::write_checkpoint(
                &sd.join("extractor.ckpt"),
                &extractor_checkpoint(&extractor, 0),
            )?;
            if let Some(d) = &detector {
                write_checkpoint(&sd.join("detector.ckpt"), &detector_checkpoint(d, 0))?;
            }
        }
        let mut caches: BTreeMap<FeatureMode, Vec<crate::dataio::CacheEntry>> = BTreeMap::new();
        for (mode, wanted) in
            [(FeatureMode::RawGlobal, need_raw), (FeatureMode::HandCentric, need_hand)]
        {
            if !wanted {
                continue;
            }
            let entries = extract_features(
                &action_ds.records,
                &extractor,
                detector.as_ref(),
                &cfg.handfeat,
                mode,
            )?;
            if let Some(dir) = out {
                let cd = dir.join(format!("seed{seed}")).join(format!("cache_{}", mode.as_str()));
                write_feature_cache(&cd, &entries)?;
            }
            caches.insert(mode, entries);
        }
        for variant in &variants {
            let entries = &caches[&variant.features];
            let mut action_cfg = cfg.action.clone();
            action_cfg.input_dim = entries[0].features.ncols();
            if !variant.adversarial {
                action_cfg.lambda_spatial = 0.0;
                action_cfg.lambda_relation = 0.0;
                action_cfg.lambda_temporal = 0.0;
                action_cfg.gamma_attentive = 0.0;
            }
            let train_src = side(entries, DomainLabel::Source, Split::Train);
            let train_tgt = side(entries, DomainLabel::Target, Split::Train);
            let run =
                train_da_model(&train_src, &train_tgt, action_cfg, &cfg.da_schedule, seed, None, None)?;
            let eval_tgt = side(entries, DomainLabel::Target, Split::Test);
            let preds = predict_records(&run.model, &eval_tgt)?;
            let metrics = evaluate(&preds, &action_ds.sidecar)?;
            if let Some(dir) = out {
                let vd = dir.join(format!("seed{seed}")).join(variant.name());
                write_checkpoint(&vd.join("model.ckpt"), &run.checkpoint)?;
                crate::dataio::write_atomic(
                    vd.join("metrics.kv").as_path(),
                    metrics.kv_lines("").as_bytes(),
                )?;
            }
            rows.push(ExperimentRow { variant: variant.name().to_string(), seed, metrics });
        }
    }
    let report = ExperimentReport::from_rows(rows, &cfg.variants);
    if let Some(dir) = out {
        crate::dataio::write_atomic(dir.join("report.kv").as_path(), report.render_kv().as_bytes())?;
        crate::dataio::write_atomic(
            dir.join("report.txt").as_path(),
            report.render_table().as_bytes(),
        )?;
    }
    Ok(report)
}

//! Flat key/value configuration files for the pipeline. One `key = value`
//! pair per line, `#` starts a full-line comment, keys are `section.field`
//! (for example `synth.num_verbs` or `da_schedule.learning_rate`). A bare
//! `scale = desk-scale | paper-scale` line picks the starting preset and is
//! applied before every other key regardless of its position in the file, so
//! a file is always "preset plus overrides". Later duplicates win, and the
//! same keys double as the CLI's `--set` override syntax.

use crate::action::{ActionConfig, TupleMode};
use crate::adversarial::{GrlConfig, GrlSchedule};
use crate::error::{Error, Result};
use crate::experiment::PipelineConfig;
use crate::handdet::{DetectorConfig, UncertaintyMode};
use crate::handfeat::HandFeatParams;
use crate::optim::{OptimizerKind, TrainSchedule};
use crate::synth::SynthConfig;
use crate::train::ExtractorConfig;

/// Splits config text into (key, value) pairs in file order.
fn split_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::InvalidConfig(format!(
                "line {}: expected `key = value`, got {line:?}",
                lineno + 1
            )));
        };
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

/// Parses a config file into a validated pipeline config. The `scale` key
/// (default `desk-scale`) chooses the base preset; everything else overrides
/// one field of it.
pub fn parse_pipeline_config(text: &str) -> Result<PipelineConfig> {
    let pairs = split_pairs(text)?;
    let scale = pairs
        .iter()
        .rev()
        .find(|(k, _)| k == "scale")
        .map(|(_, v)| v.as_str())
        .unwrap_or("desk-scale");
    let mut cfg = PipelineConfig::scale_preset(scale)?;
    for (key, value) in &pairs {
        if key == "scale" {
            continue;
        }
        apply_kv(&mut cfg, key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str, kind: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: expected {kind}, got {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, kind: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_scalar(key, s, kind))
        .collect()
}

fn parse_optimizer(key: &str, value: &str) -> Result<OptimizerKind> {
    match value {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        _ => Err(Error::InvalidConfig(format!("{key}: expected sgd or adam, got {value:?}"))),
    }
}

// grl fields are exposed as three flat keys; rebuilding through the
// constructor keeps its validation in force
fn apply_grl(grl: &mut GrlConfig, key: &str, field: &str, value: &str) -> Result<bool> {
    let (mut lambda, mut schedule) = (grl.lambda_value, grl.schedule);
    match field {
        "grl_lambda" => lambda = parse_scalar(key, value, "a real")?,
        "grl_schedule" => match value {
            "constant" => schedule = GrlSchedule::Constant,
            "ramp" => {
                if !matches!(schedule, GrlSchedule::Ramp { .. }) {
                    schedule = GrlSchedule::Ramp { steepness: 10.0 };
                }
            }
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "{key}: expected constant or ramp, got {value:?}"
                )))
            }
        },
        "grl_steepness" => schedule = GrlSchedule::Ramp { steepness: parse_scalar(key, value, "a real")? },
        _ => return Ok(false),
    }
    *grl = GrlConfig::new(lambda, schedule)?;
    Ok(true)
}

fn apply_synth(cfg: &mut SynthConfig, key: &str, field: &str, value: &str) -> Result<()> {
    match field {
        "seed" => cfg.seed = parse_scalar(key, value, "an integer")?,
        "num_verbs" => cfg.num_verbs = parse_scalar(key, value, "an integer")?,
        "num_nouns" => cfg.num_nouns = parse_scalar(key, value, "an integer")?,
        "clips_per_split" => cfg.clips_per_split = parse_scalar(key, value, "an integer")?,
        "num_frames" => cfg.num_frames = parse_scalar(key, value, "an integer")?,
        "map_channels" => cfg.map_channels = parse_scalar(key, value, "an integer")?,
        "map_size" => cfg.map_size = parse_scalar(key, value, "an integer")?,
        "box_min" => cfg.box_min = parse_scalar(key, value, "a real")?,
        "box_max" => cfg.box_max = parse_scalar(key, value, "a real")?,
        "scale_min" => cfg.scale_range.0 = parse_scalar(key, value, "a real")?,
        "scale_max" => cfg.scale_range.1 = parse_scalar(key, value, "a real")?,
        "offset_magnitude" => cfg.offset_magnitude = parse_scalar(key, value, "a real")?,
        "channel_permutation" => cfg.channel_permutation = parse_bool(key, value)?,
        "shift_enabled" => cfg.shift_enabled = parse_bool(key, value)?,
        "noise_sigma" => cfg.noise_sigma = parse_scalar(key, value, "a real")?,
        "detector_image_size" => cfg.detector_image_size = parse_scalar(key, value, "an integer")?,
        "detector_source_images" => cfg.detector_source_images = parse_scalar(key, value, "an integer")?,
        "detector_eval_images" => cfg.detector_eval_images = parse_scalar(key, value, "an integer")?,
        "distractors" => cfg.distractors = parse_scalar(key, value, "an integer")?,
        _ => return Err(Error::InvalidConfig(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

fn apply_extractor(cfg: &mut ExtractorConfig, key: &str, field: &str, value: &str) -> Result<()> {
    match field {
        "map_channels" => cfg.map_channels = parse_scalar(key, value, "an integer")?,
        "feat_channels" => cfg.feat_channels = parse_scalar(key, value, "an integer")?,
        "num_verbs" => cfg.num_verbs = parse_scalar(key, value, "an integer")?,
        "num_nouns" => cfg.num_nouns = parse_scalar(key, value, "an integer")?,
        _ => return Err(Error::InvalidConfig(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

fn apply_schedule(cfg: &mut TrainSchedule, key: &str, field: &str, value: &str) -> Result<()> {
    match field {
        "optimizer" => cfg.optimizer = parse_optimizer(key, value)?,
        "learning_rate" => cfg.learning_rate = parse_scalar(key, value, "a real")?,
        "decay_factor" => cfg.decay_factor = parse_scalar(key, value, "a real")?,
        "decay_interval" => cfg.decay_interval = parse_scalar(key, value, "an integer")?,
        "epochs" => cfg.epochs = parse_scalar(key, value, "an integer")?,
        "momentum" => cfg.momentum = parse_scalar(key, value, "a real")?,
        "weight_decay" => cfg.weight_decay = parse_scalar(key, value, "a real")?,
        "batch_size" => cfg.batch_size = parse_scalar(key, value, "an integer")?,
        _ => return Err(Error::InvalidConfig(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

fn apply_detector(cfg: &mut DetectorConfig, key: &str, field: &str, value: &str) -> Result<()> {
    if apply_grl(&mut cfg.grl, key, field, value)? {
        return Ok(());
    }
    match field {
        "num_levels" => cfg.num_levels = parse_scalar(key, value, "an integer")?,
        "channels" => cfg.channels = parse_list(key, value, "an integer")?,
        "image_size" => cfg.image_size = parse_scalar(key, value, "an integer")?,
        "image_channels" => cfg.image_channels = parse_scalar(key, value, "an integer")?,
        "head_level" => cfg.head_level = parse_scalar(key, value, "an integer")?,
        "anchor_size" => cfg.anchor_size = parse_scalar(key, value, "a real")?,
        "context_width" => cfg.context_width = parse_scalar(key, value, "an integer")?,
        "uncertainty_mode" => {
            cfg.uncertainty_mode = match value {
                "attention_on_certain" => UncertaintyMode::AttentionOnCertain,
                "attention_on_uncertain" => UncertaintyMode::AttentionOnUncertain,
                "off" => UncertaintyMode::Off,
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "{key}: expected attention_on_certain, attention_on_uncertain, or off, got {value:?}"
                    )))
                }
            }
        }
        "domain_weight" => cfg.domain_weight = parse_scalar(key, value, "a real")?,
        "confidence_threshold" => cfg.confidence_threshold = parse_scalar(key, value, "a real")?,
        "max_detections" => cfg.max_detections = parse_scalar(key, value, "an integer")?,
        _ => return Err(Error::InvalidConfig(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

fn apply_action(cfg: &mut ActionConfig, key: &str, field: &str, value: &str) -> Result<()> {
    if apply_grl(&mut cfg.grl, key, field, value)? {
        return Ok(());
    }
    match field {
        "num_seg" => cfg.num_seg = parse_scalar(key, value, "an integer")?,
        "feat_dim" => cfg.feat_dim = parse_scalar(key, value, "an integer")?,
        "input_dim" => cfg.input_dim = parse_scalar(key, value, "an integer")?,
        "num_verbs" => cfg.num_verbs = parse_scalar(key, value, "an integer")?,
        "num_nouns" => cfg.num_nouns = parse_scalar(key, value, "an integer")?,
        "relation_scales" => cfg.relation_scales = parse_list(key, value, "an integer")?,
        "tuples_per_scale" => {
            cfg.tuples_per_scale = if value == "exhaustive" {
                TupleMode::Exhaustive
            } else {
                TupleMode::Sampled(parse_scalar(key, value, "exhaustive or an integer")?)
            }
        }
        "lambda_spatial" => cfg.lambda_spatial = parse_scalar(key, value, "a real")?,
        "lambda_relation" => cfg.lambda_relation = parse_scalar(key, value, "a real")?,
        "lambda_temporal" => cfg.lambda_temporal = parse_scalar(key, value, "a real")?,
        "gamma_attentive" => cfg.gamma_attentive = parse_scalar(key, value, "a real")?,
        _ => return Err(Error::InvalidConfig(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

fn apply_handfeat(cfg: &mut HandFeatParams, key: &str, field: &str, value: &str) -> Result<()> {
    match field {
        "out_size" => cfg.out_size = parse_scalar(key, value, "an integer")?,
        "samples_per_axis" => cfg.samples_per_axis = parse_scalar(key, value, "an integer")?,
        _ => return Err(Error::InvalidConfig(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

/// Applies one `section.field = value` override in place. The `scale` key is
/// rejected here: presets must be chosen before overrides exist.
pub fn apply_kv(cfg: &mut PipelineConfig, key: &str, value: &str) -> Result<()> {
    let Some((section, field)) = key.split_once('.') else {
        return Err(Error::InvalidConfig(format!(
            "unknown config key {key:?} (expected section.field)"
        )));
    };
    match section {
        "synth" => apply_synth(&mut cfg.synth, key, field, value),
        "extractor" => apply_extractor(&mut cfg.extractor, key, field, value),
        "extractor_schedule" => apply_schedule(&mut cfg.extractor_schedule, key, field, value),
        "detector" => apply_detector(&mut cfg.detector, key, field, value),
        "detector_schedule" => apply_schedule(&mut cfg.detector_schedule, key, field, value),
        "action" => apply_action(&mut cfg.action, key, field, value),
        "da_schedule" => apply_schedule(&mut cfg.da_schedule, key, field, value),
        "handfeat" => apply_handfeat(&mut cfg.handfeat, key, field, value),
        "experiment" => match field {
            "detector_frame_stride" => {
                cfg.detector_frame_stride = parse_scalar(key, value, "an integer")?;
                Ok(())
            }
            "variants" => {
                cfg.variants = value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                Ok(())
            }
            "seeds" => {
                cfg.seeds = parse_list(key, value, "an integer")?;
                Ok(())
            }
            _ => Err(Error::InvalidConfig(format!("unknown config key {key:?}"))),
        },
        _ => Err(Error::InvalidConfig(format!("unknown config key {key:?}"))),
    }
}

/// Applies `key=value` override strings (CLI form) in order, then revalidates.
pub fn apply_overrides(cfg: &mut PipelineConfig, overrides: &[String]) -> Result<()> {
    for entry in overrides {
        let Some((key, value)) = entry.split_once('=') else {
            return Err(Error::InvalidConfig(format!("override {entry:?} is not key=value")));
        };
        apply_kv(cfg, key.trim(), value.trim())?;
    }
    cfg.validate()
}

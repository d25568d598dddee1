//! Top-k accuracy for two-head (verb, noun) predictions.
//!
//! Ranking is total and platform-independent: classes order by probability
//! descending, then by ascending class index; (verb, noun) pairs order by the
//! joint score p_verb·p_noun descending, then lexicographically by indices.
//! Action top-1 requires both heads correct at rank 1; action top-5 asks
//! whether the truth pair sits among the 5 best pairs under the joint score.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::Array1;

use crate::adversarial::Distribution;
use crate::error::{Error, Result};

/// One clip's predicted class distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub clip_id: String,
    pub verb: Distribution,
    pub noun: Distribution,
}

/// Six accuracies as exact percentages in [0, 100]. Rendering rounds to two
/// decimals; the stored values stay exact so invariants hold without slack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub verb_top1: f64,
    pub verb_top5: f64,
    pub noun_top1: f64,
    pub noun_top5: f64,
    pub action_top1: f64,
    pub action_top5: f64,
}

impl MetricsReport {
    pub fn render(&self) -> String {
        format!(
            "verb   top-1 {:6.2}%  top-5 {:6.2}%\nnoun   top-1 {:6.2}%  top-5 {:6.2}%\naction top-1 {:6.2}%  top-5 {:6.2}%\n",
            self.verb_top1, self.verb_top5, self.noun_top1, self.noun_top5, self.action_top1, self.action_top5,
        )
    }

    /// Machine-readable lines, one `key=value` per metric, values rounded to
    /// two decimals. `prefix` is prepended to every key when non-empty.
    pub fn kv_lines(&self, prefix: &str) -> String {
        let p = if prefix.is_empty() { String::new() } else { format!("{prefix}.") };
        format!(
            "{p}verb_top1={:.2}\n{p}verb_top5={:.2}\n{p}noun_top1={:.2}\n{p}noun_top5={:.2}\n{p}action_top1={:.2}\n{p}action_top5={:.2}\n",
            self.verb_top1, self.verb_top5, self.noun_top1, self.noun_top5, self.action_top1, self.action_top5,
        )
    }

    pub fn fields(&self) -> [f64; 6] {
        [self.verb_top1, self.verb_top5, self.noun_top1, self.noun_top5, self.action_top1, self.action_top5]
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Zero-based rank of `truth` when classes sort by probability descending
/// with ties going to the smaller index.
fn class_rank(probs: &Array1<f64>, truth: usize) -> usize {
    let pt = probs[truth];
    probs
        .iter()
        .enumerate()
        .filter(|&(i, &p)| p > pt || (p == pt && i < truth))
        .count()
}

/// Zero-based rank of the truth pair under the joint score, ties resolved by
/// ascending (verb, noun).
fn pair_rank(verb: &Array1<f64>, noun: &Array1<f64>, tv: usize, tn: usize) -> usize {
    let st = verb[tv] * noun[tn];
    let mut ahead = 0;
    for (v, &pv) in verb.iter().enumerate() {
        for (n, &pn) in noun.iter().enumerate() {
            let s = pv * pn;
            if s > st || (s == st && (v, n) < (tv, tn)) {
                ahead += 1;
            }
        }
    }
    ahead
}

/// Scores predictions against ground-truth (verb, noun) labels keyed by clip
/// id. Every prediction must have a truth entry; class counts must agree
/// across records; duplicate clip ids are rejected.
pub fn evaluate(
    predictions: &[PredictionRecord],
    truth: &BTreeMap<String, (usize, usize)>,
) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::EmptyBatch("no predictions to evaluate".into()));
    }
    let kv = predictions[0].verb.len();
    let kn = predictions[0].noun.len();
    let mut seen = BTreeSet::new();
    let mut hits = [0usize; 6];
    for p in predictions {
        if p.verb.len() != kv || p.noun.len() != kn {
            return Err(Error::DimMismatch(format!(
                "clip {} has class counts ({}, {}), expected ({kv}, {kn})",
                p.clip_id,
                p.verb.len(),
                p.noun.len()
            )));
        }
        if !seen.insert(&p.clip_id) {
            return Err(Error::InvalidConfig(format!("duplicate prediction for clip {}", p.clip_id)));
        }
        let &(tv, tn) = truth
            .get(&p.clip_id)
            .ok_or_else(|| Error::MissingLabels(format!("no ground truth for clip {}", p.clip_id)))?;
        if tv >= kv || tn >= kn {
            return Err(Error::InvalidConfig(format!(
                "truth ({tv}, {tn}) for clip {} outside class counts ({kv}, {kn})",
                p.clip_id
            )));
        }
        let vr = class_rank(p.verb.probs(), tv);
        let nr = class_rank(p.noun.probs(), tn);
        hits[0] += usize::from(vr < 1);
        hits[1] += usize::from(vr < 5);
        hits[2] += usize::from(nr < 1);
        hits[3] += usize::from(nr < 5);
        hits[4] += usize::from(vr < 1 && nr < 1);
        hits[5] += usize::from(pair_rank(p.verb.probs(), p.noun.probs(), tv, tn) < 5);
    }
    let pct = |h: usize| 100.0 * h as f64 / predictions.len() as f64;
    Ok(MetricsReport {
        verb_top1: pct(hits[0]),
        verb_top5: pct(hits[1]),
        noun_top1: pct(hits[2]),
        noun_top5: pct(hits[3]),
        action_top1: pct(hits[4]),
        action_top5: pct(hits[5]),
    })
}

/// Per-clip arithmetic mean of several runs' distributions. Runs must list
/// the same clips in the same order with the same class counts. The mean is
/// computed as base + Σ(run − base)/M, so averaging M identical runs returns
/// the run unchanged, bit for bit.
pub fn average_predictions(runs: &[Vec<PredictionRecord>]) -> Result<Vec<PredictionRecord>> {
    let first = runs
        .first()
        .ok_or_else(|| Error::EmptyBatch("no prediction runs to average".into()))?;
    for (ri, run) in runs.iter().enumerate().skip(1) {
        if run.len() != first.len() {
            return Err(Error::DimMismatch(format!(
                "run {ri} has {} records, expected {}",
                run.len(),
                first.len()
            )));
        }
        for (a, b) in first.iter().zip(run) {
            if a.clip_id != b.clip_id {
                return Err(Error::InvalidConfig(format!(
                    "run {ri} lists clip {} where {} was expected",
                    b.clip_id, a.clip_id
                )));
            }
            if a.verb.len() != b.verb.len() || a.noun.len() != b.noun.len() {
                return Err(Error::DimMismatch(format!("class counts differ on clip {}", a.clip_id)));
            }
        }
    }
    let m = runs.len() as f64;
    let mean = |base: &Array1<f64>, idx: usize, head: fn(&PredictionRecord) -> &Distribution| {
        let mut delta = Array1::<f64>::zeros(base.len());
        for run in runs {
            delta += &(head(&run[idx]).probs() - base);
        }
        Distribution::new(base + delta / m)
    };
    first
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            Ok(PredictionRecord {
                clip_id: rec.clip_id.clone(),
                verb: mean(rec.verb.probs(), i, |r| &r.verb)?,
                noun: mean(rec.noun.probs(), i, |r| &r.noun)?,
            })
        })
        .collect()
}

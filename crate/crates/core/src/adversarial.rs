//! Adversarial-training primitives shared across the action model and the
//! detector: gradient-reversal configuration, entropy measures, the domain
//! classification loss, and the attentive entropy loss.
//!
//! Gradient reversal itself is a backward-pass effect and lives in the
//! differentiation tape ([`crate::autodiff`]); this module owns its strength
//! schedule and the batch-level scalar losses as plain functions of values.

use ndarray::Array1;

use crate::error::{Error, Result};

/// Gradient-reversal strength schedule.
///
/// `Constant` uses `lambda_value` throughout. `Ramp` scales it by the
/// standard sigmoidal warm-up `2 / (1 + exp(-steepness * progress)) - 1`,
/// which runs from 0 at the start of training to almost 1 at the end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GrlSchedule {
    Constant,
    Ramp { steepness: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrlConfig {
    pub lambda_value: f64,
    pub schedule: GrlSchedule,
}

impl GrlConfig {
    pub fn constant(lambda_value: f64) -> Result<Self> {
        GrlConfig::new(lambda_value, GrlSchedule::Constant)
    }

    pub fn new(lambda_value: f64, schedule: GrlSchedule) -> Result<Self> {
        if !(lambda_value >= 0.0) || !lambda_value.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "reversal strength must be a nonnegative real, got {lambda_value}"
            )));
        }
        if let GrlSchedule::Ramp { steepness } = schedule {
            if !(steepness > 0.0) || !steepness.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "ramp steepness must be positive, got {steepness}"
                )));
            }
        }
        Ok(GrlConfig { lambda_value, schedule })
    }

    /// Effective reversal strength at `progress` (clamped to [0, 1]).
    pub fn lambda_at(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        match self.schedule {
            GrlSchedule::Constant => self.lambda_value,
            GrlSchedule::Ramp { steepness } => {
                self.lambda_value * (2.0 / (1.0 + (-steepness * p).exp()) - 1.0)
            }
        }
    }
}

/// Which side of the shift a record comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DomainLabel {
    Source,
    Target,
}

impl DomainLabel {
    pub fn index(self) -> usize {
        match self {
            DomainLabel::Source => 0,
            DomainLabel::Target => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(DomainLabel::Source),
            1 => Ok(DomainLabel::Target),
            _ => Err(Error::InvalidConfig(format!("domain index {i} not binary"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DomainLabel::Source => "source",
            DomainLabel::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(DomainLabel::Source),
            "target" => Ok(DomainLabel::Target),
            other => Err(Error::InvalidConfig(format!("unknown domain {other:?}"))),
        }
    }
}

/// Probability vector: nonnegative entries summing to 1 within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Array1<f64>,
}

impl Distribution {
    pub fn new(probs: Array1<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "negative or non-finite entry in {probs:?}"
            )));
        }
        let sum: f64 = probs.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(Distribution { probs })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidDistribution("empty".into()));
        }
        Distribution::new(Array1::from_elem(k, 1.0 / k as f64))
    }

    pub fn one_hot(k: usize, index: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::InvalidDistribution(format!("index {index} out of {k}")));
        }
        let mut p = Array1::zeros(k);
        p[index] = 1.0;
        Distribution::new(p)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &Array1<f64> {
        &self.probs
    }
}

/// Shannon entropy in nats: −Σ p ln p, with 0·ln 0 = 0.
pub fn entropy(p: &Distribution) -> f64 {
    let mut h = 0.0;
    for &q in p.probs().iter() {
        if q > 0.0 {
            h -= q * q.ln();
        }
    }
    // tiny negative residue can appear for near-one-hot inputs
    h.max(0.0)
}

/// Mean negative log-likelihood of the true domain under binary predictions.
///
/// Instantiates every domain classification loss in the system (spatial,
/// relation, temporal, and the detector's per-level losses).
pub fn domain_bce_loss(d_hat: &[Distribution], d: &[DomainLabel]) -> Result<f64> {
    if d_hat.is_empty() {
        return Err(Error::EmptyBatch("no predictions".into()));
    }
    if d_hat.len() != d.len() {
        return Err(Error::DimMismatch(format!(
            "{} predictions vs {} labels",
            d_hat.len(),
            d.len()
        )));
    }
    let mut total = 0.0;
    for (p, label) in d_hat.iter().zip(d.iter()) {
        if p.len() != 2 {
            return Err(Error::InvalidDistribution(format!(
                "domain prediction has {} classes, expected 2",
                p.len()
            )));
        }
        total -= p.probs()[label.index()].ln();
    }
    Ok(total / d_hat.len() as f64)
}

/// Mean of (1 + H(d̂)) · H(ŷ) over the batch.
///
/// The domain-entropy factor is an attention weight: certain domain
/// predictions give weight 1, maximally confused ones give 1 + ln 2. When
/// differentiated (see the tape version in [`crate::action`]), gradients flow
/// only into the class predictions; the weights are constants.
pub fn attentive_entropy(y_hat: &[Distribution], d_hat: &[Distribution]) -> Result<f64> {
    if y_hat.is_empty() {
        return Err(Error::EmptyBatch("no predictions".into()));
    }
    if y_hat.len() != d_hat.len() {
        return Err(Error::DimMismatch(format!(
            "{} class predictions vs {} domain predictions",
            y_hat.len(),
            d_hat.len()
        )));
    }
    let mut total = 0.0;
    for (y, d) in y_hat.iter().zip(d_hat.iter()) {
        if d.len() != 2 {
            return Err(Error::InvalidDistribution(format!(
                "domain prediction has {} classes, expected 2",
                d.len()
            )));
        }
        total += (1.0 + entropy(d)) * entropy(y);
    }
    Ok(total / y_hat.len() as f64)
}

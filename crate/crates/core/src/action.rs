//! Domain-adaptive action model: shared frame encoder, multi-scale temporal
//! relation features, three tiers of gradient-reversed domain discriminators,
//! and dual verb/noun classifiers.
//!
//! Two forward paths exist on purpose. Training assembles a whole batch on
//! the differentiation tape ([`build_losses`]); evaluation walks one clip at
//! a time with explicit per-tuple arithmetic ([`ActionModel::predict`]), the
//! same granularity a by-hand enumeration uses, so oracle comparisons are
//! bit-exact.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{Distribution, DomainLabel, GrlConfig};
use crate::autodiff::{softmax_rows, Params, Tape, Var};
use crate::error::{Error, Result};

/// How many ordered frame tuples feed each relation scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TupleMode {
    Exhaustive,
    Sampled(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionConfig {
    pub num_seg: usize,
    pub feat_dim: usize,
    pub input_dim: usize,
    pub num_verbs: usize,
    pub num_nouns: usize,
    pub relation_scales: Vec<usize>,
    pub tuples_per_scale: TupleMode,
    pub lambda_spatial: f64,
    pub lambda_relation: f64,
    pub lambda_temporal: f64,
    pub gamma_attentive: f64,
    pub grl: GrlConfig,
}

impl ActionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_seg == 0 || self.feat_dim == 0 || self.input_dim == 0 {
            return Err(Error::InvalidConfig("zero model dimension".into()));
        }
        if self.num_verbs == 0 || self.num_nouns == 0 {
            return Err(Error::InvalidConfig("need at least one class per head".into()));
        }
        if self.relation_scales.is_empty() {
            return Err(Error::InvalidConfig("need at least one relation scale".into()));
        }
        for &n in &self.relation_scales {
            if n < 2 || n > self.num_seg {
                return Err(Error::InvalidConfig(format!(
                    "relation scale {n} outside 2..={}",
                    self.num_seg
                )));
            }
        }
        let mut sorted = self.relation_scales.clone();
        sorted.dedup();
        if sorted.len() != self.relation_scales.len() {
            return Err(Error::InvalidConfig("duplicate relation scale".into()));
        }
        if let TupleMode::Sampled(0) = self.tuples_per_scale {
            return Err(Error::InvalidConfig("sampled tuple count must be positive".into()));
        }
        for (name, w) in [
            ("spatial", self.lambda_spatial),
            ("relation", self.lambda_relation),
            ("temporal", self.lambda_temporal),
            ("attentive", self.gamma_attentive),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} weight must be ≥ 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// One clip ready for the model: T frame vectors plus domain and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatures {
    pub frames: Array2<f64>,
    pub domain: DomainLabel,
    pub label: Option<(usize, usize)>,
}

impl ClipFeatures {
    pub fn new(frames: Array2<f64>, domain: DomainLabel, label: Option<(usize, usize)>) -> Self {
        ClipFeatures { frames, domain, label }
    }
}

/// Named scalar losses of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub verb_cls: f64,
    pub noun_cls: f64,
    pub spatial: f64,
    pub temporal: f64,
    pub relation: BTreeMap<usize, f64>,
    pub attentive_verb: f64,
    pub attentive_noun: f64,
}

/// Weighted combination the optimizer minimizes: classification terms plus
/// the attentive-entropy and adversarial terms. The adversarial sign lives
/// inside the reversal layer, not here.
pub fn total_objective(bundle: &LossBundle, cfg: &ActionConfig) -> f64 {
    let rel_mean = if bundle.relation.is_empty() {
        0.0
    } else {
        bundle.relation.values().sum::<f64>() / bundle.relation.len() as f64
    };
    bundle.verb_cls
        + bundle.noun_cls
        + cfg.gamma_attentive * (bundle.attentive_verb + bundle.attentive_noun)
        + cfg.lambda_spatial * bundle.spatial
        + cfg.lambda_relation * rel_mean
        + cfg.lambda_temporal * bundle.temporal
}

/// All strictly increasing index n-tuples of 0..t, lexicographic.
pub fn exhaustive_tuples(t: usize, n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(n);
    fn rec(start: usize, t: usize, n: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        let remaining = n - cur.len();
        for i in start..=t - remaining {
            cur.push(i);
            rec(i + 1, t, n, cur, out);
            cur.pop();
        }
    }
    if n <= t {
        rec(0, t, n, &mut cur, &mut out);
    }
    out
}

/// `count` strictly increasing n-tuples, each draw uniform over the C(t, n)
/// combinations.
///
/// Draws come from shuffled full passes over the combination set: every
/// complete pass covers each combination exactly once, and a partial final
/// pass is a uniform sample without replacement. Each single draw is
/// marginally uniform, and the estimator converges to the exhaustive mean at
/// the pass rate rather than the independent-draw rate.
pub fn sample_tuples(t: usize, n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let combos = exhaustive_tuples(t, n);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut pass = combos.clone();
        pass.shuffle(rng);
        let take = (count - out.len()).min(pass.len());
        out.extend(pass.into_iter().take(take));
    }
    out
}

/// Which tuples each clip uses, per scale. Exhaustive mode shares one list;
/// sampled mode draws independently per clip.
pub struct TuplePlan {
    pub per_scale: BTreeMap<usize, Vec<Vec<Vec<usize>>>>,
}

impl TuplePlan {
    pub fn build(cfg: &ActionConfig, num_clips: usize, seed: u64) -> Self {
        let mut per_scale = BTreeMap::new();
        for &n in &cfg.relation_scales {
            let lists: Vec<Vec<Vec<usize>>> = match cfg.tuples_per_scale {
                TupleMode::Exhaustive => {
                    let all = exhaustive_tuples(cfg.num_seg, n);
                    vec![all; num_clips]
                }
                TupleMode::Sampled(count) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                    (0..num_clips)
                        .map(|_| sample_tuples(cfg.num_seg, n, count, &mut rng))
                        .collect()
                }
            };
            per_scale.insert(n, lists);
        }
        TuplePlan { per_scale }
    }
}

#[derive(Debug, Clone)]
pub struct ActionModel {
    pub cfg: ActionConfig,
    pub params: Params,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

fn insert_mlp(params: &mut Params, rng: &mut ChaCha8Rng, prefix: &str, dims: &[usize]) {
    for (i, pair) in dims.windows(2).enumerate() {
        params.insert(&format!("{prefix}.w{}", i + 1), xavier(rng, pair[0], pair[1]));
        params.insert(&format!("{prefix}.b{}", i + 1), Array2::zeros((1, pair[1])));
    }
}

impl ActionModel {
    /// Fresh model with seeded initialization. Parameters are quantized to
    /// 32-bit-representable values so checkpoints round-trip bit-exactly.
    pub fn init(cfg: ActionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = cfg.feat_dim;
        let mut params = Params::new();
        insert_mlp(&mut params, &mut rng, "encoder", &[cfg.input_dim, f]);
        for &n in &cfg.relation_scales {
            insert_mlp(&mut params, &mut rng, &format!("relation.{n}"), &[n * f, f, f]);
        }
        insert_mlp(&mut params, &mut rng, "verb_head", &[f, cfg.num_verbs]);
        insert_mlp(&mut params, &mut rng, "noun_head", &[f, cfg.num_nouns]);
        insert_mlp(&mut params, &mut rng, "disc_spatial", &[f, f, 2]);
        for &n in &cfg.relation_scales {
            insert_mlp(&mut params, &mut rng, &format!("disc_relation.{n}"), &[f, f, 2]);
        }
        insert_mlp(&mut params, &mut rng, "disc_temporal", &[f, f, 2]);
        params.quantize_f32();
        Ok(ActionModel { cfg, params })
    }

    pub fn from_parts(cfg: ActionConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        Ok(ActionModel { cfg, params })
    }

    /// Per-frame projection to feat_dim: relu(x·W + b) row by row.
    pub fn encode_frames(&self, frames: &Array2<f64>) -> Result<Array2<f64>> {
        let (t, d) = frames.dim();
        if d != self.cfg.input_dim {
            return Err(Error::DimMismatch(format!(
                "clip width {d} vs input_dim {}",
                self.cfg.input_dim
            )));
        }
        let w = self.params.get("encoder.w1");
        let b = self.params.get("encoder.b1");
        let mut out = Array2::zeros((t, self.cfg.feat_dim));
        for i in 0..t {
            let row = affine_vec(&frames.row(i).to_owned(), w, b);
            out.row_mut(i).assign(&row.mapv(|v| v.max(0.0)));
        }
        Ok(out)
    }

    /// Scale-n relation feature of one encoded clip: mean over tuples of the
    /// two-layer relation network applied to concatenated frame vectors.
    ///
    /// In exhaustive mode `sampler_seed` is unused; both modes average
    /// tuple-by-tuple in draw order.
    pub fn relation_features(
        &self,
        encoded: &Array2<f64>,
        scale: usize,
        mode: TupleMode,
        sampler_seed: u64,
    ) -> Result<Array1<f64>> {
        let (t, f) = encoded.dim();
        if f != self.cfg.feat_dim {
            return Err(Error::DimMismatch(format!("encoded width {f}")));
        }
        if scale > t || scale < 2 {
            return Err(Error::InvalidConfig(format!("relation scale {scale} with {t} frames")));
        }
        let tuples = match mode {
            TupleMode::Exhaustive => exhaustive_tuples(t, scale),
            TupleMode::Sampled(count) => {
                let mut rng = ChaCha8Rng::seed_from_u64(sampler_seed);
                sample_tuples(t, scale, count, &mut rng)
            }
        };
        let w1 = self.params.get(&format!("relation.{scale}.w1"));
        let b1 = self.params.get(&format!("relation.{scale}.b1"));
        let w2 = self.params.get(&format!("relation.{scale}.w2"));
        let b2 = self.params.get(&format!("relation.{scale}.b2"));
        let mut acc = Array1::zeros(self.cfg.feat_dim);
        for tuple in &tuples {
            let mut cat = Array1::zeros(scale * self.cfg.feat_dim);
            for (k, &fi) in tuple.iter().enumerate() {
                for j in 0..self.cfg.feat_dim {
                    cat[k * self.cfg.feat_dim + j] = encoded[(fi, j)];
                }
            }
            let h = affine_vec(&cat, w1, b1).mapv(|v| v.max(0.0));
            let out = affine_vec(&h, w2, b2);
            acc += &out;
        }
        Ok(acc / tuples.len() as f64)
    }

    /// Element-wise sum of per-scale relation features.
    pub fn aggregate_video(features: &[Array1<f64>]) -> Result<Array1<f64>> {
        let first = features
            .first()
            .ok_or_else(|| Error::EmptyBatch("no relation scales".into()))?;
        let mut acc = first.clone();
        for f in &features[1..] {
            if f.len() != acc.len() {
                return Err(Error::DimMismatch("relation feature widths differ".into()));
            }
            acc += f;
        }
        Ok(acc)
    }

    /// Verb and noun distributions from the two affine heads.
    pub fn classify(&self, video: &Array1<f64>) -> Result<(Distribution, Distribution)> {
        if video.len() != self.cfg.feat_dim {
            return Err(Error::DimMismatch(format!("video width {}", video.len())));
        }
        let verb = softmax_vec(&affine_vec(
            video,
            self.params.get("verb_head.w1"),
            self.params.get("verb_head.b1"),
        ));
        let noun = softmax_vec(&affine_vec(
            video,
            self.params.get("noun_head.w1"),
            self.params.get("noun_head.b1"),
        ));
        Ok((Distribution::new(verb)?, Distribution::new(noun)?))
    }

    /// Evaluation forward for one clip: encode, exhaustive relation features
    /// at every configured scale, aggregate, classify.
    pub fn predict(&self, frames: &Array2<f64>) -> Result<(Distribution, Distribution)> {
        if frames.dim().0 != self.cfg.num_seg {
            return Err(Error::DimMismatch(format!(
                "clip has {} frames, model expects {}",
                frames.dim().0,
                self.cfg.num_seg
            )));
        }
        let encoded = self.encode_frames(frames)?;
        let per_scale: Result<Vec<Array1<f64>>> = self
            .cfg
            .relation_scales
            .iter()
            .map(|&n| self.relation_features(&encoded, n, TupleMode::Exhaustive, 0))
            .collect();
        let video = Self::aggregate_video(&per_scale?)?;
        self.classify(&video)
    }

    /// Batch losses as plain values (no gradients kept).
    pub fn forward_losses(
        &self,
        source: &[ClipFeatures],
        target: &[ClipFeatures],
        progress: f64,
        tuple_seed: u64,
    ) -> Result<LossBundle> {
        let mut tape = Tape::new();
        let vars = self.params.leaf_all(&mut tape);
        let plan = TuplePlan::build(&self.cfg, source.len() + target.len(), tuple_seed);
        let built = build_losses(&mut tape, &vars, &self.cfg, source, target, progress, &plan, None)?;
        Ok(built.bundle(&tape))
    }
}

/// Tape handles for every loss of one batch.
pub struct BuiltLosses {
    pub verb_cls: Var,
    pub noun_cls: Var,
    pub spatial: Var,
    pub temporal: Var,
    pub relation: BTreeMap<usize, Var>,
    pub attentive_verb: Var,
    pub attentive_noun: Var,
    pub total: Var,
    /// Detached per-target-clip attention weights actually used.
    pub ae_weights: Array2<f64>,
}

impl BuiltLosses {
    pub fn bundle(&self, tape: &Tape) -> LossBundle {
        let read = |v: Var| tape.value(v)[(0, 0)];
        LossBundle {
            verb_cls: read(self.verb_cls),
            noun_cls: read(self.noun_cls),
            spatial: read(self.spatial),
            temporal: read(self.temporal),
            relation: self.relation.iter().map(|(&n, &v)| (n, read(v))).collect(),
            attentive_verb: read(self.attentive_verb),
            attentive_noun: read(self.attentive_noun),
        }
    }
}

fn mlp2(tape: &mut Tape, vars: &BTreeMap<String, Var>, prefix: &str, x: Var) -> Var {
    let h = tape.matmul(x, vars[&format!("{prefix}.w1")]);
    let h = tape.add_row_broadcast(h, vars[&format!("{prefix}.b1")]);
    let h = tape.relu(h);
    let o = tape.matmul(h, vars[&format!("{prefix}.w2")]);
    tape.add_row_broadcast(o, vars[&format!("{prefix}.b2")])
}

/// Assemble every loss of one (source, target) batch on the tape.
///
/// `ae_weights_override` substitutes the detached attention weights, which
/// lets tests evaluate the loss surface with the weights frozen.
#[allow(clippy::too_many_arguments)]
pub fn build_losses(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ActionConfig,
    source: &[ClipFeatures],
    target: &[ClipFeatures],
    progress: f64,
    plan: &TuplePlan,
    ae_weights_override: Option<&Array2<f64>>,
) -> Result<BuiltLosses> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyBatch("both domains must be represented".into()));
    }
    let t = cfg.num_seg;
    let clips: Vec<&ClipFeatures> = source.iter().chain(target.iter()).collect();
    let b = clips.len();
    let mut verb_labels = Vec::with_capacity(source.len());
    let mut noun_labels = Vec::with_capacity(source.len());
    for c in source {
        if c.domain != DomainLabel::Source {
            return Err(Error::InvalidConfig("target clip in source batch".into()));
        }
        let (v, n) = c
            .label
            .ok_or_else(|| Error::MissingLabels("unlabelled source clip".into()))?;
        if v >= cfg.num_verbs || n >= cfg.num_nouns {
            return Err(Error::InvalidConfig(format!("label ({v},{n}) out of range")));
        }
        verb_labels.push(v);
        noun_labels.push(n);
    }
    for c in target {
        if c.domain != DomainLabel::Target {
            return Err(Error::InvalidConfig("source clip in target batch".into()));
        }
    }
    let mut stacked = Array2::zeros((b * t, cfg.input_dim));
    for (ci, c) in clips.iter().enumerate() {
        if c.frames.dim() != (t, cfg.input_dim) {
            return Err(Error::DimMismatch(format!(
                "clip shape {:?}, expected ({t}, {})",
                c.frames.dim(),
                cfg.input_dim
            )));
        }
        for fi in 0..t {
            for j in 0..cfg.input_dim {
                stacked[(ci * t + fi, j)] = c.frames[(fi, j)];
            }
        }
    }
    let lambda = cfg.grl.lambda_at(progress);
    let x = tape.leaf(stacked);
    let enc = tape.matmul(x, vars["encoder.w1"]);
    let enc = tape.add_row_broadcast(enc, vars["encoder.b1"]);
    let encoded = tape.relu(enc);

    // per-frame domain classification
    let frame_domains: Vec<usize> = clips
        .iter()
        .flat_map(|c| std::iter::repeat(c.domain.index()).take(t))
        .collect();
    let sp_in = tape.grl(encoded, lambda);
    let sp_logits = mlp2(tape, vars, "disc_spatial", sp_in);
    let sp_lp = tape.log_softmax(sp_logits);
    let spatial = tape.nll_mean(sp_lp, &frame_domains);

    // relation features per scale, then their discriminators
    let clip_domains: Vec<usize> = clips.iter().map(|c| c.domain.index()).collect();
    let mut scale_feats: Vec<(usize, Var)> = Vec::new();
    let mut relation_losses = BTreeMap::new();
    for (&n, lists) in &plan.per_scale {
        let m = lists[0].len();
        if lists.len() != b || lists.iter().any(|l| l.len() != m) {
            return Err(Error::InvalidConfig("tuple plan shape mismatch".into()));
        }
        // gather the k-th frame of every (clip, tuple) pair, then concat
        let mut parts = Vec::with_capacity(n);
        for k in 0..n {
            let idx: Vec<usize> = (0..b)
                .flat_map(|ci| lists[ci].iter().map(move |tuple| ci * t + tuple[k]))
                .collect();
            parts.push(tape.select_rows(encoded, &idx));
        }
        let mut cat = parts[0];
        for p in &parts[1..] {
            cat = tape.concat_cols(cat, *p);
        }
        let rel = mlp2(tape, vars, &format!("relation.{n}"), cat);
        let feat = tape.mean_rows_grouped(rel, m);
        let rd_in = tape.grl(feat, lambda);
        let rd_logits = mlp2(tape, vars, &format!("disc_relation.{n}"), rd_in);
        let rd_lp = tape.log_softmax(rd_logits);
        relation_losses.insert(n, tape.nll_mean(rd_lp, &clip_domains));
        scale_feats.push((n, feat));
    }

    let mut video = scale_feats[0].1;
    for (_, feat) in &scale_feats[1..] {
        video = tape.add(video, *feat);
    }

    let td_in = tape.grl(video, lambda);
    let td_logits = mlp2(tape, vars, "disc_temporal", td_in);
    let td_lp = tape.log_softmax(td_logits);
    let temporal = tape.nll_mean(td_lp, &clip_domains);

    let verb_logits = tape.matmul(video, vars["verb_head.w1"]);
    let verb_logits = tape.add_row_broadcast(verb_logits, vars["verb_head.b1"]);
    let noun_logits = tape.matmul(video, vars["noun_head.w1"]);
    let noun_logits = tape.add_row_broadcast(noun_logits, vars["noun_head.b1"]);

    let src_rows: Vec<usize> = (0..source.len()).collect();
    let tgt_rows: Vec<usize> = (source.len()..b).collect();

    let verb_src = tape.select_rows(verb_logits, &src_rows);
    let verb_src_lp = tape.log_softmax(verb_src);
    let verb_cls = tape.nll_mean(verb_src_lp, &verb_labels);
    let noun_src = tape.select_rows(noun_logits, &src_rows);
    let noun_src_lp = tape.log_softmax(noun_src);
    let noun_cls = tape.nll_mean(noun_src_lp, &noun_labels);

    // attention weights 1 + H(domain prediction) per target clip, detached
    let ae_weights = match ae_weights_override {
        Some(w) => {
            if w.dim() != (target.len(), 1) {
                return Err(Error::DimMismatch("attention weight override shape".into()));
            }
            w.clone()
        }
        None => {
            let td_probs = softmax_rows(&tape.detach(td_logits));
            let mut w = Array2::zeros((target.len(), 1));
            for (i, &row) in tgt_rows.iter().enumerate() {
                let mut h = 0.0;
                for j in 0..2 {
                    let p: f64 = td_probs[(row, j)];
                    if p > 0.0 {
                        h -= p * p.ln();
                    }
                }
                w[(i, 0)] = 1.0 + h;
            }
            w
        }
    };

    let attentive = |tape: &mut Tape, logits: Var| -> Var {
        let tgt = tape.select_rows(logits, &tgt_rows);
        let p = tape.softmax(tgt);
        let lp = tape.log_softmax(tgt);
        let plp = tape.mul_elem(p, lp);
        let row_sums = tape.sum_cols_keep(plp);
        let ent = tape.scale(row_sums, -1.0);
        let weighted = tape.mul_const(ent, &ae_weights);
        tape.mean_all(weighted)
    };
    let attentive_verb = attentive(tape, verb_logits);
    let attentive_noun = attentive(tape, noun_logits);

    // total = cls + γ·AE + λ_s·spatial + λ_r·mean(relation) + λ_t·temporal
    let cls = tape.add(verb_cls, noun_cls);
    let ae = tape.add(attentive_verb, attentive_noun);
    let ae = tape.scale(ae, cfg.gamma_attentive);
    let sp = tape.scale(spatial, cfg.lambda_spatial);
    let mut rel_sum = *relation_losses.values().next().expect("at least one scale");
    for v in relation_losses.values().skip(1) {
        rel_sum = tape.add(rel_sum, *v);
    }
    let rel_mean = tape.scale(rel_sum, 1.0 / relation_losses.len() as f64);
    let rel = tape.scale(rel_mean, cfg.lambda_relation);
    let td = tape.scale(temporal, cfg.lambda_temporal);
    let mut total = tape.add(cls, ae);
    total = tape.add(total, sp);
    total = tape.add(total, rel);
    total = tape.add(total, td);

    Ok(BuiltLosses {
        verb_cls,
        noun_cls,
        spatial,
        temporal,
        relation: relation_losses,
        attentive_verb,
        attentive_noun,
        total,
        ae_weights,
    })
}

/// x·W + b with explicit accumulation order (index-sequential over rows of W).
pub fn affine_vec(x: &Array1<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array1<f64> {
    let (rows, cols) = w.dim();
    assert_eq!(x.len(), rows, "affine input width");
    assert_eq!(b.dim(), (1, cols), "affine bias shape");
    let mut out = Array1::zeros(cols);
    for j in 0..cols {
        let mut acc = 0.0;
        for k in 0..rows {
            acc += x[k] * w[(k, j)];
        }
        out[j] = acc + b[(0, j)];
    }
    out
}

/// Softmax of one vector with max subtraction.
pub fn softmax_vec(x: &Array1<f64>) -> Array1<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = x.mapv(|v| (v - m).exp());
    let s = out.sum();
    out.mapv_inplace(|v| v / s);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn tiny_cfg() -> ActionConfig {
        ActionConfig {
            num_seg: 3,
            feat_dim: 4,
            input_dim: 5,
            num_verbs: 3,
            num_nouns: 4,
            relation_scales: vec![2, 3],
            tuples_per_scale: TupleMode::Exhaustive,
            lambda_spatial: 0.5,
            lambda_relation: 0.5,
            lambda_temporal: 0.5,
            gamma_attentive: 0.1,
            grl: GrlConfig::constant(1.0).unwrap(),
        }
    }

    fn random_clip(rng: &mut ChaCha8Rng, cfg: &ActionConfig, domain: DomainLabel, label: Option<(usize, usize)>) -> ClipFeatures {
        let frames = Array2::from_shape_fn((cfg.num_seg, cfg.input_dim), |_| rng.gen_range(-1.0..1.0));
        ClipFeatures::new(frames, domain, label)
    }

    #[test]
    fn config_validation_catches_bad_scales_and_weights() {
        let mut cfg = tiny_cfg();
        assert!(cfg.validate().is_ok());
        cfg.relation_scales = vec![1];
        assert!(cfg.validate().is_err());
        cfg.relation_scales = vec![4];
        assert!(cfg.validate().is_err());
        cfg.relation_scales = vec![2];
        cfg.lambda_spatial = -0.1;
        assert!(cfg.validate().is_err());
        cfg.lambda_spatial = 0.5;
        cfg.tuples_per_scale = TupleMode::Sampled(0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_zero_params_gives_zeros_and_identity_passes_through() {
        let mut cfg = tiny_cfg();
        cfg.input_dim = 4;
        let mut model = ActionModel::init(cfg.clone(), 7).unwrap();
        for (_, p) in model.params.iter_mut() {
            p.fill(0.0);
        }
        let clip = Array2::from_elem((3, 4), 1.5);
        let out = model.encode_frames(&clip).unwrap();
        assert_eq!(out, Array2::zeros((3, 4)));

        // identity projection on positive input passes through the relu
        *model.params.get_mut("encoder.w1") = Array2::eye(4);
        let pos = Array2::from_shape_fn((3, 4), |(i, j)| (i + j) as f64 + 0.5);
        assert_eq!(model.encode_frames(&pos).unwrap(), pos);

        let wrong = Array2::zeros((3, 6));
        assert!(model.encode_frames(&wrong).is_err());
    }

    #[test]
    fn encode_output_shape() {
        let cfg = tiny_cfg();
        let model = ActionModel::init(cfg.clone(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let clip = Array2::from_shape_fn((cfg.num_seg, cfg.input_dim), |_| rng.gen_range(-1.0..1.0));
        let out = model.encode_frames(&clip).unwrap();
        assert_eq!(out.dim(), (cfg.num_seg, cfg.feat_dim));
    }

    #[test]
    fn exhaustive_tuples_are_lexicographic_increasing() {
        let tuples = exhaustive_tuples(5, 2);
        assert_eq!(tuples.len(), 10);
        assert_eq!(tuples[0], vec![0, 1]);
        assert_eq!(tuples[9], vec![3, 4]);
        for t in &tuples {
            assert!(t[0] < t[1]);
        }
        let t3 = exhaustive_tuples(5, 3);
        assert_eq!(t3.len(), 10);
        for w in t3.windows(2) {
            assert!(w[0] < w[1], "lexicographic order");
        }
        assert_eq!(exhaustive_tuples(4, 4), vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn sampled_tuples_are_valid_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let a = sample_tuples(6, 3, 50, &mut rng);
        assert_eq!(a.len(), 50);
        for t in &a {
            assert!(t[0] < t[1] && t[1] < t[2] && t[2] < 6);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(61);
        let b = sample_tuples(6, 3, 50, &mut rng2);
        assert_eq!(a, b);
    }

    #[test]
    fn relation_single_tuple_ignores_seed() {
        let mut cfg = tiny_cfg();
        cfg.num_seg = 3;
        let model = ActionModel::init(cfg.clone(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let encoded = Array2::from_shape_fn((3, cfg.feat_dim), |_| rng.gen_range(-1.0..1.0));
        let a = model.relation_features(&encoded, 3, TupleMode::Sampled(1), 1).unwrap();
        let b = model.relation_features(&encoded, 3, TupleMode::Sampled(1), 999).unwrap();
        let c = model.relation_features(&encoded, 3, TupleMode::Exhaustive, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn relation_exhaustive_matches_enumeration_bit_exactly() {
        let mut cfg = tiny_cfg();
        cfg.num_seg = 5;
        let model = ActionModel::init(cfg.clone(), 9).unwrap();
        let f = cfg.feat_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let encoded = Array2::from_shape_fn((5, f), |_| rng.gen_range(-1.0..1.0));
        for &n in &[2usize, 3] {
            let got = model.relation_features(&encoded, n, TupleMode::Exhaustive, 0).unwrap();
            // independent enumeration: nested index loops, scalar dot products
            let w1 = model.params.get(&format!("relation.{n}.w1"));
            let b1 = model.params.get(&format!("relation.{n}.b1"));
            let w2 = model.params.get(&format!("relation.{n}.w2"));
            let b2 = model.params.get(&format!("relation.{n}.b2"));
            let mut tuples: Vec<Vec<usize>> = Vec::new();
            for i in 0..5 {
                for j in i + 1..5 {
                    if n == 2 {
                        tuples.push(vec![i, j]);
                    } else {
                        for k in j + 1..5 {
                            tuples.push(vec![i, j, k]);
                        }
                    }
                }
            }
            let mut acc = vec![0.0f64; f];
            for tuple in &tuples {
                let mut cat = vec![0.0f64; n * f];
                for (k, &fi) in tuple.iter().enumerate() {
                    for c in 0..f {
                        cat[k * f + c] = encoded[(fi, c)];
                    }
                }
                let mut h = vec![0.0f64; f];
                for (jo, hv) in h.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (ji, cv) in cat.iter().enumerate() {
                        s += cv * w1[(ji, jo)];
                    }
                    s += b1[(0, jo)];
                    *hv = s.max(0.0);
                }
                let mut o = vec![0.0f64; f];
                for (jo, ov) in o.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (ji, hv) in h.iter().enumerate() {
                        s += hv * w2[(ji, jo)];
                    }
                    *ov = s + b2[(0, jo)];
                }
                for c in 0..f {
                    acc[c] += o[c];
                }
            }
            for c in 0..f {
                let oracle = acc[c] / tuples.len() as f64;
                assert_eq!(got[c], oracle, "scale {n} component {c}");
            }
        }
    }

    #[test]
    fn relation_sampled_converges_to_exhaustive() {
        let mut cfg = tiny_cfg();
        cfg.num_seg = 5;
        let model = ActionModel::init(cfg.clone(), 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let encoded = Array2::from_shape_fn((5, cfg.feat_dim), |_| rng.gen_range(-1.0..1.0));
        for &n in &[2usize, 3] {
            let exact = model.relation_features(&encoded, n, TupleMode::Exhaustive, 0).unwrap();
            let sampled = model.relation_features(&encoded, n, TupleMode::Sampled(200), 5).unwrap();
            let diff = (&sampled - &exact).mapv(|v| v * v).sum().sqrt();
            let norm = exact.mapv(|v| v * v).sum().sqrt();
            assert!(diff / norm < 0.02, "scale {n}: relative error {}", diff / norm);
        }
    }

    #[test]
    fn frame_order_matters() {
        let mut cfg = tiny_cfg();
        cfg.num_seg = 4;
        let model = ActionModel::init(cfg.clone(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let encoded = Array2::from_shape_fn((4, cfg.feat_dim), |_| rng.gen_range(-1.0..1.0));
        let mut reversed = encoded.clone();
        for i in 0..4 {
            reversed.row_mut(i).assign(&encoded.row(3 - i));
        }
        let a = model.relation_features(&encoded, 2, TupleMode::Exhaustive, 0).unwrap();
        let b = model.relation_features(&reversed, 2, TupleMode::Exhaustive, 0).unwrap();
        let diff: f64 = (&a - &b).mapv(f64::abs).sum();
        assert!(diff > 1e-6, "order-reversal changed nothing");
    }

    #[test]
    fn aggregate_is_elementwise_sum() {
        let a = Array1::from_vec(vec![1.0, 2.0]);
        let b = Array1::from_vec(vec![-1.0, -2.0]);
        assert_eq!(ActionModel::aggregate_video(&[a.clone()]).unwrap(), a);
        assert_eq!(
            ActionModel::aggregate_video(&[a.clone(), b]).unwrap(),
            Array1::zeros(2)
        );
        let c = Array1::from_vec(vec![0.5, 0.25]);
        let s = ActionModel::aggregate_video(&[a.clone(), c.clone()]).unwrap();
        assert_eq!(s, &a + &c);
        assert!(ActionModel::aggregate_video(&[]).is_err());
    }

    #[test]
    fn classify_zero_weights_is_uniform_and_always_on_simplex() {
        let cfg = tiny_cfg();
        let mut model = ActionModel::init(cfg.clone(), 12).unwrap();
        for name in ["verb_head.w1", "verb_head.b1", "noun_head.w1", "noun_head.b1"] {
            model.params.get_mut(name).fill(0.0);
        }
        let video = Array1::from_vec(vec![0.3, -0.2, 0.9, 0.0]);
        let (verb, noun) = model.classify(&video).unwrap();
        for p in verb.probs().iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        for p in noun.probs().iter() {
            assert!((p - 0.25).abs() < 1e-12);
        }

        let model = ActionModel::init(cfg, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        for _ in 0..10 {
            let video = Array1::from_shape_fn(4, |_| rng.gen_range(-3.0..3.0));
            let (verb, noun) = model.classify(&video).unwrap();
            assert!((verb.probs().sum() - 1.0).abs() < 1e-6);
            assert!((noun.probs().sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn classify_logit_shift_invariance() {
        let cfg = tiny_cfg();
        let mut model = ActionModel::init(cfg, 14).unwrap();
        let video = Array1::from_vec(vec![0.7, -0.1, 0.2, 1.1]);
        let (verb_before, _) = model.classify(&video).unwrap();
        // adding a constant to every verb logit via the bias row
        {
            let b = model.params.get_mut("verb_head.b1");
            *b += 3.7;
        }
        let (verb_after, _) = model.classify(&video).unwrap();
        for (a, b) in verb_before.probs().iter().zip(verb_after.probs().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_are_gradient_isolated() {
        let cfg = tiny_cfg();
        let mut model = ActionModel::init(cfg, 15).unwrap();
        let video = Array1::from_vec(vec![0.4, 0.1, -0.6, 0.8]);
        let (verb_before, noun_before) = model.classify(&video).unwrap();
        model.params.get_mut("noun_head.w1")[(0, 0)] += 5.0;
        let (verb_after, noun_after) = model.classify(&video).unwrap();
        assert_eq!(verb_before, verb_after, "verb head must not see noun params");
        assert_ne!(noun_before, noun_after);
    }

    #[test]
    fn forward_losses_rejects_bad_batches() {
        let cfg = tiny_cfg();
        let model = ActionModel::init(cfg.clone(), 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let src = random_clip(&mut rng, &cfg, DomainLabel::Source, Some((0, 0)));
        let tgt = random_clip(&mut rng, &cfg, DomainLabel::Target, None);
        assert!(model.forward_losses(&[], &[tgt.clone()], 0.0, 0).is_err());
        assert!(model.forward_losses(&[src.clone()], &[], 0.0, 0).is_err());
        let unlabelled = random_clip(&mut rng, &cfg, DomainLabel::Source, None);
        assert!(matches!(
            model.forward_losses(&[unlabelled], &[tgt.clone()], 0.0, 0),
            Err(Error::MissingLabels(_))
        ));
    }

    #[test]
    fn forward_losses_deterministic_and_matches_total() {
        let cfg = tiny_cfg();
        let model = ActionModel::init(cfg.clone(), 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(68);
        let source: Vec<ClipFeatures> = (0..2)
            .map(|i| random_clip(&mut rng, &cfg, DomainLabel::Source, Some((i % 3, i % 4))))
            .collect();
        let target: Vec<ClipFeatures> =
            (0..2).map(|_| random_clip(&mut rng, &cfg, DomainLabel::Target, None)).collect();
        let a = model.forward_losses(&source, &target, 0.3, 42).unwrap();
        let b = model.forward_losses(&source, &target, 0.3, 42).unwrap();
        assert_eq!(a, b, "same inputs, same bundle");
        for (&n, &v) in &a.relation {
            assert!(v.is_finite() && v >= 0.0, "relation loss {n}");
        }
        for v in [a.verb_cls, a.noun_cls, a.spatial, a.temporal, a.attentive_verb, a.attentive_noun] {
            assert!(v.is_finite() && v >= 0.0);
        }
        // tape total equals the published formula applied to the bundle
        let mut tape = Tape::new();
        let vars = model.params.leaf_all(&mut tape);
        let plan = TuplePlan::build(&cfg, 4, 42);
        let built = build_losses(&mut tape, &vars, &cfg, &source, &target, 0.3, &plan, None).unwrap();
        let total_tape = tape.value(built.total)[(0, 0)];
        let total_formula = total_objective(&built.bundle(&tape), &cfg);
        assert!((total_tape - total_formula).abs() < 1e-12);
    }

    #[test]
    fn total_objective_formula() {
        let mut cfg = tiny_cfg();
        let mut bundle = LossBundle {
            verb_cls: 1.0,
            noun_cls: 1.0,
            spatial: 1.0,
            temporal: 1.0,
            relation: BTreeMap::from([(2, 1.0), (3, 1.0)]),
            attentive_verb: 1.0,
            attentive_noun: 1.0,
        };
        cfg.lambda_spatial = 1.0;
        cfg.lambda_relation = 1.0;
        cfg.lambda_temporal = 1.0;
        cfg.gamma_attentive = 1.0;
        // 2 (classification) + 2 (attentive) + 1 + 1 + 1 (three adversarial terms)
        assert!((total_objective(&bundle, &cfg) - 7.0).abs() < 1e-12);
        cfg.lambda_spatial = 0.0;
        cfg.lambda_relation = 0.0;
        cfg.lambda_temporal = 0.0;
        cfg.gamma_attentive = 0.0;
        assert!((total_objective(&bundle, &cfg) - 2.0).abs() < 1e-12);
        // random weights against a by-hand formula
        let mut rng = ChaCha8Rng::seed_from_u64(69);
        for _ in 0..10 {
            bundle.verb_cls = rng.gen_range(0.0..2.0);
            bundle.noun_cls = rng.gen_range(0.0..2.0);
            bundle.spatial = rng.gen_range(0.0..2.0);
            bundle.temporal = rng.gen_range(0.0..2.0);
            bundle.attentive_verb = rng.gen_range(0.0..2.0);
            bundle.attentive_noun = rng.gen_range(0.0..2.0);
            bundle.relation.insert(2, rng.gen_range(0.0..2.0));
            bundle.relation.insert(3, rng.gen_range(0.0..2.0));
            cfg.lambda_spatial = rng.gen_range(0.0..1.0);
            cfg.lambda_relation = rng.gen_range(0.0..1.0);
            cfg.lambda_temporal = rng.gen_range(0.0..1.0);
            cfg.gamma_attentive = rng.gen_range(0.0..1.0);
            let expect = bundle.verb_cls
                + bundle.noun_cls
                + cfg.gamma_attentive * (bundle.attentive_verb + bundle.attentive_noun)
                + cfg.lambda_spatial * bundle.spatial
                + cfg.lambda_relation * (bundle.relation[&2] + bundle.relation[&3]) / 2.0
                + cfg.lambda_temporal * bundle.temporal;
            assert!((total_objective(&bundle, &cfg) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_trace_oracle_on_tiny_batch() {
        // 2 source + 2 target clips, T=3, widths 4/5: every bundle entry is
        // recomputed step by step with vector helpers
        let cfg = tiny_cfg();
        let model = ActionModel::init(cfg.clone(), 18).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let source: Vec<ClipFeatures> = (0..2)
            .map(|i| random_clip(&mut rng, &cfg, DomainLabel::Source, Some((i, i + 1))))
            .collect();
        let target: Vec<ClipFeatures> =
            (0..2).map(|_| random_clip(&mut rng, &cfg, DomainLabel::Target, None)).collect();
        let bundle = model.forward_losses(&source, &target, 0.0, 0).unwrap();

        let clips: Vec<&ClipFeatures> = source.iter().chain(target.iter()).collect();
        let p = &model.params;
        let mlp2v = |prefix: &str, x: &Array1<f64>| -> Array1<f64> {
            let h = affine_vec(x, p.get(&format!("{prefix}.w1")), p.get(&format!("{prefix}.b1")))
                .mapv(|v| v.max(0.0));
            affine_vec(&h, p.get(&format!("{prefix}.w2")), p.get(&format!("{prefix}.b2")))
        };

        // encode all frames
        let encoded: Vec<Array2<f64>> = clips
            .iter()
            .map(|c| model.encode_frames(&c.frames).unwrap())
            .collect();

        // spatial loss over all 12 frames
        let mut sp = 0.0;
        for (ci, enc) in encoded.iter().enumerate() {
            for fi in 0..cfg.num_seg {
                let logits = mlp2v("disc_spatial", &enc.row(fi).to_owned());
                let probs = softmax_vec(&logits);
                sp -= probs[clips[ci].domain.index()].ln();
            }
        }
        sp /= (clips.len() * cfg.num_seg) as f64;
        assert!((bundle.spatial - sp).abs() < 1e-9, "{} vs {sp}", bundle.spatial);

        // relation features, per-scale discriminator losses, video features
        let mut videos: Vec<Array1<f64>> = Vec::new();
        let mut rel_losses: BTreeMap<usize, f64> = BTreeMap::new();
        let mut scale_feats: BTreeMap<usize, Vec<Array1<f64>>> = BTreeMap::new();
        for &n in &cfg.relation_scales {
            let feats: Vec<Array1<f64>> = encoded
                .iter()
                .map(|e| model.relation_features(e, n, TupleMode::Exhaustive, 0).unwrap())
                .collect();
            let mut loss = 0.0;
            for (ci, f) in feats.iter().enumerate() {
                let probs = softmax_vec(&mlp2v(&format!("disc_relation.{n}"), f));
                loss -= probs[clips[ci].domain.index()].ln();
            }
            rel_losses.insert(n, loss / clips.len() as f64);
            scale_feats.insert(n, feats);
        }
        for ci in 0..clips.len() {
            let per_scale: Vec<Array1<f64>> =
                cfg.relation_scales.iter().map(|n| scale_feats[n][ci].clone()).collect();
            videos.push(ActionModel::aggregate_video(&per_scale).unwrap());
        }
        for (&n, &l) in &rel_losses {
            assert!((bundle.relation[&n] - l).abs() < 1e-9, "scale {n}");
        }

        // temporal loss and attention weights
        let mut td = 0.0;
        let mut weights = Vec::new();
        for (ci, v) in videos.iter().enumerate() {
            let probs = softmax_vec(&mlp2v("disc_temporal", v));
            td -= probs[clips[ci].domain.index()].ln();
            if clips[ci].domain == DomainLabel::Target {
                let mut h = 0.0;
                for &q in probs.iter() {
                    if q > 0.0 {
                        h -= q * q.ln();
                    }
                }
                weights.push(1.0 + h);
            }
        }
        td /= clips.len() as f64;
        assert!((bundle.temporal - td).abs() < 1e-9);

        // classification on source, attentive entropy on target
        let mut verb_cls = 0.0;
        let mut noun_cls = 0.0;
        let mut ae_v = 0.0;
        let mut ae_n = 0.0;
        let mut wi = 0;
        for (ci, v) in videos.iter().enumerate() {
            let (verb, noun) = model.classify(v).unwrap();
            match clips[ci].domain {
                DomainLabel::Source => {
                    let (lv, ln_) = clips[ci].label.unwrap();
                    verb_cls -= verb.probs()[lv].ln();
                    noun_cls -= noun.probs()[ln_].ln();
                }
                DomainLabel::Target => {
                    let hv: f64 = -verb.probs().iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>();
                    let hn: f64 = -noun.probs().iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>();
                    ae_v += weights[wi] * hv;
                    ae_n += weights[wi] * hn;
                    wi += 1;
                }
            }
        }
        verb_cls /= source.len() as f64;
        noun_cls /= source.len() as f64;
        ae_v /= target.len() as f64;
        ae_n /= target.len() as f64;
        assert!((bundle.verb_cls - verb_cls).abs() < 1e-9);
        assert!((bundle.noun_cls - noun_cls).abs() < 1e-9);
        assert!((bundle.attentive_verb - ae_v).abs() < 1e-9);
        assert!((bundle.attentive_noun - ae_n).abs() < 1e-9);
    }

    #[test]
    fn grl_routes_gradients_with_opposite_signs() {
        // discriminator parameters receive +λ_t·d(temporal)/dθ; encoder
        // parameters receive the classification gradient minus λ·(weighted
        // domain gradients); checked against finite differences with γ = 0
        let mut cfg = tiny_cfg();
        cfg.gamma_attentive = 0.0;
        let model = ActionModel::init(cfg.clone(), 19).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let source: Vec<ClipFeatures> = (0..2)
            .map(|i| random_clip(&mut rng, &cfg, DomainLabel::Source, Some((i, i))))
            .collect();
        let target: Vec<ClipFeatures> =
            (0..2).map(|_| random_clip(&mut rng, &cfg, DomainLabel::Target, None)).collect();

        let eval_bundle = |params: &Params| -> LossBundle {
            let m = ActionModel { cfg: cfg.clone(), params: params.clone() };
            m.forward_losses(&source, &target, 0.0, 0).unwrap()
        };

        let mut tape = Tape::new();
        let vars = model.params.leaf_all(&mut tape);
        let plan = TuplePlan::build(&cfg, 4, 0);
        let built = build_losses(&mut tape, &vars, &cfg, &source, &target, 0.0, &plan, None).unwrap();
        tape.backward(built.total);
        let grads = model.params.grads_from(&tape, &vars);

        let h = 1e-5;
        let fd_of = |name: &str, i: usize, j: usize, pick: &dyn Fn(&LossBundle) -> f64| -> f64 {
            let mut plus = model.params.clone();
            plus.get_mut(name)[(i, j)] += h;
            let mut minus = model.params.clone();
            minus.get_mut(name)[(i, j)] -= h;
            (pick(&eval_bundle(&plus)) - pick(&eval_bundle(&minus))) / (2.0 * h)
        };

        // temporal discriminator: gradient is +λ_t × finite difference
        for &(i, j) in &[(0usize, 0usize), (1, 1), (2, 0)] {
            let fd = fd_of("disc_temporal.w1", i, j, &|b| b.temporal);
            let expect = cfg.lambda_temporal * fd;
            let got = grads["disc_temporal.w1"][(i, j)];
            let denom = expect.abs().max(got.abs()).max(1e-4);
            assert!((got - expect).abs() / denom < 1e-4, "disc ({i},{j}): {got} vs {expect}");
        }

        // encoder: classification FD minus λ-scaled weighted domain FDs
        // (λ = 1 from the constant schedule)
        let lambda = cfg.grl.lambda_at(0.0);
        for &(i, j) in &[(0usize, 0usize), (2, 3), (4, 1)] {
            let fd_cls = fd_of("encoder.w1", i, j, &|b| b.verb_cls + b.noun_cls);
            let fd_dom = fd_of("encoder.w1", i, j, &|b| {
                cfg.lambda_spatial * b.spatial
                    + cfg.lambda_relation * (b.relation[&2] + b.relation[&3]) / 2.0
                    + cfg.lambda_temporal * b.temporal
            });
            let expect = fd_cls - lambda * fd_dom;
            let got = grads["encoder.w1"][(i, j)];
            let denom = expect.abs().max(got.abs()).max(1e-4);
            assert!((got - expect).abs() / denom < 1e-4, "encoder ({i},{j}): {got} vs {expect}");
        }
    }

    #[test]
    fn attentive_weights_are_detached() {
        // the attention weights come from the temporal discriminator but act
        // as constants: the discriminator's gradient stays exactly
        // λ_t·d(temporal)/dθ even at γ = 1, and upstream parameters see the
        // attentive term only through frozen weights
        let mut cfg = tiny_cfg();
        cfg.gamma_attentive = 1.0;
        cfg.lambda_spatial = 0.0;
        cfg.lambda_relation = 0.0;
        cfg.lambda_temporal = 0.7;
        let model = ActionModel::init(cfg.clone(), 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let source: Vec<ClipFeatures> = (0..2)
            .map(|i| random_clip(&mut rng, &cfg, DomainLabel::Source, Some((i, i))))
            .collect();
        let target: Vec<ClipFeatures> =
            (0..2).map(|_| random_clip(&mut rng, &cfg, DomainLabel::Target, None)).collect();
        let plan = TuplePlan::build(&cfg, 4, 0);

        let mut tape = Tape::new();
        let vars = model.params.leaf_all(&mut tape);
        let built = build_losses(&mut tape, &vars, &cfg, &source, &target, 0.0, &plan, None).unwrap();
        tape.backward(built.total);
        let grads = model.params.grads_from(&tape, &vars);
        let frozen = built.ae_weights.clone();

        let eval_frozen = |params: &Params| -> (LossBundle, Array2<f64>) {
            let mut t = Tape::new();
            let vs = params.leaf_all(&mut t);
            let b = build_losses(&mut t, &vs, &cfg, &source, &target, 0.0, &plan, Some(&frozen)).unwrap();
            let bundle = b.bundle(&t);
            (bundle, b.ae_weights.clone())
        };

        let h = 1e-5;
        let fd_of = |name: &str, i: usize, j: usize, pick: &dyn Fn(&LossBundle) -> f64| -> f64 {
            let mut plus = model.params.clone();
            plus.get_mut(name)[(i, j)] += h;
            let mut minus = model.params.clone();
            minus.get_mut(name)[(i, j)] -= h;
            (pick(&eval_frozen(&plus).0) - pick(&eval_frozen(&minus).0)) / (2.0 * h)
        };

        // temporal discriminator: λ_t·FD(temporal) alone — were the weights
        // live, the attentive term would leak extra gradient here
        for &(i, j) in &[(0usize, 0usize), (1, 1), (2, 2)] {
            let fd = fd_of("disc_temporal.w1", i, j, &|b| b.temporal);
            let expect = cfg.lambda_temporal * fd;
            let got = grads["disc_temporal.w1"][(i, j)];
            let denom = expect.abs().max(got.abs()).max(1e-4);
            assert!((got - expect).abs() / denom < 1e-4, "disc ({i},{j}): {got} vs {expect}");
        }

        // upstream of the reversal layer: classification plus frozen-weight
        // attentive FDs minus λ-scaled temporal FD
        let lambda = cfg.grl.lambda_at(0.0);
        for &(i, j) in &[(0usize, 0usize), (2, 3)] {
            let fd_cls_ae = fd_of("encoder.w1", i, j, &|b| {
                b.verb_cls + b.noun_cls + cfg.gamma_attentive * (b.attentive_verb + b.attentive_noun)
            });
            let fd_td = fd_of("encoder.w1", i, j, &|b| b.temporal);
            let expect = fd_cls_ae - lambda * cfg.lambda_temporal * fd_td;
            let got = grads["encoder.w1"][(i, j)];
            let denom = expect.abs().max(got.abs()).max(1e-4);
            assert!((got - expect).abs() / denom < 1e-4, "encoder ({i},{j}): {got} vs {expect}");
        }

        // the classifier heads sit outside the adversarial path entirely
        for &(i, j) in &[(0usize, 0usize), (3, 1)] {
            let fd = fd_of("verb_head.w1", i, j, &|b| {
                b.verb_cls + cfg.gamma_attentive * b.attentive_verb
            });
            let got = grads["verb_head.w1"][(i, j)];
            let denom = fd.abs().max(got.abs()).max(1e-4);
            assert!((got - fd).abs() / denom < 1e-4, "verb head ({i},{j}): {got} vs {fd}");
        }
    }

    #[test]
    fn predict_is_deterministic_and_on_simplex() {
        let cfg = tiny_cfg();
        let model = ActionModel::init(cfg.clone(), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let clip = Array2::from_shape_fn((cfg.num_seg, cfg.input_dim), |_| rng.gen_range(-1.0..1.0));
        let (v1, n1) = model.predict(&clip).unwrap();
        let (v2, n2) = model.predict(&clip).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(n1, n2);
        assert_eq!(v1.len(), cfg.num_verbs);
        assert_eq!(n1.len(), cfg.num_nouns);
    }
}

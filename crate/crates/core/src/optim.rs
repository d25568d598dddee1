//! First-order optimizers and the stepwise learning-rate schedule.
//!
//! Updates run in f64 and land the parameters back on the f32 grid, together
//! with the optimizer's own buffers, so a run restored from a checkpoint
//! continues bit-identically to one that never stopped.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::autodiff::Params;
use crate::error::{Error, Result};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidConfig(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Full recipe for one training stage: optimizer, base learning rate, a
/// stepwise decay (multiply by `decay_factor` every `decay_interval` epochs),
/// and the loop sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::InvalidConfig(format!("decay_factor {} must be in (0, 1]", self.decay_factor)));
        }
        if self.decay_interval == 0 {
            return Err(Error::InvalidConfig("decay_interval must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!("weight_decay {} must be non-negative", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_interval) as i32)
    }
}

/// Per-parameter optimizer state. SGD keeps one velocity buffer per
/// parameter; Adam keeps first and second moment estimates. Buffers are
/// created lazily as zeros the first time a parameter is stepped.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    buffers: BTreeMap<String, Array2<f64>>,
}

fn quantize(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v as f32 as f64);
}

impl Optimizer {
    pub fn from_schedule(s: &TrainSchedule) -> Self {
        Optimizer {
            kind: s.optimizer,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    fn buffer(&mut self, key: String, rows: usize, cols: usize) -> &mut Array2<f64> {
        self.buffers.entry(key).or_insert_with(|| Array2::zeros((rows, cols)))
    }

    /// Applies one update to every parameter. `grads` may omit a parameter,
    /// which counts as a zero gradient so decay and momentum still act.
    /// `step_index` is the 1-based count of updates applied so far including
    /// this one; Adam's bias correction depends on it.
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &BTreeMap<String, Array2<f64>>,
        lr: f64,
        step_index: u64,
    ) {
        assert!(step_index >= 1, "step_index is 1-based");
        let zero_shapes: Vec<(String, usize, usize)> = params
            .iter()
            .map(|(n, v)| (n.clone(), v.dim().0, v.dim().1))
            .collect();
        for (name, rows, cols) in zero_shapes {
            let w = params.get(&name).clone();
            let mut g = match grads.get(&name) {
                Some(g) => g.clone(),
                None => Array2::zeros((rows, cols)),
            };
            if self.weight_decay != 0.0 {
                g = g + self.weight_decay * &w;
            }
            let update = match self.kind {
                OptimizerKind::Sgd => {
                    let momentum = self.momentum;
                    let buf = self.buffer(format!("vel.{name}"), rows, cols);
                    *buf = momentum * &*buf + &g;
                    quantize(buf);
                    lr * &*buf
                }
                OptimizerKind::Adam => {
                    let m = self.buffer(format!("m.{name}"), rows, cols);
                    *m = ADAM_BETA1 * &*m + (1.0 - ADAM_BETA1) * &g;
                    quantize(m);
                    let m = m.clone();
                    let v = self.buffer(format!("v.{name}"), rows, cols);
                    *v = ADAM_BETA2 * &*v + (1.0 - ADAM_BETA2) * &g.mapv(|x| x * x);
                    quantize(v);
                    let v = v.clone();
                    let mc = 1.0 - ADAM_BETA1.powi(step_index as i32);
                    let vc = 1.0 - ADAM_BETA2.powi(step_index as i32);
                    let mut u = Array2::zeros((rows, cols));
                    for ((i, j), out) in u.indexed_iter_mut() {
                        let mhat = m[(i, j)] / mc;
                        let vhat = v[(i, j)] / vc;
                        *out = lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                    u
                }
            };
            *params.get_mut(&name) = w - update;
        }
        params.quantize_f32();
    }

    /// Buffers under stable names, on the f32 grid, for checkpointing.
    pub fn export_state(&self) -> BTreeMap<String, Array2<f64>> {
        self.buffers.clone()
    }

    pub fn import_state(&mut self, state: BTreeMap<String, Array2<f64>>) {
        self.buffers = state;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn schedule(kind: OptimizerKind) -> TrainSchedule {
        TrainSchedule {
            optimizer: kind,
            learning_rate: 0.1,
            decay_factor: 0.5,
            decay_interval: 2,
            epochs: 6,
            momentum: 0.9,
            weight_decay: 0.01,
            batch_size: 4,
        }
    }

    fn toy_params(seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        p.insert("a", Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0)));
        p.insert("b", Array2::from_shape_fn((1, 3), |_| rng.gen_range(-1.0..1.0)));
        p.quantize_f32();
        p
    }

    fn toy_grads(seed: u64) -> BTreeMap<String, Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0)));
        g.insert("b".to_string(), Array2::from_shape_fn((1, 3), |_| rng.gen_range(-1.0..1.0)));
        g
    }

    #[test]
    fn schedule_validation() {
        let mut s = schedule(OptimizerKind::Sgd);
        assert!(s.validate().is_ok());
        s.learning_rate = 0.0;
        assert!(s.validate().is_err());
        s = schedule(OptimizerKind::Sgd);
        s.decay_factor = 1.5;
        assert!(s.validate().is_err());
        s = schedule(OptimizerKind::Sgd);
        s.decay_interval = 0;
        assert!(s.validate().is_err());
        s = schedule(OptimizerKind::Sgd);
        s.momentum = 1.0;
        assert!(s.validate().is_err());
        s = schedule(OptimizerKind::Sgd);
        s.batch_size = 0;
        assert!(s.validate().is_err());
        assert!(OptimizerKind::parse("adam").is_ok());
        assert!(OptimizerKind::parse("adamw").is_err());
    }

    #[test]
    fn schedule_steps_down_at_interval_boundaries() {
        let s = schedule(OptimizerKind::Sgd);
        let lrs: Vec<f64> = (0..6).map(|e| s.lr_at(e)).collect();
        assert_eq!(lrs, vec![0.1, 0.1, 0.05, 0.05, 0.025, 0.025]);
    }

    #[test]
    fn plain_sgd_matches_hand_update() {
        let mut s = schedule(OptimizerKind::Sgd);
        s.momentum = 0.0;
        s.weight_decay = 0.0;
        let mut params = toy_params(1);
        let before = params.get("a").clone();
        let grads = toy_grads(2);
        let mut opt = Optimizer::from_schedule(&s);
        opt.step(&mut params, &grads, 0.1, 1);
        let expect = (&before - 0.1 * &grads["a"]).mapv(|v| v as f32 as f64);
        for (got, want) in params.get("a").iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn sgd_momentum_and_decay_match_scalar_reference() {
        let mut s = schedule(OptimizerKind::Sgd);
        s.momentum = 0.9;
        s.weight_decay = 0.01;
        let mut params = toy_params(3);
        let grads1 = toy_grads(4);
        let grads2 = toy_grads(5);
        let mut w: Vec<f64> = params.get("a").iter().copied().collect();
        let mut vel = vec![0.0f64; w.len()];
        for grads in [&grads1, &grads2] {
            let g: Vec<f64> = grads["a"].iter().copied().collect();
            for i in 0..w.len() {
                let gd = g[i] + 0.01 * w[i];
                vel[i] = (0.9 * vel[i] + gd) as f32 as f64;
                w[i] = (w[i] - 0.1 * vel[i]) as f32 as f64;
            }
        }
        let mut opt = Optimizer::from_schedule(&s);
        opt.step(&mut params, &grads1, 0.1, 1);
        opt.step(&mut params, &grads2, 0.1, 2);
        for (got, want) in params.get("a").iter().zip(w.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let mut s = schedule(OptimizerKind::Adam);
        s.momentum = 0.0;
        s.weight_decay = 0.005;
        let mut params = toy_params(6);
        let mut w: Vec<f64> = params.get("b").iter().copied().collect();
        let mut m = vec![0.0f64; w.len()];
        let mut v = vec![0.0f64; w.len()];
        let steps: Vec<_> = (0..5).map(|k| toy_grads(10 + k)).collect();
        for (t, grads) in steps.iter().enumerate() {
            let g: Vec<f64> = grads["b"].iter().copied().collect();
            for i in 0..w.len() {
                let gd = g[i] + 0.005 * w[i];
                m[i] = (0.9 * m[i] + 0.1 * gd) as f32 as f64;
                v[i] = (0.999 * v[i] + 0.001 * gd * gd) as f32 as f64;
                let mhat = m[i] / (1.0 - 0.9f64.powi(t as i32 + 1));
                let vhat = v[i] / (1.0 - 0.999f64.powi(t as i32 + 1));
                w[i] = (w[i] - 0.01 * mhat / (vhat.sqrt() + 1e-8)) as f32 as f64;
            }
        }
        let mut opt = Optimizer::from_schedule(&s);
        for (t, grads) in steps.iter().enumerate() {
            opt.step(&mut params, grads, 0.01, t as u64 + 1);
        }
        for (got, want) in params.get("b").iter().zip(w.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_moves_by_signed_learning_rate() {
        let mut s = schedule(OptimizerKind::Adam);
        s.weight_decay = 0.0;
        let mut params = Params::new();
        params.insert("w", Array2::from_shape_fn((1, 3), |_| 0.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), ndarray::array![[2.0, -0.5, 3.0]]);
        let mut opt = Optimizer::from_schedule(&s);
        opt.step(&mut params, &grads, 0.01, 1);
        for (got, g) in params.get("w").iter().zip([2.0f64, -0.5, 3.0]) {
            let want = -0.01 * g / (g.abs() + 1e-8);
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn missing_gradient_still_applies_decay_and_momentum() {
        let mut s = schedule(OptimizerKind::Sgd);
        s.momentum = 0.9;
        s.weight_decay = 0.1;
        let mut params = toy_params(7);
        let before = params.get("b").clone();
        let mut grads = toy_grads(8);
        grads.remove("b");
        let mut opt = Optimizer::from_schedule(&s);
        opt.step(&mut params, &grads, 0.1, 1);
        let expect = (&before - 0.1 * (0.1 * &before).mapv(|v| v as f32 as f64)).mapv(|v| v as f32 as f64);
        for (got, want) in params.get("b").iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn parameters_and_buffers_stay_on_f32_grid() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut params = toy_params(11);
            let mut opt = Optimizer::from_schedule(&schedule(kind));
            for t in 1..=4 {
                opt.step(&mut params, &toy_grads(20 + t), 0.037, t);
            }
            for (_, a) in params.iter() {
                for &v in a.iter() {
                    assert_eq!(v, v as f32 as f64);
                }
            }
            for (_, a) in opt.export_state() {
                for &v in a.iter() {
                    assert_eq!(v, v as f32 as f64);
                }
            }
        }
    }

    #[test]
    fn resumed_run_is_bit_identical_to_uninterrupted_run() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let s = schedule(kind);
            let mut full = toy_params(30);
            let mut opt_full = Optimizer::from_schedule(&s);
            for t in 1..=6 {
                opt_full.step(&mut full, &toy_grads(40 + t), s.lr_at((t as usize - 1) / 2), t);
            }
            let mut head = toy_params(30);
            let mut opt_head = Optimizer::from_schedule(&s);
            for t in 1..=3 {
                opt_head.step(&mut head, &toy_grads(40 + t), s.lr_at((t as usize - 1) / 2), t);
            }
            let saved = opt_head.export_state();
            let mut opt_tail = Optimizer::from_schedule(&s);
            opt_tail.import_state(saved);
            for t in 4..=6 {
                opt_tail.step(&mut head, &toy_grads(40 + t), s.lr_at((t as usize - 1) / 2), t);
            }
            for ((na, a), (nb, b)) in full.iter().zip(head.iter()) {
                assert_eq!(na, nb);
                assert_eq!(a, b, "{kind:?} diverged after resume");
            }
        }
    }
}

//! Deep diagnostics: replicates the adaptive training loop and prints loss
//! components plus split accuracies every few epochs. Temporary tool.

use handshift::action::{build_losses, ActionModel, ClipFeatures, TuplePlan};
use handshift::adversarial::{DomainLabel, GrlConfig, GrlSchedule};
use handshift::autodiff::Tape;
use handshift::experiment::PipelineConfig;
use handshift::metrics::evaluate;
use handshift::optim::{Optimizer, OptimizerKind};
use handshift::synth::{gen_action_dataset, Split};
use handshift::train::{extract_features, predict_records, train_feature_extractor, FeatureMode};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut cfg = PipelineConfig::desk_scale();
    cfg.synth.box_min = 8.0;
    cfg.synth.box_max = 14.0;
    cfg.extractor_schedule.epochs = 30;
    cfg.extractor_schedule.decay_interval = 25;
    cfg.da_schedule.optimizer = OptimizerKind::Sgd;
    cfg.da_schedule.learning_rate = 0.02;
    cfg.da_schedule.momentum = 0.0;
    cfg.da_schedule.weight_decay = 1e-3;
    cfg.da_schedule.epochs = 150;
    cfg.da_schedule.decay_interval = 120;
    cfg.da_schedule.batch_size = 4;
    cfg.action.grl =
        GrlConfig::new(0.3, GrlSchedule::Ramp { steepness: 10.0 }).expect("grl");
    cfg.synth.channel_permutation = false;
    cfg.synth.scale_range = (0.7, 1.4);
    cfg.synth.offset_magnitude = 0.4;

    let seed = 1u64;
    let mut synth_cfg = cfg.synth.clone();
    synth_cfg.seed = seed;
    let ds = gen_action_dataset(&synth_cfg).expect("gen");
    let ext = train_feature_extractor(&ds, cfg.extractor.clone(), &cfg.extractor_schedule, seed)
        .expect("extractor")
        .model;
    let entries =
        extract_features(&ds.records, &ext, None, &cfg.handfeat, FeatureMode::RawGlobal).expect("x");
    let side = |dom, split| -> Vec<_> {
        entries.iter().filter(|e| e.domain == dom && e.split == split).cloned().collect()
    };
    let src_all = side(DomainLabel::Source, Split::Train);
    let tgt_all = side(DomainLabel::Target, Split::Train);
    let src: Vec<ClipFeatures> = src_all
        .iter()
        .map(|e| ClipFeatures { frames: e.features.clone(), domain: e.domain, label: e.label })
        .collect();
    let tgt: Vec<ClipFeatures> = tgt_all
        .iter()
        .map(|e| ClipFeatures { frames: e.features.clone(), domain: e.domain, label: None })
        .collect();

    let mut ac = cfg.action.clone();
    ac.input_dim = src[0].frames.ncols();
    let schedule = &cfg.da_schedule;
    let mut model = ActionModel::init(ac.clone(), seed).expect("init");
    let mut opt = Optimizer::from_schedule(schedule);
    let batches = src.len().div_ceil(schedule.batch_size);
    let total_steps = (batches * schedule.epochs) as u64;
    let mut step = 0u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for epoch in 0..schedule.epochs {
        let mut sidx: Vec<usize> = (0..src.len()).collect();
        sidx.shuffle(&mut rng);
        let mut tidx: Vec<usize> = (0..tgt.len()).collect();
        tidx.shuffle(&mut rng);
        let mut last = None;
        for k in 0..batches {
            let a = k * schedule.batch_size;
            let b = (a + schedule.batch_size).min(src.len());
            let sb: Vec<ClipFeatures> = sidx[a..b].iter().map(|&i| src[i].clone()).collect();
            let tb: Vec<ClipFeatures> =
                (a..b).map(|j| tgt[tidx[j % tidx.len()]].clone()).collect();
            let progress = step as f64 / total_steps as f64;
            let plan = TuplePlan::build(&ac, sb.len() + tb.len(), step ^ 0x9e37);
            let mut tape = Tape::new();
            let vars = model.params.leaf_all(&mut tape);
            let built =
                build_losses(&mut tape, &vars, &ac, &sb, &tb, progress, &plan, None).expect("b");
            tape.backward(built.total);
            let grads = model.params.grads_from(&tape, &vars);
            step += 1;
            opt.step(&mut model.params, &grads, schedule.lr_at(epoch), step);
            last = Some(built.bundle(&tape));
        }
        if epoch % 15 == 0 || epoch == schedule.epochs - 1 {
            let b = last.unwrap();
            let rel: f64 =
                b.relation.values().sum::<f64>() / b.relation.len() as f64;
            let acc = |dom, split| {
                let part = side(dom, split);
                let preds = predict_records(&model, &part).expect("p");
                let m = evaluate(&preds, &ds.sidecar).expect("e");
                (m.verb_top1, m.noun_top1, m.action_top1)
            };
            let (sv, sn, sa) = acc(DomainLabel::Source, Split::Test);
            let (tv, tn, ta) = acc(DomainLabel::Target, Split::Test);
            println!(
                "ep {epoch:3}  cls {:5.2}/{:5.2}  dom s/r/t {:5.3}/{:5.3}/{:5.3}  ae {:5.2}/{:5.2}  src {sv:5.1}/{sn:5.1}/{sa:5.1}  tgt {tv:5.1}/{tn:5.1}/{ta:5.1}",
                b.verb_cls, b.noun_cls, b.spatial, rel, b.temporal, b.attentive_verb, b.attentive_noun
            );
        }
    }
}

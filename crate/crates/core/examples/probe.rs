//! Stage-by-stage diagnostics for the desk-scale pipeline. Temporary tool.

use handshift::adversarial::DomainLabel;
use handshift::experiment::PipelineConfig;
use handshift::metrics::evaluate;
use handshift::optim::OptimizerKind;
use handshift::synth::{gen_action_dataset, Split};
use handshift::train::{
    extract_features, predict_records, train_da_model, train_feature_extractor, FeatureMode,
};

fn main() {
    let mut cfg = PipelineConfig::desk_scale();
    // candidate overrides under test
    cfg.synth.box_min = 8.0;
    cfg.synth.box_max = 14.0;
    cfg.synth.channel_permutation = false;
    cfg.synth.scale_range = (0.7, 1.4);
    cfg.synth.offset_magnitude = 0.4;
    cfg.extractor_schedule.epochs = 30;
    cfg.extractor_schedule.decay_interval = 25;
    cfg.da_schedule.optimizer = OptimizerKind::Sgd;
    cfg.da_schedule.learning_rate = 0.02;
    cfg.da_schedule.momentum = 0.0;
    cfg.da_schedule.weight_decay = 1e-3;
    cfg.da_schedule.epochs = 150;
    cfg.da_schedule.decay_interval = 120;
    cfg.da_schedule.batch_size = 4;
    cfg.action.grl = handshift::adversarial::GrlConfig::new(
        0.3,
        handshift::adversarial::GrlSchedule::Ramp { steepness: 10.0 },
    )
    .expect("grl");

    let seed = 1u64;
    let start = std::time::Instant::now();
    let mut synth_cfg = cfg.synth.clone();
    synth_cfg.seed = seed;
    let ds = gen_action_dataset(&synth_cfg).expect("gen");
    let run = train_feature_extractor(&ds, cfg.extractor.clone(), &cfg.extractor_schedule, seed)
        .expect("extractor");
    let l = &run.epoch_losses;
    println!("extractor loss: {:.3} -> {:.3}", l[0], l[l.len() - 1]);

    let entries =
        extract_features(&ds.records, &run.model, None, &cfg.handfeat, FeatureMode::RawGlobal)
            .expect("extract");
    let side = |dom, split| -> Vec<_> {
        entries.iter().filter(|e| e.domain == dom && e.split == split).cloned().collect()
    };
    let train_src = side(DomainLabel::Source, Split::Train);
    let train_tgt = side(DomainLabel::Target, Split::Train);

    let mut action_cfg = cfg.action.clone();
    action_cfg.input_dim = train_src[0].features.ncols();
    for source_only in [true, false] {
        let mut ac = action_cfg.clone();
        if source_only {
            ac.lambda_spatial = 0.0;
            ac.lambda_relation = 0.0;
            ac.lambda_temporal = 0.0;
            ac.gamma_attentive = 0.0;
        }
        let da = train_da_model(&train_src, &train_tgt, ac, &cfg.da_schedule, seed, None, None)
            .expect("da");
        let t = &da.epoch_totals;
        println!(
            "{} loss: {:.3} -> {:.3}",
            if source_only { "source-only" } else { "full-da    " },
            t[0],
            t[t.len() - 1]
        );
        for (name, dom, split) in [
            ("  source train", DomainLabel::Source, Split::Train),
            ("  source test ", DomainLabel::Source, Split::Test),
            ("  target test ", DomainLabel::Target, Split::Test),
        ] {
            let part = side(dom, split);
            let preds = predict_records(&da.model, &part).expect("pred");
            let m = evaluate(&preds, &ds.sidecar).expect("eval");
            println!(
                "{name}: verb1 {:5.1} noun1 {:5.1} act1 {:5.1}",
                m.verb_top1, m.noun_top1, m.action_top1
            );
        }
    }
    println!("elapsed {:.1} s", start.elapsed().as_secs_f64());
}

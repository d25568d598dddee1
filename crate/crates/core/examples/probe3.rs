//! Detector diagnostics: rendering transfer plus the benchmark-test IoU of
//! adversarial vs source-only detectors. Temporary tool.

use handshift::adversarial::DomainLabel;
use handshift::experiment::PipelineConfig;
use handshift::handdet::DetectorModel;
use handshift::handfeat::BoundingBox;
use handshift::synth::{gen_action_dataset, gen_detector_dataset, Split};
use handshift::train::{detector_rendering, train_hand_detector};

fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let ua = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    inter / ua
}

fn bench_iou(det: &DetectorModel, ds: &handshift::synth::DetectorDataset) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for rec in ds
        .records
        .iter()
        .filter(|r| r.domain == DomainLabel::Target && r.split == Split::Test)
    {
        let dets = det.detect(&rec.pixels).expect("detect");
        for truth in &ds.sidecar[&rec.id] {
            let best = dets.iter().map(|p| iou(&p.bbox, truth)).fold(0.0, f64::max);
            sum += best;
            n += 1;
        }
    }
    sum / n as f64
}

fn main() {
    let cfg = PipelineConfig::desk_scale();
    let start = std::time::Instant::now();
    for seed in [1u64, 2, 3] {
        let mut synth_cfg = cfg.synth.clone();
        synth_cfg.seed = seed;
        let action_ds = gen_action_dataset(&synth_cfg).expect("gen");
        let det_ds = gen_detector_dataset(&synth_cfg).expect("gen det");
        let mut long = cfg.detector_schedule.clone();
        long.decay_interval = 24;
        long.epochs = 60;
        let da = train_hand_detector(&det_ds, cfg.detector.clone(), &long, seed)
            .expect("det")
            .model;
        let mut solo_cfg = cfg.detector.clone();
        solo_cfg.domain_weight = 0.0;
        let solo = train_hand_detector(&det_ds, solo_cfg, &long, seed)
            .expect("det")
            .model;
        let render_ds = handshift::train::rendering_detector_dataset(&action_ds, 2).expect("render ds");
        let rdet = train_hand_detector(&render_ds, cfg.detector.clone(), &cfg.detector_schedule, seed)
            .expect("rdet")
            .model;
        print!("seed {seed}: bench tgt IoU da {:.3} solo {:.3}  ", bench_iou(&da, &det_ds), bench_iou(&solo, &det_ds));
        for dom in [DomainLabel::Source, DomainLabel::Target] {
            let mut iou_sum = 0.0;
            let mut frames = 0usize;
            for rec in action_ds.records.iter().filter(|r| r.domain == dom) {
                for (t, map) in rec.rgb.iter().enumerate() {
                    let rendering = detector_rendering(map);
                    let dets = rdet.detect(&rendering).expect("detect");
                    let best = dets.first().map(|p| iou(&p.bbox, &rec.boxes[t])).unwrap_or(0.0);
                    iou_sum += best;
                    frames += 1;
                }
            }
            print!("render {dom:?} IoU {:.3}  ", iou_sum / frames as f64);
        }
        println!();
    }
    println!("elapsed {:.1} s", start.elapsed().as_secs_f64());
}

//! Detector training trajectory for one seed: losses and target IoU per
//! epoch band. Temporary tool.

use handshift::adversarial::DomainLabel;
use handshift::experiment::PipelineConfig;
use handshift::handdet::{DetImage, DetectorModel};
use handshift::handfeat::BoundingBox;
use handshift::optim::Optimizer;
use handshift::synth::{gen_detector_dataset, Split};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let ua = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    inter / ua
}

fn bench(det: &DetectorModel, ds: &handshift::synth::DetectorDataset, dom: DomainLabel) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for rec in ds.records.iter().filter(|r| r.domain == dom && r.split == Split::Test) {
        let dets = det.detect(&rec.pixels).expect("detect");
        for truth in &ds.sidecar[&rec.id] {
            sum += dets.iter().map(|p| iou(&p.bbox, truth)).fold(0.0, f64::max);
            n += 1;
        }
    }
    sum / n as f64
}

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2);
    let cfg = PipelineConfig::desk_scale();
    let mut synth_cfg = cfg.synth.clone();
    synth_cfg.seed = seed;
    let shift = handshift::synth::detector_shift(&synth_cfg);
    println!("seed {seed} detector shift: contrast {:.3} brightness {:.3}", shift.0, shift.1);
    let ds = gen_detector_dataset(&synth_cfg).expect("gen");
    let pick = |dom, split| -> Vec<DetImage> {
        ds.records
            .iter()
            .filter(|r| r.domain == dom && r.split == split)
            .map(|r| DetImage { pixels: r.pixels.clone(), boxes: r.boxes.clone() })
            .collect()
    };
    let sources = pick(DomainLabel::Source, Split::Train);
    let targets = pick(DomainLabel::Target, Split::Train);
    let schedule = &cfg.detector_schedule;
    let mut model = DetectorModel::init(cfg.detector.clone(), seed).expect("init");
    let mut opt = Optimizer::from_schedule(schedule);
    let units = 2 * sources.len();
    let batches = units.div_ceil(schedule.batch_size);
    let total_steps = (batches * schedule.epochs) as u64;
    let mut step = 0u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
    for epoch in 0..schedule.epochs {
        let mut tperm: Vec<usize> = (0..targets.len()).collect();
        tperm.shuffle(&mut rng);
        let mut pairs: Vec<(usize, usize)> =
            (0..units).map(|k| (k % sources.len(), tperm[k % tperm.len()])).collect();
        pairs.shuffle(&mut rng);
        let mut det_sum = 0.0;
        let mut dom_sum = 0.0;
        for chunk in pairs.chunks(schedule.batch_size) {
            let sb: Vec<DetImage> = chunk.iter().map(|&(i, _)| sources[i].clone()).collect();
            let tb: Vec<DetImage> = chunk.iter().map(|&(_, j)| targets[j].clone()).collect();
            let progress = step as f64 / total_steps as f64;
            let (losses, grads) = model.step_gradients(&sb, &tb, progress).expect("step");
            det_sum += losses.detection;
            dom_sum += losses.levels.iter().sum::<f64>();
            step += 1;
            opt.step(model.params_mut(), &grads, schedule.lr_at(epoch), step);
        }
        if epoch % 6 == 0 || epoch == schedule.epochs - 1 {
            println!(
                "ep {epoch:3}  det {:7.4}  dom {:7.4}  src IoU {:.3}  tgt IoU {:.3}",
                det_sum / batches as f64,
                dom_sum / batches as f64,
                bench(&model, &ds, DomainLabel::Source),
                bench(&model, &ds, DomainLabel::Target),
            );
        }
    }
}

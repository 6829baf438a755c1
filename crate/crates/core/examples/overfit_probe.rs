use std::time::Instant;
use volseg_core::data::augment::normalize_sample;
use volseg_core::data::phantom::{generate_dataset, PhantomSpec};
use volseg_core::infer::sliding_window_infer;
use volseg_core::metrics::{evaluate_case, RegionMapping};
use volseg_core::model::ModelConfig;
use volseg_core::train::{train_loop, TrainConfig};

fn main() {
    let dir = std::env::temp_dir().join("overfit_probe");
    let _ = std::fs::remove_dir_all(&dir);
    let data = dir.join("data");
    std::fs::create_dir_all(&data).unwrap();
    let spec = PhantomSpec { extent: (64, 64, 64), ..Default::default() };
    generate_dataset(&data, 2, 7, &spec).unwrap();

    let model_cfg = ModelConfig::preset("tiny").unwrap();
    let train_cfg = TrainConfig {
        epochs: 150, // 2 cases, batch 1 -> 300 steps
        batch_size: 1,
        seed: 3,
        ..Default::default()
    };
    let t0 = Instant::now();
    let out = train_loop(&model_cfg, &train_cfg, &data, &dir.join("run"), None).unwrap();
    let train_time = t0.elapsed().as_secs_f64();
    println!("train: {:.0}s for {} steps ({:.2} s/step)", train_time, out.trace.len(), train_time / out.trace.len() as f64);
    println!("loss first {:.4} mid {:.4} last {:.4}",
        out.trace.first().unwrap().loss,
        out.trace[out.trace.len()/2].loss,
        out.trace.last().unwrap().loss);

    // evaluate on the training phantoms
    let mapping = RegionMapping::default();
    let mut dices = Vec::new();
    for id in ["phantom_000", "phantom_001"] {
        let mut s = volseg_core::data::rawvol::read_case(&data.join(id)).unwrap();
        normalize_sample(&mut s);
        let gt = s.label.clone().unwrap();
        let pred = sliding_window_infer(&out.model, &s.modalities, s.extent, 32).unwrap();
        let r = evaluate_case(id, &pred, &gt, &mapping, s.extent, s.spacing).unwrap();
        println!("{id}: dice ET {:.4} TC {:.4} WT {:.4} | hd95 ET {:.2} TC {:.2} WT {:.2}",
            r.et.dice, r.tc.dice, r.wt.dice, r.et.hd95, r.tc.hd95, r.wt.hd95);
        dices.extend([r.et.dice, r.tc.dice, r.wt.dice]);
    }
    let mean = dices.iter().sum::<f64>() / dices.len() as f64;
    println!("mean training dice: {:.4}  (>= 0.90 required)", mean);
}

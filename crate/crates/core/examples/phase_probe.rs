use std::time::Instant;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use volseg_core::data::augment::{augment, normalize_sample, sample_rng};
use volseg_core::data::phantom::{generate_phantom, PhantomSpec};
use volseg_core::layers::Mode;
use volseg_core::metrics::softmax_dice_loss;
use volseg_core::model::{Model, ModelConfig};
use volseg_core::tensor::ops;
use volseg_core::train::{adam_step, AdamHyper, AdamState};
use volseg_core::Tensor;

fn main() {
    let spec = PhantomSpec { extent: (64, 64, 64), ..Default::default() };
    let mut sample = generate_phantom("p0", &spec, &mut ChaCha12Rng::seed_from_u64(7)).unwrap();
    normalize_sample(&mut sample);
    let cfg = ModelConfig::preset("tiny").unwrap();
    let mut model = Model::<f32>::build(&cfg, 3).unwrap();
    let mut adam = AdamState::new(&model);
    for step in 0..3u64 {
        let t0 = Instant::now();
        let s = augment(&sample, cfg.input_extent, &mut sample_rng(3, "p0", step as usize));
        let x = Tensor::from_vec(s.modalities.clone(), &[1, 4, 64, 64, 64]);
        let labels = s.label.clone().unwrap();
        let t_aug = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        model.zero_grads();
        let mut rng = sample_rng(3, "dropout", step as usize);
        let logits = model.forward(&x, Mode::Train, &mut rng).unwrap();
        let t_fwd = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        let loss = softmax_dice_loss(&logits, &labels).unwrap();
        let t_loss = t2.elapsed().as_secs_f64();

        let t3 = Instant::now();
        loss.backward().unwrap();
        let t_bwd = t3.elapsed().as_secs_f64();

        let t4 = Instant::now();
        adam_step(&mut model, &mut adam, 4e-4, &AdamHyper::default()).unwrap();
        let t_adam = t4.elapsed().as_secs_f64();
        println!(
            "step {step}: aug {t_aug:.2}s fwd {t_fwd:.2}s loss {t_loss:.2}s bwd {t_bwd:.2}s adam {t_adam:.2}s total {:.2}s (loss {:.4})",
            t0.elapsed().as_secs_f64(), loss.item()
        );
    }
    let x = Tensor::from_vec(sample.modalities.clone(), &[1, 4, 64, 64, 64]);
    let t = Instant::now();
    let _ = volseg_core::no_grad(|| model.forward(&x, Mode::Eval, &mut ChaCha12Rng::seed_from_u64(0)).unwrap());
    println!("eval fwd: {:.2}s", t.elapsed().as_secs_f64());
    let big = Tensor::<f32>::from_vec(vec![0.5; 8 * 262144], &[1, 8, 64, 64, 64]);
    let t = Instant::now();
    for _ in 0..20 { let _ = ops::relu(&big); }
    println!("relu 2M x20: {:.3}s", t.elapsed().as_secs_f64());
}

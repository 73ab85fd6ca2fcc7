//! A desk-sized model must be able to memorise one pair.

use wsdt::diffusion::NoiseSchedule;
use wsdt::training::{generate_synth, loss_recon, SynthSpec, TrainConfig};
use wsdt::wsdt::ModelConfig;
use wsdt::Trainer32;

#[test]
fn desk_model_memorises_a_single_pair() {
    let model = ModelConfig::desk();
    let mut cfg = TrainConfig::for_model(&model);
    cfg.batch_size = 1;
    cfg.iterations = 2000;
    cfg.alpha = 0.02;
    cfg.lr_g = 5e-4;
    let data = generate_synth::<f32>(&SynthSpec::new(11, 1, model.height, model.width, model.upscale)).unwrap();
    let mut tr = Trainer32::new(model, cfg, NoiseSchedule::default()).unwrap();
    for _ in 0..2000 {
        tr.step(&data).unwrap();
    }
    let mut worst = 0.0f32;
    for t in 0..model.steps {
        for seed in 0..4 {
            let pred = tr.predict_clean(&data[0], t, seed).unwrap();
            let (l_pixel, _) = loss_recon(&pred, &data[0].hr, model.levels).unwrap();
            worst = worst.max(l_pixel);
        }
    }
    println!("worst L_pixel after 2000 steps: {worst:.4}");
    assert!(worst < 0.02, "L_pixel {worst}");
}

use std::f64::consts::LN_2;

use super::*;
use crate::wavelet::SubBand;

fn tiny_trainer(alpha: f64, seed: u64) -> Trainer<f64> {
    let model = ModelConfig::tiny();
    let cfg = TrainConfig {
        alpha,
        seed,
        batch_size: 1,
        lr_g: 1e-3,
        lr_d: 1e-3,
        discriminator: DiscConfig {
            widths: vec![8, 8],
            strides: vec![2, 2],
            time_dim: 8,
            slope: 0.2,
        },
        ..TrainConfig::for_model(&model)
    };
    Trainer::new(model, cfg, NoiseSchedule::default()).unwrap()
}

fn tiny_data(count: usize, seed: u64) -> Vec<Pair<f64>> {
    generate_synth(&SynthSpec::new(seed, count, 8, 8, 2)).unwrap()
}

#[test]
fn softplus_is_stable() {
    assert!((softplus(0.0) - LN_2).abs() < 1e-15);
    assert_eq!(softplus(1000.0), 1000.0);
    assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
}

#[test]
fn recon_identical_is_zero() {
    let a = Image::from_fn(8, 8, 3, |y, x, c| ((y * 3 + x + c) as f64).sin());
    assert_eq!(loss_recon(&a, &a, 3).unwrap(), (0.0, 0.0));
    assert!(matches!(
        loss_recon(&a, &Image::zeros(8, 4, 3), 1),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn recon_constant_offset() {
    let delta = -0.3;
    let a = Image::from_fn(8, 8, 2, |y, x, c| 0.1 * (y + x + c) as f64);
    let b = a.map(|v| v + delta);
    for j in 1..=3 {
        let (pixel, fre) = loss_recon(&b, &a, j).unwrap();
        assert!((pixel - delta.abs()).abs() < 1e-12);
        let diff = mdwt(&b.zip_map(&a, |x, y| x - y).unwrap(), j).unwrap();
        // LF carries 2^J·|δ|, every detail band is zero
        assert!(diff
            .low()
            .data()
            .iter()
            .all(|v| (v.abs() - 2f64.powi(j as i32) * delta.abs()).abs() < 1e-12));
        for level in 1..=j {
            for band in SubBand::ALL {
                assert!(diff.band(level, band).unwrap().data().iter().all(|v| v.abs() < 1e-12));
            }
        }
        let low_share = (8 >> j) * (8 >> j) * 2;
        let expect = low_share as f64 * 2f64.powi(j as i32) * delta.abs() / 128.0;
        assert!((fre - expect).abs() < 1e-12);
    }
}

#[test]
fn recon_zero_iff() {
    let a = Image::from_fn(4, 4, 1, |y, x, _| (y * 4 + x) as f64 / 16.0);
    let mut b = a.clone();
    b.data_mut()[5] += 1e-6;
    let (p, f) = loss_recon(&a, &b, 2).unwrap();
    assert!(p > 0.0 && f > 0.0);
}

#[test]
fn adversarial_examples() {
    let (d, g) = loss_adv(0.0, 0.0);
    assert!((d - 2.0 * LN_2).abs() < 1e-15);
    assert!((g - LN_2).abs() < 1e-15);
    let (d, _) = loss_adv(60.0, -60.0);
    assert!(d < 1e-20);
    let gs: Vec<f64> = (-20..=20).map(|k| loss_adv(0.0, k as f64 * 0.5).1).collect();
    assert!(gs.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn discriminator_symmetry() {
    let tr = tiny_trainer(1.0, 0);
    let data = tiny_data(3, 1);
    let (a, b, c) = (&data[0].hr, &data[1].hr, &data[2].hr);
    let ctx = c.to_tensor();
    let la = tr
        .discriminator
        .logit(&tr.disc_params, &a.to_tensor(), &ctx, 2)
        .unwrap();
    let lb = tr
        .discriminator
        .logit(&tr.disc_params, &b.to_tensor(), &ctx, 2)
        .unwrap();
    let (d_ab, _) = loss_adv_pairs(&tr.discriminator, &tr.disc_params, a, b, c, 2).unwrap();
    let (d_ba, _) = loss_adv_pairs(&tr.discriminator, &tr.disc_params, b, a, c, 2).unwrap();
    assert!((d_ab - (softplus(-la) + softplus(lb))).abs() < 1e-12);
    assert!((d_ba - (softplus(-lb) + softplus(la))).abs() < 1e-12);
    assert!(la.is_finite() && lb.is_finite());
}

#[test]
fn discriminator_validation() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bad = DiscConfig {
        strides: vec![3, 2, 2],
        ..DiscConfig::default()
    };
    assert!(matches!(
        Discriminator::new(&mut store, &bad, (64, 64, 3), 4, &mut rng),
        Err(Error::Config(_))
    ));
    let d = Discriminator::new(&mut store, &DiscConfig::default(), (16, 16, 3), 4, &mut rng).unwrap();
    let x = Tensor::zeros(&[16, 16, 3]);
    assert!(matches!(d.logit(&store, &x, &x, 4), Err(Error::Contract(_))));
    assert!(matches!(
        d.logit(&store, &Tensor::zeros(&[8, 16, 3]), &x, 0),
        Err(Error::Dimension(_))
    ));
}

/// Central differences of the discriminator logit with respect to its weights.
#[test]
fn discriminator_gradients() {
    let tr = tiny_trainer(1.0, 3);
    let data = tiny_data(2, 4);
    let (cand, ctx) = (data[0].hr.to_tensor(), data[1].hr.to_tensor());
    let mut g = Graph::new(&tr.disc_params, true);
    let (a, b) = (g.constant(cand.clone()), g.constant(ctx.clone()));
    let l = tr.discriminator.forward(&mut g, a, b, 1).unwrap();
    let s = g.tape.sum(l);
    let grads = g.backward(s).unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|t| t.data().to_vec()).collect();
    let flat = tr.disc_params.flatten();
    let numeric = crate::gradcheck::central_difference(
        |x| {
            let mut p = tr.disc_params.clone();
            p.unflatten(x).unwrap();
            tr.discriminator.logit(&p, &cand, &ctx, 1).unwrap()
        },
        &flat,
        1e-5,
    );
    let err = crate::gradcheck::max_relative_error(&analytic, &numeric, 1e-6);
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn zero_weights_generator_loss_is_alpha_log2() {
    let mut tr = tiny_trainer(0.7, 5);
    tr.config.beta = 0.0;
    tr.config.gamma = 0.0;
    // untrained discriminator pinned at logit 0
    let ids: Vec<_> = tr.disc_params.ids().collect();
    for id in ids {
        let shape = tr.disc_params.get(id).shape().to_vec();
        *tr.disc_params.get_mut(id) = Tensor::zeros(&shape);
    }
    let l = tr.step(&tiny_data(2, 6)).unwrap();
    assert!((l.l_d - 2.0 * LN_2).abs() < 1e-12);
    assert!((l.l_g - 0.7 * LN_2).abs() < 1e-12);
}

#[test]
fn determinism() {
    let data = tiny_data(4, 7);
    let run = || {
        let mut tr = tiny_trainer(1.0, 8);
        (0..5).map(|_| tr.step(&data).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_continues_trajectory() {
    let data = tiny_data(4, 9);
    let mut a = tiny_trainer(1.0, 10);
    let full: Vec<_> = (0..4).map(|_| a.step(&data).unwrap()).collect();
    let mut b = tiny_trainer(1.0, 10);
    b.step(&data).unwrap();
    b.step(&data).unwrap();
    let mut c = b.clone();
    let tail: Vec<_> = (0..2).map(|_| c.step(&data).unwrap()).collect();
    assert_eq!(&full[2..], &tail[..]);
    assert_eq!(a, c);
}

#[test]
fn reconstruction_only_overfits() {
    let data = tiny_data(1, 11);
    let mut tr = tiny_trainer(0.0, 12);
    tr.config.batch_size = 4;
    let losses: Vec<f64> = (0..300).map(|_| tr.step(&data).unwrap().l_pixel).collect();
    // the noise level varies per step, so compare windowed means
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[280..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.5 * head, "head {head} tail {tail}");
}

#[test]
fn every_generator_parameter_gets_gradient() {
    let mut tr = tiny_trainer(1.0, 13);
    tr.generator.randomize(0.3, 14);
    let data = tiny_data(1, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for t in 0..4 {
        let n = tr.noise(&data[0].hr, &mut rng).unwrap();
        let mut g = Graph::new(&tr.generator.params, true);
        let x0 = tr.generator.arch.forward(&mut g, &n.current, &data[0].lr, t).unwrap();
        let (p, f) = recon_on_tape(&mut g, x0, &data[0].hr, 1).unwrap();
        let loss = g.tape.add(p, f).unwrap();
        let grads = g.backward(loss).unwrap();
        for (id, gr) in tr.generator.params.ids().zip(&grads) {
            let name = tr.generator.params.name(id);
            assert!(gr.data().iter().any(|v| *v != 0.0), "t={t}: no gradient for {name}");
        }
    }
}

#[test]
fn config_validation() {
    let model = ModelConfig::tiny();
    let ok = TrainConfig::for_model(&model);
    assert!(ok.validate(&model).is_ok());
    for bad in [
        TrainConfig {
            alpha: -1.0,
            ..ok.clone()
        },
        TrainConfig {
            lr_g: 0.0,
            ..ok.clone()
        },
        TrainConfig {
            batch_size: 0,
            ..ok.clone()
        },
        TrainConfig {
            upscale: 4,
            ..ok.clone()
        },
    ] {
        assert!(matches!(bad.validate(&model), Err(Error::Config(_))));
    }
    let short = NoiseSchedule::new(vec![0.99, 0.01]).unwrap();
    assert!(Trainer::<f32>::new(model, ok.clone(), short).is_err());
    let json = serde_json::to_string(&ok).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), ok);
    assert!(serde_json::from_str::<TrainConfig>(&json.replace("\"alpha\"", "\"alpah\"")).is_err());
}

#[test]
fn synth_is_deterministic_and_bounded() {
    let spec = SynthSpec::new(42, 12, 16, 16, 4);
    let a: Vec<Pair<f32>> = generate_synth(&spec).unwrap();
    let b: Vec<Pair<f32>> = generate_synth(&spec).unwrap();
    assert_eq!(a, b);
    let other: Vec<Pair<f32>> = generate_synth(&SynthSpec {
        seed: 43,
        ..spec.clone()
    })
    .unwrap();
    assert_ne!(a, other);
    for p in &a {
        assert!(p.hr.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(p.lr, p.hr.box_downsample(4).unwrap());
    }
    for pattern in Pattern::ALL {
        let one = SynthSpec {
            patterns: vec![pattern],
            count: 3,
            ..spec.clone()
        };
        for p in generate_synth::<f64>(&one).unwrap() {
            assert!(p.hr.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            let spread = p.hr.data().iter().cloned().fold(f64::MIN, f64::max)
                - p.hr.data().iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread > 0.05, "{pattern:?} is nearly flat");
        }
    }
}

#[test]
fn synth_constant_and_errors() {
    let hr = Image::<f64>::filled(8, 8, 3, 0.25);
    let pair = Pair::from_hr(hr, 4, Degradation::Box).unwrap();
    assert!(pair.lr.data().iter().all(|&v| v == 0.25));
    for bad in [
        SynthSpec::new(0, 1, 10, 8, 4),
        SynthSpec::new(0, 1, 0, 8, 4),
        SynthSpec {
            patterns: vec![],
            ..SynthSpec::new(0, 1, 8, 8, 4)
        },
    ] {
        assert!(matches!(generate_synth::<f32>(&bad), Err(Error::Config(_))));
    }
}

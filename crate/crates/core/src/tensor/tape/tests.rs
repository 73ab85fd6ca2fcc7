use super::*;
use crate::gradcheck::{central_difference, max_relative_error};
use crate::masks::{AttentionMask, Segment, SegmentLayout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn t2(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(rows)
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Contracts the op output with a fixed random tensor and compares the
/// analytic gradient of every input against central differences.
fn check_grad(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.shape(out).to_vec()
    };
    let weights = rand_tensor(&probe_shape, &mut rng);
    let eval = |vals: &[Tensor<f64>], grads: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| {
                if grads {
                    tape.variable(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let out = build(&mut tape, &vars).unwrap();
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss).item().unwrap();
        let g = if grads {
            tape.backward(loss).unwrap();
            vars.iter()
                .map(|&v| {
                    tape.grad(v)
                        .map(|g| g.into_data())
                        .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
                })
                .collect()
        } else {
            Vec::new()
        };
        (value, g)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let numeric = central_difference(
            |x| {
                let mut vals = inputs.to_vec();
                vals[i] = Tensor::new(input.shape(), x.to_vec()).unwrap();
                eval(&vals, false).0
            },
            input.data(),
            1e-5,
        );
        worst = worst.max(max_relative_error(&analytic[i], &numeric, 1e-6));
    }
    worst
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::<f64>::new();
    let i = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let ii = tape.matmul(i, i).unwrap();
    assert_eq!(tape.value(ii), tape.value(i));

    let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let b = tape.constant(t2(&[&[1.0], &[1.0]]));
    let y = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(y), &t2(&[&[3.0], &[7.0]]));

    let a = tape.variable(t2(&[&[2.0]]));
    let b = tape.variable(t2(&[&[3.0]]));
    let y = tape.matmul(a, b).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(a).unwrap().data(), &[3.0]);
    assert_eq!(tape.grad(b).unwrap().data(), &[2.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
    assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
}

fn single_layout(n: usize) -> SegmentLayout {
    SegmentLayout::new().with(Segment::Lr, n)
}

#[test]
fn attention_single_token_returns_v() {
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(t2(&[&[0.3, -0.2]]));
    let k = tape.constant(t2(&[&[1.0, 5.0]]));
    let v = tape.constant(t2(&[&[7.0, -3.0]]));
    let mask = AttentionMask::full(single_layout(1));
    let o = tape.attention(q, k, v, &mask, 1).unwrap();
    assert_eq!(tape.value(o).data(), &[7.0, -3.0]);
}

#[test]
fn attention_masked_weight_is_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(rand_tensor(&[3, 4], &mut rng).map(|x| 50.0 * x));
    let k = tape.constant(rand_tensor(&[3, 4], &mut rng).map(|x| 50.0 * x));
    let v = tape.constant(rand_tensor(&[3, 4], &mut rng));
    let mask = AttentionMask::from_fn(single_layout(3), |qi, ki| !(qi == 0 && ki == 1)).unwrap();
    let o = tape.attention(q, k, v, &mask, 2).unwrap();
    let w = tape.attention_weights(o).unwrap();
    for h in 0..2 {
        assert_eq!(w[h * 9 + 1], 0.0);
        for r in 0..3 {
            let s: f64 = w[h * 9 + r * 3..h * 9 + r * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_uniform_logits() {
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(Tensor::full(&[4, 2], 0.5));
    let v = tape.constant(Tensor::from_fn(&[4, 2], |i| i as f64));
    let mask = AttentionMask::full(single_layout(4));
    let o = tape.attention(q, q, v, &mask, 1).unwrap();
    assert!(tape
        .attention_weights(o)
        .unwrap()
        .iter()
        .all(|&w| (w - 0.25).abs() < 1e-15));
}

#[test]
fn attention_requires_a_visible_key_per_row() {
    // AttentionMask::from_fn already refuses empty rows
    let mask = AttentionMask::from_fn(single_layout(2), |q, _| q == 0);
    assert!(matches!(mask, Err(Error::Config(_))));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t2(&[&[3.0, 3.0, 3.0], &[1.0, 1.0, 1.0]]));
    let y = tape.layer_norm(x, None, None).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let x = tape.constant(t2(&[&[1.0, -1.0]]));
    let y = tape.layer_norm(x, None, None).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((tape.value(y).data()[0] - expect).abs() < 1e-12);
    assert!((tape.value(y).data()[1] + expect).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = tape.constant(rand_tensor(&[5, 8], &mut rng));
    let s = tape.constant(rand_tensor(&[8], &mut rng));
    let b = tape.constant(Tensor::full(&[8], 0.7));
    let y = tape.layer_norm(x, None, Some(b)).unwrap();
    for row in tape.value(y).data().chunks(8) {
        assert!((row.iter().sum::<f64>() / 8.0 - 0.7).abs() < 1e-12);
    }
    let y = tape.layer_norm(x, Some(s), Some(b)).unwrap();
    assert_eq!(tape.shape(y), &[5, 8]);

    let e = tape.constant(Tensor::zeros(&[3, 0]));
    assert!(matches!(tape.layer_norm(e, None, None), Err(Error::Dimension(_))));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));

    let mut tape = Tape::<f64>::new();
    let x = tape.variable(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().item().unwrap(), 6.0);

    let mut tape = Tape::<f64>::new();
    let x = tape.variable(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn two_layer_mlp_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![
        rand_tensor(&[4, 5], &mut rng),
        rand_tensor(&[5, 7], &mut rng),
        rand_tensor(&[7], &mut rng),
        rand_tensor(&[7, 3], &mut rng),
    ];
    let err = check_grad(&inputs, &|t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.add_row(h, v[2])?;
        let h = t.gelu(h);
        t.matmul(h, v[3])
    });
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn every_op_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[3, 4], &mut rng);
    let r = rand_tensor(&[4], &mut rng);
    let cases: Vec<(&str, Vec<Tensor<f64>>, Box<Build>)> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        (
            "add_row",
            vec![a.clone(), r.clone()],
            Box::new(|t, v| t.add_row(v[0], v[1])),
        ),
        (
            "mul_row",
            vec![a.clone(), r.clone()],
            Box::new(|t, v| t.mul_row(v[0], v[1])),
        ),
        ("scale", vec![a.clone()], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        (
            "add_scalar",
            vec![a.clone()],
            Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3))),
        ),
        ("silu", vec![a.clone()], Box::new(|t, v| Ok(t.silu(v[0])))),
        ("gelu", vec![a.clone()], Box::new(|t, v| Ok(t.gelu(v[0])))),
        (
            "leaky_relu",
            vec![a.clone()],
            Box::new(|t, v| Ok(t.leaky_relu(v[0], 0.2))),
        ),
        ("abs", vec![a.clone()], Box::new(|t, v| Ok(t.abs(v[0])))),
        (
            "softplus",
            vec![a.map(|x| 4.0 * x)],
            Box::new(|t, v| Ok(t.softplus(v[0]))),
        ),
        ("mean", vec![a.clone()], Box::new(|t, v| Ok(t.mean(v[0])))),
        (
            "layer_norm",
            vec![a.clone(), r.clone(), r.map(|x| x * 0.5)],
            Box::new(|t, v| t.layer_norm(v[0], Some(v[1]), Some(v[2]))),
        ),
        (
            "gather",
            vec![a.clone()],
            Box::new(|t, v| t.gather(v[0], vec![3, 3, 0, 11, 5].into(), &[5])),
        ),
        (
            "concat",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| t.concat(&[v[0], v[1], v[0]])),
        ),
        ("slice_rows", vec![a.clone()], Box::new(|t, v| t.slice_rows(v[0], 1, 3))),
        ("reshape", vec![a.clone()], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        (
            "mdwt",
            vec![rand_tensor(&[4, 8, 2], &mut rng)],
            Box::new(|t, v| t.mdwt(v[0], 2)),
        ),
        (
            "imdwt",
            vec![rand_tensor(&[4, 8, 2], &mut rng)],
            Box::new(|t, v| t.imdwt(v[0], 2)),
        ),
    ];
    for (name, inputs, build) in cases {
        let err = check_grad(&inputs, build.as_ref());
        assert!(err < 1e-4, "{name}: max relative error {err}");
    }
}

#[test]
fn masked_attention_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let layout = SegmentLayout::new()
        .with(Segment::Lr, 2)
        .with(Segment::Lf, 2)
        .with(Segment::Hf { level: 1 }, 3);
    let mask = crate::masks::build_m_high(&layout).unwrap();
    let inputs: Vec<_> = (0..3).map(|_| rand_tensor(&[7, 8], &mut rng)).collect();
    let err = check_grad(&inputs, &move |t, v| t.attention(v[0], v[1], v[2], &mask, 2));
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::<f32>::new();
        let x = tape.variable(Tensor::from_fn(&[6, 8], |_| rng.random_range(-1.0..1.0)));
        let w = tape.variable(Tensor::from_fn(&[8, 8], |_| rng.random_range(-1.0..1.0)));
        let h = tape.matmul(x, w).unwrap();
        let mask = AttentionMask::full(single_layout(6));
        let h = tape.attention(h, h, h, &mask, 2).unwrap();
        let h = tape.layer_norm(h, None, None).unwrap();
        let l = tape.mean(h);
        let l2 = tape.mul(l, l).unwrap();
        tape.backward(l2).unwrap();
        (tape.grad(x).unwrap(), tape.grad(w).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::full(&[2], 2.0));
    let x = tape.variable(Tensor::full(&[2], 3.0));
    let y = tape.mul(c, x).unwrap();
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
}

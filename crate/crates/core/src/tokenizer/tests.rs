use super::*;
use crate::wavelet::mdwt;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn geometry(size: usize, levels: usize, p_min: usize, lr: usize, lr_patch: usize, dim: usize) -> PatchGeometry {
    PatchGeometry {
        height: size,
        width: size,
        channels: 3,
        levels,
        p_min,
        lr_height: lr,
        lr_width: lr,
        lr_patch,
        dim,
    }
}

fn random_image(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Image<f64> {
    Image::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
}

#[test]
fn pyramid_token_count_at_reference_geometry() {
    let plan = plan_patches(&geometry(128, 3, 2, 16, 2, 256)).unwrap();
    assert_eq!(plan.patch_sizes(), vec![8, 4, 2]);
    assert_eq!(plan.lr_tokens(), 64);
    assert_eq!(plan.lf_tokens(), 64);
    assert_eq!(plan.hf_tokens(), 9 * 64);
    assert_eq!(plan.token_count(), 704);
}

#[test]
fn equal_patch_token_count_at_reference_geometry() {
    let plan = PatchPlan::new(&geometry(128, 3, 4, 16, 4, 256), PatchScheme::Uniform(4)).unwrap();
    assert_eq!(plan.token_count(), 16 + 16 + 3 * (16 + 64 + 256));
    assert_eq!(plan.token_count(), 1040);
}

#[test]
fn minimal_geometry() {
    let plan = plan_patches(&geometry(4, 1, 2, 2, 2, 8)).unwrap();
    assert_eq!(plan.token_count(), 5);
    assert_eq!(
        plan.positions(),
        vec![[0, 0, 0, 0], [1, 0, 0, 0], [1, 1, 0, 0], [1, 3, 0, 0], [1, 2, 0, 0]]
    );
}

#[test]
fn indivisible_geometry_names_dimension() {
    let err = plan_patches(&geometry(24, 3, 2, 3, 1, 16)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let err = plan_patches(&geometry(32, 3, 3, 4, 1, 16)).unwrap_err().to_string();
    assert!(err.contains("LF sub-band height"), "{err}");
    let err = plan_patches(&geometry(32, 2, 2, 5, 2, 16)).unwrap_err().to_string();
    assert!(err.contains("lr height"), "{err}");
    let err = plan_patches(&geometry(32, 2, 2, 8, 2, 12)).unwrap_err().to_string();
    assert!(err.contains("multiple of 8"), "{err}");
}

/// Counts patches by walking every sub-band pixel and collecting the
/// distinct patch corners.
fn brute_force_count(g: &PatchGeometry, scheme: PatchScheme) -> usize {
    let patch_for = |level: usize| match scheme {
        PatchScheme::Pyramid => g.p_min * 2usize.pow((g.levels - level) as u32),
        PatchScheme::Uniform(p) => p,
    };
    let count_region = |h: usize, w: usize, p: usize| {
        let mut corners = std::collections::BTreeSet::new();
        for y in 0..h {
            for x in 0..w {
                corners.insert((y / p, x / p));
            }
        }
        corners.len()
    };
    let mut n = count_region(g.lr_height, g.lr_width, g.lr_patch);
    let div = 2usize.pow(g.levels as u32);
    n += count_region(g.height / div, g.width / div, patch_for(g.levels));
    for level in 1..=g.levels {
        let d = 2usize.pow(level as u32);
        n += 3 * count_region(g.height / d, g.width / d, patch_for(level));
    }
    n
}

fn valid_geometry() -> impl Strategy<Value = PatchGeometry> {
    (1usize..=3, 1usize..=3, 1usize..=3, 1usize..=2, 1usize..=3, 1usize..=2).prop_map(
        |(levels, p_min, gh, gw, lr_grid, lr_patch)| {
            let lf_h = p_min * gh;
            let lf_w = p_min * gw;
            PatchGeometry {
                height: lf_h << levels,
                width: lf_w << levels,
                channels: 2,
                levels,
                p_min,
                lr_height: lr_grid * lr_patch,
                lr_width: lr_grid * lr_patch,
                lr_patch,
                dim: 8,
            }
        },
    )
}

proptest! {
    #[test]
    fn token_count_matches_enumeration(g in valid_geometry()) {
        let plan = plan_patches(&g).unwrap();
        prop_assert_eq!(plan.token_count(), brute_force_count(&g, PatchScheme::Pyramid));
        let grid = plan.lf_stream().grid;
        prop_assert!(plan.hf_streams().iter().all(|s| s.grid == grid));
        prop_assert_eq!(
            plan.token_count(),
            plan.lr_tokens() + grid.0 * grid.1 * (1 + 3 * g.levels)
        );
    }

    #[test]
    fn patch_bookkeeping_round_trips(g in valid_geometry(), seed in 0u64..1000) {
        let plan = plan_patches(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(g.height, g.width, g.channels, &mut rng);
        let lr = random_image(g.lr_height, g.lr_width, g.channels, &mut rng);
        let s = mdwt(&img, g.levels).unwrap();
        let patches = plan.extract_patches(&s, &lr).unwrap();
        let back = plan.assemble_spectrum(&patches[1..]).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn spectrum_tokens_share_a_pixel_footprint(g in valid_geometry()) {
        let plan = plan_patches(&g).unwrap();
        let side = g.p_min << g.levels;
        let origins = plan.token_origins();
        let lf_start = plan.lr_tokens();
        let per_stream = plan.lf_tokens();
        for t in lf_start..plan.token_count() {
            let rect = plan.footprint(t).unwrap();
            prop_assert_eq!((rect.2, rect.3), (side, side));
            let (_, gy, gx) = origins[t];
            let lf_rect = plan.footprint(lf_start + gy * plan.lf_stream().grid.1 + gx).unwrap();
            prop_assert_eq!(rect, lf_rect);
            prop_assert!(t - lf_start < per_stream * (1 + 3 * g.levels));
        }
    }
}

#[test]
fn uniform_scheme_footprints_differ_by_level() {
    let plan = PatchPlan::new(&geometry(32, 2, 2, 8, 2, 16), PatchScheme::Uniform(2)).unwrap();
    let sides: std::collections::BTreeSet<usize> = (plan.lr_tokens()..plan.token_count())
        .map(|t| plan.footprint(t).unwrap().2)
        .collect();
    assert_eq!(sides.into_iter().collect::<Vec<_>>(), vec![4, 8]);
}

#[test]
fn position_encoding_properties() {
    let z: Vec<f64> = encode_position([0, 0, 0, 0], 32).unwrap();
    for q in 0..4 {
        assert!(z[q * 8..q * 8 + 4].iter().all(|&v| v == 0.0));
        assert!(z[q * 8 + 4..q * 8 + 8].iter().all(|&v| v == 1.0));
    }
    let a: Vec<f64> = encode_position([1, 1, 3, 2], 32).unwrap();
    let b: Vec<f64> = encode_position([2, 3, 3, 2], 32).unwrap();
    assert_eq!(a[16..], b[16..]);
    let c: Vec<f64> = encode_position([1, 2, 3, 2], 32).unwrap();
    for i in 0..32 {
        if (8..16).contains(&i) {
            continue;
        }
        assert_eq!(a[i], c[i]);
    }
    assert_ne!(a[8..16], c[8..16]);
    assert!(encode_position::<f64>([0; 4], 12).is_err());
}

fn setup(seed: u64) -> (PatchPlan, ParamStore<f64>, PatchEmbedding, ChaCha8Rng) {
    let plan = plan_patches(&geometry(16, 2, 2, 4, 2, 16)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let emb = PatchEmbedding::new(&mut store, &plan, &mut rng);
    (plan, store, emb, rng)
}

#[test]
fn zero_input_embeds_to_positions() {
    let (plan, store, emb, _) = setup(1);
    let s = WaveletSpectrum::zeros(16, 16, 3, 2).unwrap();
    let lr = Image::zeros(4, 4, 3);
    let seq = tokenize(&s, &lr, &plan, &store, &emb).unwrap();
    let pe = position_table::<f64>(&plan.positions(), 16).unwrap();
    assert_eq!(seq.embeddings, pe);
    assert_eq!(seq.layout, plan.layout());
    assert_eq!(seq.positions.len(), plan.token_count());
}

#[test]
fn tokenization_is_local_and_linear() {
    let (plan, store, emb, mut rng) = setup(2);
    let img = random_image(16, 16, 3, &mut rng);
    let lr = random_image(4, 4, 3, &mut rng);
    // perturb a 2×2 pixel block inside the 8×8 footprint of grid cell (1, 1)
    let mut img2 = img.clone();
    for y in 0..2 {
        for x in 0..2 {
            for c in 0..3 {
                img2.set(8 + y, 8 + x, c, img.get(8 + y, 8 + x, c) + 0.5);
            }
        }
    }
    let s1 = mdwt(&img, 2).unwrap();
    let s2 = mdwt(&img2, 2).unwrap();
    let t1 = tokenize(&s1, &lr, &plan, &store, &emb).unwrap();
    let t2 = tokenize(&s2, &lr, &plan, &store, &emb).unwrap();
    let d = plan.dim();
    let changed: Vec<usize> = (0..plan.token_count())
        .filter(|&t| t1.embeddings.data()[t * d..(t + 1) * d] != t2.embeddings.data()[t * d..(t + 1) * d])
        .collect();
    // all tokens sharing the footprint of grid cell (1,1): LF + 6 HF streams
    let origins = plan.token_origins();
    for &t in &changed {
        assert_eq!((origins[t].1, origins[t].2), (1, 1), "token {t} changed");
    }
    assert!(changed.len() <= 7 && !changed.is_empty());

    // doubling a patch doubles its pre-position embedding
    let pe = position_table::<f64>(&plan.positions(), d).unwrap();
    let doubled = WaveletSpectrum::from_packed(s1.packed().map(|v| 2.0 * v), 2).unwrap();
    let lr2 = lr.map(|v| 2.0 * v);
    let t3 = tokenize(&doubled, &lr2, &plan, &store, &emb).unwrap();
    for i in 0..pe.numel() {
        let a = t1.embeddings.data()[i] - pe.data()[i];
        let b = t3.embeddings.data()[i] - pe.data()[i];
        assert!((b - 2.0 * a).abs() < 1e-12);
    }
}

#[test]
fn tokenize_rejects_mismatched_inputs() {
    let (plan, store, emb, _) = setup(3);
    let s = WaveletSpectrum::zeros(16, 16, 3, 1).unwrap();
    let lr = Image::zeros(4, 4, 3);
    assert!(matches!(
        tokenize(&s, &lr, &plan, &store, &emb),
        Err(Error::Dimension(_))
    ));
    let s = WaveletSpectrum::zeros(16, 16, 3, 2).unwrap();
    let lr = Image::zeros(4, 8, 3);
    assert!(matches!(
        tokenize(&s, &lr, &plan, &store, &emb),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn zero_heads_decode_to_zero_spectrum() {
    let (plan, mut store, _, mut rng) = setup(4);
    let heads = OutputHeads::new(&mut store, &plan, &mut rng);
    let lf = Tensor::from_fn(&[plan.lf_tokens(), 16], |i| (i as f64).sin());
    let hf = Tensor::from_fn(&[plan.hf_tokens(), 16], |i| (i as f64).cos());
    let temb = Tensor::from_fn(&[1, 16], |i| i as f64);
    let s = detokenize(&lf, &hf, &plan, &store, &heads, &temb).unwrap();
    assert!(s.packed().data().iter().all(|&v| v == 0.0));
    let bad = Tensor::zeros(&[plan.hf_tokens() + 1, 16]);
    assert!(matches!(
        detokenize(&lf, &bad, &plan, &store, &heads, &temb),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn crafted_heads_place_every_patch_element() {
    // One token per spectrum stream. Head biases carry a code
    // (stream, element) so the output reveals where each value landed.
    let plan = plan_patches(&geometry(4, 1, 2, 2, 2, 8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let heads = OutputHeads::new(&mut store, &plan, &mut rng);
    for (si, (_, fc)) in heads.heads().iter().enumerate() {
        let n = store.get(fc.bias).numel();
        let code = Tensor::from_fn(&[n], |e| (100 * si + e) as f64);
        *store.get_mut(fc.bias) = code;
    }
    let lf = Tensor::zeros(&[1, 8]);
    let hf = Tensor::zeros(&[3, 8]);
    let s = detokenize(&lf, &hf, &plan, &store, &heads, &Tensor::zeros(&[1, 8])).unwrap();
    let spectrum_streams: Vec<&Stream> = plan.streams().iter().filter(|s| s.is_spectrum()).collect();
    for (si, st) in spectrum_streams.iter().enumerate() {
        for py in 0..2 {
            for px in 0..2 {
                for c in 0..3 {
                    let got = s.packed().get(st.origin.0 + py, st.origin.1 + px, c);
                    assert_eq!(got, (100 * si + (py * 2 + px) * 3 + c) as f64);
                }
            }
        }
    }
    // the same bookkeeping read back through patch extraction
    let patches = plan.extract_patches(&s, &Image::zeros(2, 2, 3)).unwrap();
    for (si, p) in patches[1..].iter().enumerate() {
        for (e, &v) in p.data().iter().enumerate() {
            assert_eq!(v, (100 * si + e) as f64);
        }
    }
}

#[test]
fn permuting_hf_tokens_permutes_patches() {
    let (plan, mut store, _, mut rng) = setup(6);
    let heads = OutputHeads::new(&mut store, &plan, &mut rng);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = Tensor::from_fn(store.get(id).shape(), |_| rng.random_range(-1.0..1.0));
        *store.get_mut(id) = t;
    }
    let d = 16;
    let lf = Tensor::from_fn(&[plan.lf_tokens(), d], |_| rng.random_range(-1.0..1.0));
    let hf = Tensor::from_fn(&[plan.hf_tokens(), d], |_| rng.random_range(-1.0..1.0));
    let temb = Tensor::from_fn(&[1, d], |_| rng.random_range(-1.0..1.0));
    // swap tokens 0 and 3 of the first HF stream
    let mut hf2 = hf.clone();
    for c in 0..d {
        hf2.data_mut().swap(c, 3 * d + c);
    }
    let a = detokenize(&lf, &hf, &plan, &store, &heads, &temb).unwrap();
    let b = detokenize(&lf, &hf2, &plan, &store, &heads, &temb).unwrap();
    let lr0 = Image::zeros(4, 4, 3);
    let pa = plan.extract_patches(&a, &lr0).unwrap();
    let pb = plan.extract_patches(&b, &lr0).unwrap();
    let row = |t: &Tensor<f64>, r: usize| {
        let w = t.shape()[1];
        t.data()[r * w..(r + 1) * w].to_vec()
    };
    assert_eq!(row(&pa[2], 0), row(&pb[2], 3));
    assert_eq!(row(&pa[2], 3), row(&pb[2], 0));
    assert_eq!(row(&pa[2], 1), row(&pb[2], 1));
    for k in [1, 3, 4, 5, 6, 7] {
        assert_eq!(pa[k], pb[k]);
    }
}

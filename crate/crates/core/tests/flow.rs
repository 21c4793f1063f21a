use noiseflow::flow::{
    layout_channels, FlowConfig, FlowModel, GradMode, LatentBundle, Tape, Tensor,
};
use noiseflow::raster::LayoutMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(scales: usize, steps: Vec<usize>) -> FlowConfig {
    FlowConfig {
        num_scales: scales,
        steps_per_scale: steps,
        cond_hidden_channels: 3,
        coupling_hidden_channels: 6,
        temperature: 0.7,
    }
}

fn random_mask(n: usize, rng: &mut ChaCha8Rng) -> LayoutMask {
    let mut cells: Vec<u8> = (0..n * n).map(|_| u8::from(rng.random_bool(0.25))).collect();
    let src = (rng.random_range(0..n), rng.random_range(0..n));
    cells[src.0 * n + src.1] = 0;
    LayoutMask::new(n, cells, src).unwrap()
}

fn random_input<T: noiseflow::flow::Real>(n: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_vec(1, n, n, (0..n * n).map(|_| T::of(rng.random_range(-0.5..0.5))).collect()).unwrap()
}

fn flatten(b: &LatentBundle<f64>) -> Vec<f64> {
    b.zs.iter().flat_map(|z| z.data().to_vec()).collect()
}

fn log_abs_det(m: &[f64], n: usize) -> f64 {
    let mut a = m.to_vec();
    let mut acc = 0.0;
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs())).unwrap();
        for j in 0..n {
            a.swap(k * n + j, p * n + j);
        }
        let d = a[k * n + k];
        acc += d.abs().ln();
        for i in k + 1..n {
            let f = a[i * n + k] / d;
            for j in k..n {
                a[i * n + j] -= f * a[k * n + j];
            }
        }
    }
    acc
}

#[test]
fn fresh_model_is_identity_on_squeezed_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = FlowModel::<f32>::new(tiny(2, vec![2, 2]), 7).unwrap();
    let mask = random_mask(16, &mut rng);
    let x = random_input::<f32>(16, &mut rng);
    let (bundle, logdet) = model.forward(&x, &mask).unwrap();
    assert_eq!(logdet, 0.0);
    assert_eq!(bundle.element_count(), x.len());
    let s1 = x.squeeze().unwrap();
    let (keep, z0) = s1.split_channels(2);
    assert_eq!(bundle.zs[0], z0);
    assert_eq!(bundle.zs[1], keep.squeeze().unwrap());
    // Likelihood is the standard-normal density of the elements.
    let want: f64 = x.data().iter().map(|&v| -0.5 * (v as f64).powi(2) - 0.5 * (2.0 * std::f64::consts::PI).ln()).sum();
    let ll = model.log_likelihood(&x, &mask).unwrap();
    assert!((ll.nats - want).abs() < 1e-6 * want.abs());
    // Zero latents decode to zeros, i.e. a flat 0.5 map after the mean shift.
    let zeros = LatentBundle::new(model.latent_shapes(16).into_iter().map(|(c, h, w)| Tensor::zeros(c, h, w)).collect());
    assert!(model.inverse(&zeros, &mask).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn element_counts_conserved_for_paper_config() {
    let model = FlowModel::<f32>::new(
        FlowConfig { cond_hidden_channels: 2, coupling_hidden_channels: 4, ..FlowConfig::paper_scale() },
        0,
    )
    .unwrap();
    let shapes = model.latent_shapes(32);
    assert_eq!(shapes, vec![(2, 16, 16), (4, 8, 8), (8, 4, 4), (32, 2, 2)]);
    assert_eq!(shapes.iter().map(|(c, h, w)| c * h * w).sum::<usize>(), 32 * 32);
    assert!(FlowConfig::paper_scale().check_size(256).is_ok());
    assert!(FlowConfig::paper_scale().check_size(48).is_err());
}

#[test]
fn roundtrip_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..4 {
        let mask = random_mask(16, &mut rng);
        let m64 = FlowModel::<f64>::randomized(tiny(2, vec![2, 2]), seed, 0.3).unwrap();
        let x = random_input::<f64>(16, &mut rng);
        let (b, _) = m64.forward(&x, &mask).unwrap();
        assert!(m64.inverse(&b, &mask).unwrap().max_abs_diff(&x) < 1e-9);

        let m32 = m64.cast::<f32>();
        let x32 = x.cast::<f32>();
        let (b, _) = m32.forward(&x32, &mask).unwrap();
        assert!(m32.inverse(&b, &mask).unwrap().max_abs_diff(&x32) < 1e-4);
    }
}

#[test]
fn changing_mask_breaks_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = FlowModel::<f64>::randomized(tiny(2, vec![2, 2]), 5, 0.3).unwrap();
    let a = random_mask(16, &mut rng);
    let b = random_mask(16, &mut rng);
    let x = random_input::<f64>(16, &mut rng);
    let (z, _) = model.forward(&x, &a).unwrap();
    assert!(model.inverse(&z, &b).unwrap().max_abs_diff(&x) > 1e-3);
}

#[test]
fn end_to_end_logdet_matches_dense_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (scales, steps) in [(2, vec![1, 1]), (1, vec![2])] {
        for seed in 0..3 {
            let model = FlowModel::<f64>::randomized(tiny(scales, steps.clone()), seed, 0.3).unwrap();
            let mask = random_mask(8, &mut rng);
            let x = random_input::<f64>(8, &mut rng);
            let (_, logdet) = model.forward(&x, &mask).unwrap();
            let n = 64;
            let eps = 1e-5;
            let mut jac = vec![0.0; n * n];
            for j in 0..n {
                let mut xp = x.clone();
                xp.data_mut()[j] += eps;
                let mut xm = x.clone();
                xm.data_mut()[j] -= eps;
                let yp = flatten(&model.forward(&xp, &mask).unwrap().0);
                let ym = flatten(&model.forward(&xm, &mask).unwrap().0);
                for i in 0..n {
                    jac[i * n + j] = (yp[i] - ym[i]) / (2.0 * eps);
                }
            }
            let want = log_abs_det(&jac, n);
            assert!((logdet - want).abs() <= 1e-4 * want.abs().max(1.0), "{logdet} vs {want}");
        }
    }
}

#[test]
fn conditioning_reaches_latents() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = FlowModel::<f64>::randomized(tiny(2, vec![1, 1]), 2, 0.2).unwrap();
    let a = LayoutMask::empty(16, (3, 3)).unwrap();
    let mut cells = a.cells().to_vec();
    cells[10 * 16 + 10] = 1;
    let b = LayoutMask::new(16, cells, (3, 3)).unwrap();
    let x = random_input::<f64>(16, &mut rng);
    let (za, _) = model.forward(&x, &a).unwrap();
    let (zb, _) = model.forward(&x, &b).unwrap();
    assert_ne!(za, zb);
}

#[test]
fn cond_features_zero_and_local() {
    let mut model = FlowModel::<f64>::new(tiny(2, vec![1, 1]), 3).unwrap();
    for c in &mut model.cond {
        c.conv_b.weight.fill_zero();
        c.conv_b.bias.fill_zero();
    }
    let empty = LayoutMask::empty(16, (0, 0)).unwrap();
    let f = model.cond_features(&empty).unwrap();
    assert!(f.scales.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));

    let model = FlowModel::<f64>::randomized(tiny(2, vec![1, 1]), 3, 0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mask = random_mask(16, &mut rng);
    assert_eq!(model.cond_features(&mask).unwrap(), model.cond_features(&mask.clone()).unwrap());
    // Shift the buildings one column right, keeping the source.
    let n = 16;
    let mut shifted = vec![0u8; n * n];
    for r in 0..n {
        for c in 1..n {
            shifted[r * n + c] = mask.cells()[r * n + c - 1];
        }
    }
    let (sr, sc) = mask.source();
    shifted[sr * n + sc] = 0;
    let moved = LayoutMask::new(n, shifted, mask.source()).unwrap();
    let fa = model.cond_features(&mask).unwrap();
    let fb = model.cond_features(&moved).unwrap();
    let changed: Vec<(usize, usize)> = (0..n * n)
        .filter(|&i| mask.cells()[i] != moved.cells()[i])
        .map(|i| (i / n, i % n))
        .collect();
    assert!(!changed.is_empty());
    for (scale, (ta, tb)) in fa.scales.iter().zip(&fb.scales).enumerate() {
        let div = 2usize << scale;
        for ch in 0..ta.channels() {
            for y in 0..ta.height() {
                for x in 0..ta.width() {
                    let near = changed.iter().any(|&(r, c)| {
                        (r / div).abs_diff(y) <= 2 && (c / div).abs_diff(x) <= 2
                    });
                    if !near {
                        assert!((ta.get(ch, y, x) - tb.get(ch, y, x)).abs() < 1e-12);
                    }
                }
            }
        }
    }
    assert_ne!(fa, fb);
}

#[test]
fn layout_channels_encode_source_and_buildings() {
    let mut cells = vec![0u8; 64];
    cells[9] = 1;
    let m = LayoutMask::new(8, cells, (4, 4)).unwrap();
    let t = layout_channels::<f64>(&m);
    assert_eq!(t.shape(), (2, 8, 8));
    assert_eq!(t.get(0, 1, 1), 1.0);
    assert_eq!(t.get(1, 4, 4), 1.0);
    assert!(t.get(1, 0, 0) < t.get(1, 3, 3));
}

#[test]
fn sampling_is_seeded_and_cold_identity_is_flat() {
    let model = FlowModel::<f32>::new(tiny(2, vec![1, 1]), 0).unwrap();
    let mask = LayoutMask::empty(16, (8, 8)).unwrap();
    let (a, _) = model.sample(&mask, 0.7, 42).unwrap();
    let (b, _) = model.sample(&mask, 0.7, 42).unwrap();
    assert_eq!(a, b);
    let (c, _) = model.sample(&mask, 0.7, 43).unwrap();
    assert_ne!(a, c);
    let (cold, clamped) = model.sample(&mask, 1e-30, 42).unwrap();
    assert_eq!(clamped, 0);
    assert!(cold.values().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    assert!(model.sample(&mask, 0.0, 1).is_err());
}

fn grads_for(model: &FlowModel<f64>, x: &Tensor<f64>, mask: &LayoutMask, mode: GradMode) -> (FlowModel<f64>, Tensor<f64>) {
    let cond = model.cond_features(mask).unwrap();
    let mut tape = Tape::default();
    let (bundle, _) = model
        .forward_with(x, &cond, if mode == GradMode::StoreAll { Some(&mut tape) } else { None })
        .unwrap();
    // L = Σ z² / 2 − logdet.
    let g_z: Vec<Tensor<f64>> = bundle.zs.clone();
    let mut grads = model.zeros_like();
    let (xr, gx) = model
        .backward(mask, &bundle, &g_z, -1.0, (mode == GradMode::StoreAll).then_some(&tape), &mut grads)
        .unwrap();
    assert!(xr.max_abs_diff(x) < 1e-10);
    (grads, gx)
}

#[test]
fn input_gradient_matches_finite_differences_and_modes_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = FlowModel::<f64>::randomized(tiny(2, vec![1, 2]), 9, 0.3).unwrap();
    let mask = random_mask(8, &mut rng);
    let x = random_input::<f64>(8, &mut rng);
    let loss = |x: &Tensor<f64>| {
        let (b, ld) = model.forward(x, &mask).unwrap();
        b.zs.iter().flat_map(|z| z.data().iter()).map(|v| 0.5 * v * v).sum::<f64>() - ld
    };
    let (g_re, gx) = grads_for(&model, &x, &mask, GradMode::Recompute);
    let eps = 1e-6;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
        assert!((fd - gx.data()[i]).abs() <= 1e-6 * fd.abs().max(1.0), "{i}: {fd} vs {}", gx.data()[i]);
    }
    let (g_st, _) = grads_for(&model, &x, &mask, GradMode::StoreAll);
    for ((name, a), (_, b)) in g_re.blocks().into_iter().zip(g_st.blocks()) {
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((u - v).abs() <= 1e-9 * u.abs().max(1.0), "{name}");
        }
    }
}

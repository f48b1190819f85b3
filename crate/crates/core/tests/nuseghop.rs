use lgnuseghop::nuseghop::{
    apply_saab, fit_model, fit_saab, predict_heatmap, read_model, write_model, GbdtConfig, NuSegHopConfig,
};
use lgnuseghop::{Error, InstanceMask, RgbTile};
use proptest::prelude::*;

const W: usize = 64;

fn small_config() -> NuSegHopConfig {
    NuSegHopConfig {
        n_samples: 3000,
        selection_samples: 1500,
        classifier: GbdtConfig { n_trees: 30, ..GbdtConfig::default() },
        ..NuSegHopConfig::default()
    }
}

/// Checkerboard of 2 px cells on the left half, flat gray on the right.
fn textured() -> (RgbTile, InstanceMask) {
    let mut data = Vec::with_capacity(W * W * 3);
    let mut labels = Vec::with_capacity(W * W);
    for r in 0..W {
        for c in 0..W {
            let v = if c < W / 2 {
                if (r / 2 + c / 2) % 2 == 0 { 0.2 } else { 0.8 }
            } else {
                0.5
            };
            data.extend([v, v * 0.9, v * 0.8]);
            labels.push(u32::from(c < W / 2));
        }
    }
    (RgbTile::new(W, W, data).unwrap(), InstanceMask::new(W, W, labels).unwrap())
}

#[test]
fn separates_texture_from_flat() {
    let (tile, label) = textured();
    let model = fit_model(&tile, &label, &small_config(), 7).unwrap();
    let heat = predict_heatmap(&tile, &model).unwrap();
    let correct = (0..W * W).filter(|&i| (heat.data()[i] > 0.5) == (label.labels()[i] > 0)).count();
    let acc = correct as f64 / (W * W) as f64;
    assert!(acc >= 0.9, "accuracy {acc}");
    assert!(heat.data().iter().all(|p| (0.0..=1.0).contains(p)));
    // A training exemplar deep inside the texture.
    assert!(heat.get(20, 10) > 0.5);
    assert!(model.layer1.kept() <= 10);
    assert_eq!(model.selected.len(), 100);
    assert!(model.parameter_count() < 400_000);
}

#[test]
fn fit_is_deterministic_and_round_trips() {
    let (tile, label) = textured();
    let cfg = small_config();
    let a = fit_model(&tile, &label, &cfg, 3).unwrap();
    let b = fit_model(&tile, &label, &cfg, 3).unwrap();
    assert_eq!(a, b);
    let ha = predict_heatmap(&tile, &a).unwrap();
    let hb = predict_heatmap(&tile, &b).unwrap();
    assert_eq!(ha.data(), hb.data());

    let mut bytes = Vec::new();
    write_model(&a, &mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"NSHM");
    let back = read_model(bytes.as_slice()).unwrap();
    assert_eq!(back, a);
    let mut again = Vec::new();
    write_model(&back, &mut again).unwrap();
    assert_eq!(bytes, again);

    assert!(read_model(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(read_model(bad.as_slice()).is_err());
}

#[test]
fn uniform_tile_gives_constant_heatmap() {
    let (tile, label) = textured();
    let model = fit_model(&tile, &label, &small_config(), 1).unwrap();
    let flat = RgbTile::filled(30, 20, [0.3, 0.6, 0.2]).unwrap();
    let heat = predict_heatmap(&flat, &model).unwrap();
    assert_eq!(heat.dims(), (30, 20));
    assert!(heat.data().iter().all(|&p| p == heat.data()[0]));
}

#[test]
fn single_class_pseudolabel_is_rejected() {
    let (tile, _) = textured();
    let empty = InstanceMask::empty(W, W);
    assert!(matches!(fit_model(&tile, &empty, &small_config(), 0), Err(Error::DegeneratePseudolabel)));
}

#[test]
fn constant_tile_has_no_ac_energy() {
    let tile = RgbTile::filled(16, 16, [0.5, 0.5, 0.5]).unwrap();
    let mut label = InstanceMask::empty(16, 16);
    label.set(3, 3, 1);
    assert!(matches!(fit_model(&tile, &label, &small_config(), 0), Err(Error::EmptyKernel)));
}

fn max_gram_error(w: &[f64], k: usize) -> f64 {
    let m = w.len() / k;
    let mut worst = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            let d: f64 = (0..k).map(|t| w[i * k + t] * w[j * k + t]).sum();
            worst = worst.max((d - f64::from(u8::from(i == j))).abs());
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn saab_kernel_invariants(seed in any::<u64>(), f in 1usize..4, ch in 1usize..4, extra in 0usize..40) {
        use rand::{Rng, SeedableRng};
        let k = f * f * ch;
        let n = k + 1 + extra;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        prop_assume!(k >= 2);
        let kernel = fit_saab(&samples, (f, f, ch), 1e-3, 10).unwrap();
        prop_assert!(max_gram_error(&kernel.weights, k) < 1e-6);
        prop_assert!(kernel.energies.windows(2).all(|e| e[0] >= e[1]));
        prop_assert!(kernel.energies.iter().all(|&e| e >= 1e-3));
        let out = apply_saab(&samples, &kernel).unwrap();
        for (row, feat) in samples.chunks(k).zip(out.chunks(kernel.output_len())) {
            let mean = row.iter().sum::<f64>() / k as f64;
            prop_assert_eq!(feat[0], mean);
            let ac: f64 = feat[1..].iter().map(|v| v * v).sum();
            let resid: f64 = row.iter().map(|x| (x - mean).powi(2)).sum();
            prop_assert!(ac <= resid + 1e-9);
        }
    }
}

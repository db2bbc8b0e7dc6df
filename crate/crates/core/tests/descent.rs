use ncut_core::descent::{
    evaluate, hard_kmeans_energy, lloyd_kmeans, optimize, optimize_image, optimize_observed,
    pixel_accuracy,
};
use ncut_core::oracle::{brute_force_min_nc, discrete_nc, DenseKernel};
use ncut_core::synth::{rng, two_region, TwoRegionParams};
use ncut_core::{
    embed_features, DescentConfig, Error, FeatureMode, Image, Init, KernelMode, KernelSpec,
    LossConfig, LossContext, ScribbleMask, SoftSegmentation,
};
use ndarray::Array2;
use rand::Rng;

fn small_instance() -> (Image, ScribbleMask) {
    let params = TwoRegionParams {
        side: 16,
        scribble_len: 4,
        ..TwoRegionParams::default()
    };
    let t = two_region(params, &mut rng(1));
    (t.image, t.scribbles)
}

#[test]
fn pce_only_without_clamping_leaves_unlabeled_rows_uniform() {
    let (img, mask) = small_instance();
    let cfg = DescentConfig {
        clamp_seeds: false,
        max_iters: 200,
        ..DescentConfig::default()
    };
    let spec = KernelSpec::default();
    let out = optimize_image::<f64>(
        &img,
        Some(&mask),
        2,
        spec,
        KernelMode::Exact,
        &LossConfig::pce_only(),
        &cfg,
    )
    .unwrap();
    for p in 0..img.len() {
        let row = out.soft.values().row(p);
        match mask.label(p) {
            None => assert!(row.iter().all(|&v| v == 0.5)),
            Some(y) => assert!(row[y] > 0.99, "{row}"),
        }
    }
}

#[test]
fn clamped_seeds_are_one_hot_at_every_iterate() {
    let (img, mask) = small_instance();
    let f = embed_features::<f64>(&img, KernelSpec::default(), FeatureMode::Rgbxy);
    let w = DenseKernel::new(&f).unwrap();
    let ctx = LossContext::<f64>::new(&w, img.colors(), Some(&mask), 2).unwrap();
    let mut seen = 0;
    let out = optimize_observed(
        &ctx,
        &LossConfig::default(),
        &DescentConfig::default(),
        |_, s| {
            seen += 1;
            for (p, y) in mask.seeds() {
                let row = s.values().row(p);
                assert!(row
                    .iter()
                    .enumerate()
                    .all(|(k, &v)| v == if k == y { 1.0 } else { 0.0 }));
            }
        },
    )
    .unwrap();
    assert_eq!(seen, out.iterations + 1);
    for (p, y) in mask.seeds() {
        assert_eq!(out.hard.labels[p], y);
    }
}

#[test]
fn seeded_segmentation_recovers_regions() {
    let t = two_region(TwoRegionParams::default(), &mut rng(2));
    let out = optimize_image::<f64>(
        &t.image,
        Some(&t.scribbles),
        2,
        KernelSpec::default(),
        KernelMode::Lattice,
        &LossConfig::default(),
        &DescentConfig::default(),
    )
    .unwrap();
    assert!(pixel_accuracy(&out.hard.labels, &t.truth).unwrap() >= 0.99);
    assert!(out.last.total < out.initial.total);
    let iters: Vec<usize> = out.trace.rows().iter().map(|r| r.iter).collect();
    assert!(iters.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn f32_descent_matches_f64_labels() {
    let t = two_region(TwoRegionParams::default(), &mut rng(3));
    let run = |single: bool| {
        let args = (
            &t.image,
            Some(&t.scribbles),
            2,
            KernelSpec::default(),
            KernelMode::Lattice,
        );
        if single {
            optimize_image::<f32>(
                args.0,
                args.1,
                args.2,
                args.3,
                args.4,
                &LossConfig::default(),
                &DescentConfig::default(),
            )
            .unwrap()
            .hard
        } else {
            optimize_image::<f64>(
                args.0,
                args.1,
                args.2,
                args.3,
                args.4,
                &LossConfig::default(),
                &DescentConfig::default(),
            )
            .unwrap()
            .hard
        }
    };
    let a = pixel_accuracy(&run(true).labels, &t.truth).unwrap();
    let b = pixel_accuracy(&run(false).labels, &t.truth).unwrap();
    assert!(a >= 0.99 && b >= 0.99, "{a} {b}");
}

#[test]
fn descent_is_deterministic() {
    let (img, _) = small_instance();
    let cfg = DescentConfig {
        init: Init::Noise {
            scale: 0.1,
            seed: 9,
        },
        max_iters: 50,
        clamp_seeds: false,
        ..DescentConfig::default()
    };
    let loss = LossConfig {
        pce: false,
        lambda_nc: 1.0,
        lambda_nel: 0.0,
        ..LossConfig::default()
    };
    let spec = KernelSpec::new(15.0, 40.0).unwrap();
    let a = optimize_image::<f64>(&img, None, 3, spec, KernelMode::Lattice, &loss, &cfg).unwrap();
    let b = optimize_image::<f64>(&img, None, 3, spec, KernelMode::Lattice, &loss, &cfg).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.soft.values(), b.soft.values());
}

#[test]
fn runaway_step_reports_non_finite() {
    let (img, mask) = small_instance();
    let cfg = DescentConfig {
        step_size: 1e306,
        normalize_gradient: false,
        clamp_seeds: false,
        init: Init::Noise {
            scale: 1.0,
            seed: 1,
        },
        ..DescentConfig::default()
    };
    let loss = LossConfig {
        pce: false,
        lambda_kmeans: 1e3,
        lambda_nc: 0.0,
        lambda_nel: 0.0,
        ..LossConfig::default()
    };
    let err = optimize_image::<f64>(
        &img,
        Some(&mask),
        2,
        KernelSpec::default(),
        KernelMode::Exact,
        &loss,
        &cfg,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
}

#[test]
fn empty_configuration_is_rejected() {
    let (img, _) = small_instance();
    let f = embed_features::<f64>(&img, KernelSpec::default(), FeatureMode::Rgbxy);
    let w = DenseKernel::new(&f).unwrap();
    let ctx = LossContext::<f64>::new(&w, img.colors(), None, 2).unwrap();
    let none = LossConfig {
        pce: false,
        ..LossConfig::pce_only()
    };
    assert!(matches!(
        optimize(&ctx, &none, &DescentConfig::default()),
        Err(Error::EmptyLossConfig)
    ));
}

/// Minimum hard K-means energy over every labeling of `colors` into `k` groups.
fn exhaustive_kmeans(colors: &Array2<f64>, k: usize) -> f64 {
    let n = colors.nrows();
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    loop {
        let mut e = 0.0;
        for c in 0..k {
            let members: Vec<usize> = (0..n).filter(|&p| labels[p] == c).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = [0.0; 3];
            for &p in &members {
                for j in 0..3 {
                    mean[j] += colors[[p, j]] / members.len() as f64;
                }
            }
            for &p in &members {
                e += (0..3)
                    .map(|j| (colors[[p, j]] - mean[j]).powi(2))
                    .sum::<f64>();
            }
        }
        best = best.min(e);
        let mut i = 0;
        while i < n {
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
    }
}

#[test]
fn lloyd_matches_exhaustive_on_two_blobs() {
    let mut r = rng(4);
    for trial in 0..5 {
        let colors = Array2::from_shape_fn((12, 3), |(p, _)| {
            let centre = if p < 5 { 40.0 } else { 200.0 };
            centre + r.random_range(-3.0..3.0)
        });
        let out = lloyd_kmeans(colors.view(), 2, 100, trial).unwrap();
        let best = exhaustive_kmeans(&colors, 2);
        assert!(
            (out.energy - best).abs() <= 1e-9 * best,
            "{} vs {best}",
            out.energy
        );
        assert_eq!(
            out.energy,
            hard_kmeans_energy(colors.view(), &out.labels, 2)
        );
    }
}

#[test]
fn lloyd_is_monotone_and_handles_one_color() {
    let mut r = rng(5);
    let colors = Array2::from_shape_simple_fn((200, 3), || r.random_range(0.0..255.0));
    for seed in 0..10 {
        let out = lloyd_kmeans(colors.view(), 4, 100, seed).unwrap();
        assert!(out.history.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }
    let flat = Array2::from_elem((30, 3), 77.0);
    let out = lloyd_kmeans(flat.view(), 3, 100, 0).unwrap();
    assert_eq!(out.history[0], 0.0);
    assert!(out.history.len() <= 2);
}

#[test]
fn evaluate_reports_energies_and_accuracy() {
    let img = Image::new(
        3,
        2,
        vec![
            [10.0, 10.0, 10.0],
            [12.0, 10.0, 10.0],
            [200.0, 30.0, 30.0],
            [11.0, 9.0, 10.0],
            [198.0, 31.0, 29.0],
            [202.0, 29.0, 31.0],
        ],
    )
    .unwrap();
    let f = embed_features::<f64>(&img, KernelSpec::default(), FeatureMode::Rgbxy);
    let w = DenseKernel::new(&f).unwrap();
    let ctx = LossContext::<f64>::new(&w, img.colors(), None, 2).unwrap();
    let cfg = LossConfig::default();

    let uniform = SoftSegmentation::<f64>::uniform(6, 2);
    let e = evaluate(&uniform, &ctx, &cfg, None).unwrap();
    assert!((e.energies.nc - 1.0).abs() <= 1e-12);
    assert_eq!(e.accuracy, None);

    let truth = vec![0, 0, 1, 0, 1, 1];
    let hard = SoftSegmentation::<f64>::one_hot(&truth, 2).unwrap();
    let e = evaluate(&hard, &ctx, &cfg, Some(&truth)).unwrap();
    assert_eq!(e.accuracy, Some(1.0));
    let dense = w.materialize();
    assert!((e.energies.nc - discrete_nc(&dense, &truth, 2)).abs() <= 1e-10);
    // The color split is the best nontrivial labeling.
    let clamp = ScribbleMask::new(3, 2, vec![0, 255, 1, 255, 255, 255], 2).unwrap();
    let (best, min) = brute_force_min_nc(&f, 2, Some(&clamp)).unwrap();
    assert_eq!(best, truth);
    assert!((e.energies.nc - min).abs() <= 1e-12);

    assert!(evaluate(&hard, &ctx, &cfg, Some(&truth[..5])).is_err());
}

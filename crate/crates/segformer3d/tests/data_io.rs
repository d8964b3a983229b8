//! Synthetic data generator and VSEG1 format tests: determinism, the
//! direct-scan ellipsoid volume oracle, augmentation properties, and the
//! file-format round trip with its error paths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segformer3d::data::{
    apply_flips, augment, generate, load_dataset, load_volume, paint_mask, read_manifest,
    sample_ellipsoids, save_volume, write_dataset, Ellipsoid, SynthConfig, VolumeSample,
};
use segformer3d::error::Error;

fn image_bits(s: &VolumeSample) -> Vec<u32> {
    s.image.data().iter().map(|v| v.to_bits()).collect()
}

fn class_histogram(mask: &[u8], k: usize) -> Vec<usize> {
    let mut h = vec![0usize; k];
    for &m in mask {
        h[m as usize] += 1;
    }
    h
}

#[test]
fn same_seed_and_index_generate_bitwise_identical_samples() {
    let cfg = SynthConfig::default();
    let a = generate(&cfg, 7).unwrap();
    let b = generate(&cfg, 7).unwrap();
    assert_eq!(image_bits(&a), image_bits(&b));
    assert_eq!(a.mask, b.mask);
    assert_eq!(a.meta, b.meta);

    // Different index or seed changes the sample.
    let c = generate(&cfg, 8).unwrap();
    assert_ne!(a.mask, c.mask);
    let other = SynthConfig { seed: 1, ..cfg };
    let d = generate(&other, 7).unwrap();
    assert_ne!(image_bits(&a), image_bits(&d));
}

#[test]
fn samples_are_independent_of_generation_order() {
    let cfg = SynthConfig::default();
    let forward: Vec<_> = (0..4).map(|i| generate(&cfg, i).unwrap()).collect();
    let backward: Vec<_> = (0..4).rev().map(|i| generate(&cfg, i).unwrap()).collect();
    for (a, b) in forward.iter().zip(backward.iter().rev()) {
        assert_eq!(image_bits(a), image_bits(b));
        assert_eq!(a.mask, b.mask);
    }
}

#[test]
fn single_ellipsoid_mask_matches_direct_scan_oracle() {
    let cfg = SynthConfig {
        num_classes: 2,
        shapes_per_class: (1, 1),
        noise_sigma: 0.0,
        ..SynthConfig::default()
    };
    for index in 0..5u64 {
        let ells = sample_ellipsoids(&cfg, index).unwrap();
        assert_eq!(ells.len(), 1);
        let e = ells[0];

        let sample = generate(&cfg, index).unwrap();
        let painted = sample.mask.iter().filter(|&&m| m == 1).count();

        // Independent full-grid scan of x²/a² + y²/b² + z²/c² ≤ 1.
        let mut scanned = 0usize;
        for z in 0..cfg.extent {
            for y in 0..cfg.extent {
                for x in 0..cfg.extent {
                    let p = [z as f64, y as f64, x as f64];
                    let q: f64 = (0..3)
                        .map(|a| ((p[a] - e.center[a]) / e.radii[a]).powi(2))
                        .sum();
                    if q <= 1.0 {
                        scanned += 1;
                    }
                }
            }
        }
        assert!(scanned > 0, "degenerate ellipsoid in oracle case");
        assert_eq!(painted, scanned, "index {index}");
    }
}

#[test]
fn zero_shapes_give_an_all_background_mask() {
    let cfg = SynthConfig {
        num_classes: 2,
        shapes_per_class: (0, 0),
        ..SynthConfig::default()
    };
    let s = generate(&cfg, 0).unwrap();
    assert!(s.mask.iter().all(|&m| m == 0));
    assert!(s.image.data().iter().all(|v| v.is_finite()));
}

#[test]
fn foreground_classes_attach_to_the_previous_class() {
    let cfg = SynthConfig::default();
    let mean_r = |e: &Ellipsoid| (e.radii[0] + e.radii[1] + e.radii[2]) / 3.0;
    for index in 0..8u64 {
        let ells = sample_ellipsoids(&cfg, index).unwrap();
        // Every class-c ellipsoid (c ≥ 2) is a scaled-down copy of some class
        // c−1 ellipsoid displaced by at most 0.65·(r̄_parent + r̄_child), so
        // consecutive classes overlap. Border clamping only ever moves a
        // child toward its parent, so the bound survives it.
        for e in ells.iter().filter(|e| e.class >= 2) {
            let attached = ells
                .iter()
                .filter(|p| p.class == e.class - 1)
                .any(|p| {
                    let dist: f64 = (0..3)
                        .map(|a| (e.center[a] - p.center[a]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    let scales: Vec<f64> = (0..3).map(|a| e.radii[a] / p.radii[a]).collect();
                    let uniform = (scales[0] - scales[2]).abs() < 1e-9
                        && (scales[1] - scales[2]).abs() < 1e-9;
                    uniform
                        && scales[0] < 0.94
                        && scales[0] >= 0.82
                        && dist <= 0.65 * (mean_r(p) + mean_r(e)) + 1e-9
                });
            assert!(attached, "class {} ellipsoid has no parent (index {index})", e.class);
        }

        let s = generate(&cfg, index).unwrap();
        assert!(s.mask.iter().any(|&m| m == 0), "no background voxel");
        assert!(s.mask.iter().all(|&m| (m as usize) < cfg.num_classes));
    }
}

#[test]
fn images_are_z_score_normalized_per_modality() {
    let cfg = SynthConfig::default();
    let s = generate(&cfg, 3).unwrap();
    let n = cfg.extent.pow(3);
    let data = s.image.data();
    for m in 0..cfg.modalities {
        let chan = &data[m * n..(m + 1) * n];
        let mean = chan.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = chan.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 1e-4, "modality {m} mean {mean}");
        assert!((var - 1.0).abs() <= 1e-3, "modality {m} var {var}");
    }
}

#[test]
fn flips_are_involutions_and_preserve_the_histogram() {
    let cfg = SynthConfig::default();
    let s = generate(&cfg, 11).unwrap();
    for axes in [
        [true, false, false],
        [false, true, false],
        [false, false, true],
        [true, true, true],
        [true, false, true],
    ] {
        let once = apply_flips(&s, axes);
        assert_eq!(
            class_histogram(&once.mask, cfg.num_classes),
            class_histogram(&s.mask, cfg.num_classes),
            "histogram changed under {axes:?}"
        );
        let twice = apply_flips(&once, axes);
        assert_eq!(image_bits(&twice), image_bits(&s));
        assert_eq!(twice.mask, s.mask);
    }
    // The identity flip is bitwise identity in one application.
    let same = apply_flips(&s, [false, false, false]);
    assert_eq!(image_bits(&same), image_bits(&s));
}

#[test]
fn augment_is_reproducible_and_leaves_the_mask_unjittered() {
    let cfg = SynthConfig::default();
    let s = generate(&cfg, 13).unwrap();
    let a = augment(&s, &mut ChaCha8Rng::seed_from_u64(99));
    let b = augment(&s, &mut ChaCha8Rng::seed_from_u64(99));
    assert_eq!(image_bits(&a), image_bits(&b));
    assert_eq!(a.mask, b.mask);

    // The mask is a flipped copy of the original: same histogram, only 0/1
    // values the generator produced.
    assert_eq!(
        class_histogram(&a.mask, cfg.num_classes),
        class_histogram(&s.mask, cfg.num_classes)
    );
    // Augmented intensities stay within the jitter envelope of the source.
    let max_src = s.image.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let max_aug = a.image.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    assert!(max_aug <= max_src * 1.1 + 1e-6);
    assert!(max_aug >= max_src * 0.9 - 1e-6);
}

#[test]
fn vseg_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::default();
    let s = generate(&cfg, 21).unwrap();
    let path = dir.path().join("sample.vseg");
    save_volume(&s, &path).unwrap();
    let loaded = load_volume(&path).unwrap();
    assert_eq!(image_bits(&loaded), image_bits(&s));
    assert_eq!(loaded.mask, s.mask);
    assert_eq!(loaded.shape, s.shape);
    assert_eq!(loaded.num_classes, s.num_classes);
    assert_eq!(loaded.meta, s.meta);
}

#[test]
fn vseg_rejects_bad_magic_truncation_and_size_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::default();
    let s = generate(&cfg, 22).unwrap();
    let path = dir.path().join("sample.vseg");
    save_volume(&s, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let expect_format = |bytes: &[u8], tag: &str| {
        let p = dir.path().join(format!("{tag}.vseg"));
        std::fs::write(&p, bytes).unwrap();
        match load_volume(&p) {
            Err(Error::Format(_)) => {}
            other => panic!("{tag}: expected FormatError, got {other:?}"),
        }
    };

    // Bad magic.
    let mut corrupted = bytes.clone();
    corrupted[0] = b'X';
    expect_format(&corrupted, "magic");

    // Truncations at several depths: inside the magic, inside the header,
    // and inside the payload.
    expect_format(&bytes[..3], "trunc-magic");
    expect_format(&bytes[..12], "trunc-header");
    expect_format(&bytes[..bytes.len() - 7], "trunc-payload");

    // Extra trailing bytes contradict the header-implied size.
    let mut padded = bytes.clone();
    padded.push(0);
    expect_format(&padded, "padded");

    // Out-of-range label in the mask payload (mask is the file's tail).
    let mut bad_label = bytes.clone();
    let last = bad_label.len() - 1;
    bad_label[last] = 250;
    expect_format(&bad_label, "bad-label");

    // Missing file is an I/O error, not a format error.
    match load_volume(&dir.path().join("absent.vseg")) {
        Err(Error::Io(_)) => {}
        other => panic!("expected Io error, got {other:?}"),
    }
}

#[test]
fn dataset_directory_round_trips_through_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { seed: 5, ..SynthConfig::default() };
    let manifest = write_dataset(&cfg, 3, dir.path()).unwrap();
    assert_eq!(manifest.count, 3);
    assert_eq!(manifest.files.len(), 3);

    let reread = read_manifest(dir.path()).unwrap();
    assert_eq!(reread.config, cfg);

    let (_, samples) = load_dataset(dir.path()).unwrap();
    assert_eq!(samples.len(), 3);
    for (i, loaded) in samples.iter().enumerate() {
        let direct = generate(&cfg, i as u64).unwrap();
        assert_eq!(image_bits(loaded), image_bits(&direct));
        assert_eq!(loaded.mask, direct.mask);
    }
}

#[test]
fn invalid_synth_configs_are_rejected() {
    let base = SynthConfig::default();
    for bad in [
        SynthConfig { extent: 48, ..base.clone() },
        SynthConfig { extent: 0, ..base.clone() },
        SynthConfig { num_classes: 1, ..base.clone() },
        SynthConfig { modalities: 0, ..base.clone() },
        SynthConfig { shapes_per_class: (3, 1), ..base.clone() },
        SynthConfig { noise_sigma: -0.5, ..base.clone() },
    ] {
        match generate(&bad, 0) {
            Err(Error::Config(_)) => {}
            other => panic!("expected Config error for {bad:?}, got {other:?}"),
        }
    }
}

#[test]
fn paint_order_puts_higher_classes_on_top() {
    let outer = Ellipsoid { class: 1, center: [16.0, 16.0, 16.0], radii: [8.0, 8.0, 8.0] };
    let inner = Ellipsoid { class: 2, center: [16.0, 16.0, 16.0], radii: [3.0, 3.0, 3.0] };
    let mask = paint_mask(&[outer, inner], 32);
    let center = (16 * 32 + 16) * 32 + 16;
    assert_eq!(mask[center], 2);
    // A point inside the outer shell but outside the inner core keeps class 1.
    let shell = (16 * 32 + 16) * 32 + 22;
    assert_eq!(mask[shell], 1);
    let hist = class_histogram(&mask, 3);
    assert!(hist[0] > 0 && hist[1] > 0 && hist[2] > 0);
}

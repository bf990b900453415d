use coded_resnext::autodiff::{Precision, Tensor};
use coded_resnext::codebook::GenerateOptions;
use coded_resnext::data::{generate_blobs, BlobsConfig, Dataset};
use coded_resnext::network::*;
use coded_resnext::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Parameter count of one bottleneck block, from its layer shapes.
fn block_oracle(c_in: usize, c_out: usize, d: usize, n: usize, k: usize, stride: usize) -> usize {
    let width = n * d;
    let conv_in = c_in * width;
    let conv_mid = width * d * k * k;
    let conv_out = n * d * c_out;
    let norms = 2 * width + 2 * width + 2 * c_out;
    let shortcut = if c_in != c_out || stride > 1 { c_in * c_out + 2 * c_out } else { 0 };
    conv_in + conv_mid + conv_out + norms + shortcut
}

/// `(c_out, d, n, repeat, stride)` per stage.
fn network_oracle(stem_in: usize, stem_out: usize, stem_k: usize, stages: &[(usize, usize, usize, usize, usize)], k: usize) -> usize {
    let mut total = stem_in * stem_out * stem_k * stem_k + 2 * stem_out;
    let mut c = stem_out;
    for &(c_out, d, n, repeat, stride) in stages {
        for i in 0..repeat {
            total += block_oracle(c, c_out, d, n, 3, if i == 0 { stride } else { 1 });
            c = c_out;
        }
    }
    total + c * k + k
}

fn all_count(arch: &ArchSpec) -> ParamCount {
    count_parameters(arch, &[], Keep::All, CountPolicy::Apportioned).unwrap()
}

#[test]
fn preset_totals_match_layer_shape_oracle() {
    let cifar = |n: usize, d: usize, k: usize| {
        network_oracle(3, 64, 3, &[(256, d, n, 3, 1), (512, 2 * d, n, 3, 2), (1024, 4 * d, n, 3, 2)], k)
    };
    assert_eq!(all_count(&ArchSpec::table1_cifar10()).total, cifar(10, 11, 10) as u64);
    assert_eq!(all_count(&ArchSpec::table1_cifar100()).total, cifar(20, 6, 100) as u64);
    let imagenet = network_oracle(
        3,
        64,
        7,
        &[(256, 4, 32, 3, 1), (512, 8, 32, 4, 2), (1024, 16, 32, 6, 2), (2048, 32, 32, 3, 2)],
        1000,
    );
    assert_eq!(all_count(&ArchSpec::table1_imagenet()).total, imagenet as u64);
}

#[test]
fn preset_totals_near_reported_sizes() {
    for (arch, reported, tol) in [
        (ArchSpec::table1_cifar10(), 4.7e6, 0.05),
        (ArchSpec::table1_cifar100(), 4.7e6, 0.05),
        (ArchSpec::table1_imagenet(), 25.0e6, 0.02),
    ] {
        let total = all_count(&arch).total as f64;
        assert!((total / reported - 1.0).abs() < tol, "{}: {total}", arch.name);
    }
}

#[test]
fn preset_stage_sizes_match_reported_breakdown() {
    let close = |got: &[u64], want: &[f64]| {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((*g as f64 / 1e6 - w).abs() <= 0.05 + 0.03 * w, "{got:?} vs {want:?}");
        }
    };
    close(&stage_param_counts(&ArchSpec::table1_cifar10()), &[0.2, 0.9, 3.5]);
    close(&stage_param_counts(&ArchSpec::table1_cifar100()), &[0.2, 0.9, 3.5]);
    close(&stage_param_counts(&ArchSpec::table1_imagenet()), &[0.2, 1.2, 7.0, 14.5]);
}

#[test]
fn built_network_size_equals_count() {
    let arch = ArchSpec::toy(32, 8);
    let schemes = generate_schemes(&arch, &GenerateOptions::default()).unwrap();
    let net = build_network(&arch, &schemes, 3, Precision::F64).unwrap();
    assert_eq!(net.num_params() as u64, all_count(&arch).total);
    let arch = ArchSpec::table1_cifar10();
    let net = build_network(&arch.uncoded(), &[], 0, Precision::F64).unwrap();
    assert_eq!(net.num_params() as u64, all_count(&arch).total);
}

#[test]
fn class_fractions_near_reported() {
    for (arch, want) in [
        (ArchSpec::table1_cifar10(), 0.38),
        (ArchSpec::table1_cifar100(), 0.27),
        (ArchSpec::table1_imagenet(), 0.35),
    ] {
        let c = count_parameters(&arch, &[], Keep::Class(0), CountPolicy::Apportioned).unwrap();
        assert!((c.fraction - want).abs() <= 0.02, "{}: {}", arch.name, c.fraction);
    }
}

#[test]
fn kept_plus_removed_is_total_for_every_class() {
    let arch = ArchSpec::toy(32, 8);
    let schemes = generate_schemes(&arch, &GenerateOptions::default()).unwrap();
    for policy in [CountPolicy::Apportioned, CountPolicy::Retained] {
        let fractions: Vec<f64> = (0..8)
            .map(|k| {
                let c = count_parameters(&arch, &schemes, Keep::Class(k), policy).unwrap();
                assert_eq!(c.kept + c.removed(), c.total);
                assert!(c.kept < c.total);
                c.fraction
            })
            .collect();
        assert!(fractions.windows(2).all(|w| w[0] == w[1]));
    }
    let all = count_parameters(&arch, &schemes, Keep::All, CountPolicy::Retained).unwrap();
    assert_eq!((all.kept, all.fraction), (all.total, 1.0));
    assert!(count_parameters(&arch, &schemes, Keep::Class(8), CountPolicy::Retained).is_err());
}

#[test]
fn toy_network_forward_shapes() {
    let arch = ArchSpec::toy(32, 8);
    assert_eq!(arch.coded_ratios().len(), 2);
    let schemes = generate_schemes(&arch, &GenerateOptions::default()).unwrap();
    let net = build_network(&arch, &schemes, 0, Precision::F64).unwrap();
    assert_eq!(net.coded_blocks(), vec![2, 3, 4, 5]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[5, 32], |_| rng.random_range(-1.0..1.0));
    let inf = net.infer_batch(&x, &[]).unwrap();
    assert_eq!(inf.logits.shape(), &[5, 8]);
    assert!(inf.logits.is_finite());
    assert_eq!(inf.energy_blocks, vec![2, 3, 4, 5]);
    for e in &inf.energies {
        for i in 0..5 {
            assert!((e.row(i).iter().sum::<f64>() - 8.0).abs() < 1e-6);
        }
    }
    assert!(matches!(
        build_network(&arch, &[], 0, Precision::F64),
        Err(Error::MissingScheme { .. })
    ));
}

#[test]
fn inference_independent_of_chunking_and_threads() {
    let arch = ArchSpec::toy(32, 8);
    let schemes = generate_schemes(&arch, &GenerateOptions::default()).unwrap();
    let net = build_network(&arch, &schemes, 0, Precision::F64).unwrap();
    let data = generate_blobs(&BlobsConfig {
        samples_per_class: 20,
        ..Default::default()
    })
    .unwrap();
    let a = net.infer(&data.train.x, &[], 1000, false).unwrap();
    let b = net.infer(&data.train.x, &[], 7, true).unwrap();
    assert_eq!(a, b);
}

#[test]
fn untrained_accuracy_is_chance() {
    let arch = ArchSpec::toy(32, 8);
    let schemes = generate_schemes(&arch, &GenerateOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 4000;
    let x = Tensor::from_fn(&[n, 32], |_| rng.sample(rand_distr::StandardNormal));
    let mut y: Vec<usize> = (0..n).map(|i| i % 8).collect();
    y.shuffle(&mut rng);
    let data = Dataset::new(x, y, 8).unwrap();
    let sigma = (0.125 * 0.875 / n as f64).sqrt();
    let net = build_network(&arch, &schemes, 0, Precision::F64).unwrap();
    let acc = evaluate_accuracy(&net, &data).unwrap().accuracy;
    assert!((acc - 0.125).abs() < 3.0 * sigma, "{acc}");
}

#[test]
fn single_correct_sample_scores_one() {
    let arch = ArchSpec::toy(4, 2).uncoded();
    let net = build_network(&arch, &[], 0, Precision::F64).unwrap();
    let x = Tensor::new(vec![1, 4], vec![0.3, -0.2, 0.5, 1.0]).unwrap();
    let pred = argmax_rows(&net.infer_batch(&x, &[]).unwrap().logits)[0];
    let data = Dataset::new(x, vec![pred], 2).unwrap();
    assert_eq!(evaluate_accuracy(&net, &data).unwrap().accuracy, 1.0);
}

#[test]
fn argmax_ties_pick_lowest() {
    let t = Tensor::new(vec![2, 3], vec![1.0, 3.0, 3.0, 2.0, 2.0, 2.0]).unwrap();
    assert_eq!(argmax_rows(&t), vec![1, 0]);
}

#[test]
fn loss_decomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let ce = rng.random_range(0.0..5.0);
        let coded: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..0.5)).collect();
        let mu = rng.random_range(0.0..10.0);
        let sum: f64 = coded.iter().sum();
        let diff = total_loss(ce, &coded, mu) - total_loss(ce, &coded, 0.0);
        assert!((diff - mu * sum).abs() <= 1e-12 * (1.0 + ce));
    }
    assert_eq!(total_loss(2.0, &[0.0, 0.0], 6.0), 2.0);
    assert_eq!(total_loss(1.25, &[0.5, 0.25], 0.0), 1.25);
    assert_eq!(total_loss(1.0, &[0.5, 0.25], 4.0) - 1.0, 4.0 * 0.75);
}

#[test]
fn cosine_schedule_endpoints() {
    for (warm, total) in [(0, 100), (5, 40), (0, 2)] {
        let lrs: Vec<f64> = (0..total).map(|s| cosine_lr(s, total, warm, 0.1, 1e-4)).collect();
        assert_eq!(lrs[warm], 0.1);
        assert!((lrs[total - 1] - 1e-4).abs() < 1e-15);
        assert!(lrs[warm..].windows(2).all(|w| w[1] <= w[0]));
    }
}

fn small_blobs() -> coded_resnext::data::DatasetSplit {
    generate_blobs(&BlobsConfig {
        samples_per_class: 60,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn training_is_deterministic_and_records_history() {
    let data = small_blobs();
    let arch = ArchSpec::toy(32, 8);
    let schemes = generate_schemes(&arch, &GenerateOptions::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        ..Default::default()
    };
    let run = || {
        let mut net = build_network(&arch, &schemes, 5, Precision::F64).unwrap();
        train(&mut net, &data.train, Some(&data.val), &cfg).unwrap();
        net
    };
    let (a, b) = (run(), run());
    assert_eq!(a.store, b.store);
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.len(), 6);
    let (first, last) = (&a.history[0], &a.history[5]);
    assert_eq!(first.coding_losses.len(), 4);
    for (f, l) in first.coding_losses.iter().zip(&last.coding_losses) {
        assert!(l < f, "coding loss {f} -> {l}");
    }
    assert!(last.loss < first.loss);
    assert!((last.lr - 1e-4).abs() < 1e-15);
}

#[test]
fn f32_training_keeps_parameters_representable() {
    let data = small_blobs();
    let arch = ArchSpec::toy(32, 8);
    let schemes = generate_schemes(&arch, &GenerateOptions::default()).unwrap();
    let mut net = build_network(&arch, &schemes, 0, Precision::F32).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    train(&mut net, &data.train, None, &cfg).unwrap();
    for p in net.store.params() {
        assert!(p.value.data().iter().all(|&v| v == f64::from(v as f32)), "{}", p.name);
    }
}

#[test]
fn nan_input_aborts_with_last_checkpoint() {
    let mut data = small_blobs().train;
    let dir = tempfile::tempdir().unwrap();
    let arch = ArchSpec::toy(32, 8).uncoded();
    let mut net = build_network(&arch, &[], 0, Precision::F64).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    train(&mut net, &data, None, &cfg).unwrap();
    let before = net.store.clone();
    data.x.data_mut()[0] = f64::NAN;
    match train(&mut net, &data, None, &cfg) {
        Err(Error::Diverged { epoch, loss, checkpoint }) => {
            assert_eq!(epoch, 1);
            assert!(loss.is_nan());
            assert!(checkpoint.is_none());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
    // batches before the poisoned one were applied, the poisoned one was not
    assert!(net.store.params().iter().all(|p| p.value.is_finite()));
    assert_ne!(net.store, before);
    let saved = load_checkpoint(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!(saved.history.len(), 1);
}

#[test]
fn invalid_config_rejected() {
    let data = small_blobs().train;
    let mut net = build_network(&ArchSpec::toy(32, 8).uncoded(), &[], 0, Precision::F64).unwrap();
    for cfg in [
        TrainConfig { p_drop: 1.0, ..Default::default() },
        TrainConfig { mu: -1.0, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
    ] {
        assert!(matches!(train(&mut net, &data, None, &cfg), Err(Error::Config(_))));
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let data = small_blobs();
    let arch = ArchSpec::toy(32, 8);
    let schemes = generate_schemes(&arch, &GenerateOptions::default()).unwrap();
    let mut net = build_network(&arch, &schemes, 9, Precision::F32).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..Default::default()
    };
    train(&mut net, &data.train, Some(&data.val), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_checkpoint(&net, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.store, net.store);
    assert_eq!(back.history, net.history);
    assert_eq!(back, net);
    let (a, b) = (
        net.infer(&data.val.x, &[], 64, false).unwrap(),
        back.infer(&data.val.x, &[], 64, false).unwrap(),
    );
    assert_eq!(a.logits.data(), b.logits.data());
    assert_eq!(a.energies, b.energies);

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], &CHECKPOINT_MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), CHECKPOINT_VERSION);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn presets_resolve() {
    for name in PRESETS {
        let arch = ArchSpec::preset(name).unwrap();
        arch.validate().unwrap();
    }
    assert!(matches!(ArchSpec::preset("resnet"), Err(Error::Config(_) | Error::Arch(_))));
}

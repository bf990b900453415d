use coded_resnext::analysis::*;
use coded_resnext::autodiff::{Precision, Tensor};
use coded_resnext::blocks::{BranchRemoval, RemovalConvention};
use coded_resnext::codebook::{generate_scheme, hamming_distance, CodingScheme, GenerateOptions};
use coded_resnext::data::{generate_blobs, BlobsConfig, Dataset};
use coded_resnext::network::*;
use coded_resnext::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy() -> (Network, Dataset) {
    let arch = ArchSpec::toy(32, 8);
    let schemes = generate_schemes(&arch, &GenerateOptions::default()).unwrap();
    let net = build_network(&arch, &schemes, 2, Precision::F64).unwrap();
    let data = generate_blobs(&BlobsConfig {
        samples_per_class: 15,
        ..Default::default()
    })
    .unwrap()
    .train;
    (net, data)
}

fn ablation(block: usize, which: BranchSet, count: usize) -> AblationConfig {
    AblationConfig {
        block,
        which,
        count,
        trials: 3,
        seed: 1,
        convention: RemovalConvention::default(),
    }
}

#[test]
fn removing_nothing_keeps_accuracy() {
    let (net, data) = toy();
    let base = net.evaluate(&data, 64, false).unwrap().accuracy;
    for which in [BranchSet::Active, BranchSet::Inactive] {
        let r = ablate_branches(&net, &data, &ablation(4, which, 0), false).unwrap();
        assert!(r.trial_accuracies.iter().all(|&a| a == base));
    }
}

#[test]
fn ablation_rejects_bad_requests() {
    let (net, data) = toy();
    assert!(matches!(
        ablate_branches(&net, &data, &ablation(4, BranchSet::Active, 3), false),
        Err(Error::Analysis(_))
    ));
    assert!(ablate_branches(&net, &data, &ablation(4, BranchSet::Inactive, 6), false).is_ok());
    assert!(ablate_branches(&net, &data, &ablation(0, BranchSet::Active, 1), false).is_err());
    assert!(ablate_branches(&net, &data, &ablation(9, BranchSet::Active, 1), false).is_err());
}

#[test]
fn ablation_is_seeded_and_thread_independent() {
    let (net, data) = toy();
    let cfg = ablation(2, BranchSet::Active, 2);
    let a = ablate_branches(&net, &data, &cfg, false).unwrap();
    let b = ablate_branches(&net, &data, &cfg, true).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.trial_accuracies.len(), 3);
}

#[test]
fn extracted_size_matches_count() {
    let (net, _) = toy();
    for class in 0..8 {
        let bc = extract_binary_classifier(&net, class).unwrap();
        let count = count_parameters(&net.arch, &net.schemes, Keep::Class(class), CountPolicy::Retained).unwrap();
        assert_eq!(bc.num_params() as u64, count.kept);
        assert_eq!(bc.net.num_outputs(), 1);
    }
    assert!(extract_binary_classifier(&net, 8).is_err());
}

#[test]
fn extracted_logit_equals_full_net_without_other_branches() {
    let (net, data) = toy();
    for class in [0, 5] {
        let bc = extract_binary_classifier(&net, class).unwrap();
        let got = bc.logits(&data.x, false).unwrap();
        let removals: Vec<(usize, BranchRemoval)> = net
            .coded_blocks()
            .into_iter()
            .map(|b| {
                let w = net.blocks()[b].coding.as_ref().unwrap().scheme.codeword(class).bits();
                let keep = vec![w; data.len()];
                (
                    b,
                    BranchRemoval {
                        keep,
                        convention: RemovalConvention::ExcludeFromNormalization,
                    },
                )
            })
            .collect();
        let full = net.infer(&data.x, &removals, 64, false).unwrap();
        for (i, g) in got.iter().enumerate() {
            assert!((g - full.logits.row(i)[class]).abs() < 1e-10);
        }
    }
}

#[test]
fn retained_branches_sum_to_column_sums() {
    let (net, _) = toy();
    for b in net.coded_blocks() {
        let scheme = &net.blocks()[b].coding.as_ref().unwrap().scheme;
        let mut sums = vec![0; 8];
        for class in 0..8 {
            for branch in scheme.codeword(class).active_branches() {
                sums[branch] += 1;
            }
        }
        assert_eq!(&sums, scheme.column_sums());
    }
}

#[test]
fn separated_logits_reach_perfect_f1() {
    let logits = [-3.0, -2.5, -1.0, 1.0, 2.0];
    let positive = [false, false, false, true, true];
    let (t, p) = best_threshold(&logits, &positive).unwrap();
    assert!(t > -1.0 && t < 1.0);
    assert_eq!(p.f1, 1.0);
}

#[test]
fn equal_logits_are_degenerate() {
    let positive = [true, false, false, true, false];
    let (t, p) = best_threshold(&[0.7; 5], &positive).unwrap();
    assert_eq!(t, 0.7);
    let all_pos = PRPoint::from_counts(2, 3, 0, 0);
    assert_eq!(p, all_pos);
    assert!(best_threshold(&[0.1, 0.2], &[false, false]).is_err());
}

proptest! {
    #[test]
    fn calibrated_threshold_beats_every_candidate(
        pairs in prop::collection::vec((-20i32..20, any::<bool>()), 1..30)
    ) {
        let logits: Vec<f64> = pairs.iter().map(|p| f64::from(p.0) / 4.0).collect();
        let positive: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(positive.iter().any(|&p| p));
        let (t, best) = best_threshold(&logits, &positive).unwrap();
        let mut sorted = logits.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        let candidates = std::iter::once(sorted[0]).chain(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        for c in candidates {
            let f = pr_point(&logits, &positive, c).f1;
            prop_assert!(best.f1 >= f);
            if f == best.f1 {
                prop_assert!(t <= c);
            }
        }
        let mut by_value = logits.clone();
        by_value.sort_by(f64::total_cmp);
        let median = by_value[by_value.len() / 2];
        prop_assert!(best.f1 >= pr_point(&logits, &positive, median).f1);
    }
}

#[test]
fn pr_limits() {
    let positive = [true, false, false, false, true, false, false, false];
    let logits = [0.5, 0.1, -0.3, 0.0, 0.2, 0.9, -1.0, 0.4];
    let all = pr_point(&logits, &positive, f64::NEG_INFINITY);
    assert_eq!(all.recall, 1.0);
    assert_eq!(all.precision, 0.25);
    let none = pr_point(&logits, &positive, f64::INFINITY);
    assert_eq!((none.recall, none.precision, none.degenerate), (0.0, 0.0, true));
    let p = PRPoint::from_counts(45, 5, 0, 5);
    assert!((p.precision - 0.9).abs() < 1e-15 && (p.recall - 0.9).abs() < 1e-15);
}

#[test]
fn precision_recall_subsampling() {
    let (net, data) = toy();
    let bc = extract_binary_classifier(&net, 3).unwrap();
    let logits = bc.logits(&data.x, false).unwrap();
    let positive: Vec<bool> = data.y.iter().map(|&y| y == 3).collect();
    let t = logits[0];
    let full = precision_recall(&bc, t, &data, None, 0, false).unwrap();
    assert_eq!(full, pr_point(&logits, &positive, t));
    let unbounded = precision_recall(&bc, t, &data, Some(f64::INFINITY), 0, false).unwrap();
    assert_eq!(unbounded, full);

    let a = precision_recall(&bc, t, &data, Some(2.0), 7, false).unwrap();
    assert_eq!(a, precision_recall(&bc, t, &data, Some(2.0), 7, true).unwrap());
    assert_eq!(a.tp + a.fn_, 12);
    assert_eq!(a.fp + a.tn, 24);

    let no_pos = Dataset::new(data.x.select_rows(&[0]), vec![0], 8).unwrap();
    assert!(precision_recall(&bc, t, &no_pos, None, 0, false).is_err());
}

fn scheme_8_4() -> CodingScheme {
    generate_scheme(8, 8, 4, 4, &GenerateOptions::default()).unwrap()
}

#[test]
fn decode_exact_and_perturbed_codewords() {
    let scheme = scheme_8_4();
    assert!(scheme.min_distance() >= 4);
    let r = scheme.ratio();
    for class in 0..8 {
        let target = scheme.codeword(class).to_f64();
        let v: Vec<f64> = target.iter().map(|t| t / r).collect();
        assert_eq!(early_decode(&v, &scheme, DecodeScaling::Ratio), class);
        assert_eq!(early_decode(&target, &scheme, DecodeScaling::Raw), class);
        for branch in 0..8 {
            let mut p = target.clone();
            p[branch] += if p[branch] > 0.5 { -0.4 } else { 0.4 };
            // brute-force margin: nearest codeword is still the original
            let dists: Vec<f64> = scheme
                .codewords()
                .iter()
                .map(|w| w.to_f64().iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum())
                .collect();
            let nearest = (0..8).min_by(|&a, &b| dists[a].total_cmp(&dists[b])).unwrap();
            assert_eq!(nearest, class);
            let v: Vec<f64> = p.iter().map(|t| t / r).collect();
            assert_eq!(early_decode(&v, &scheme, DecodeScaling::Ratio), class);
        }
    }
}

#[test]
fn uniform_energies_decode_to_class_zero() {
    let scheme = scheme_8_4();
    assert_eq!(early_decode(&[1.0; 8], &scheme, DecodeScaling::Ratio), 0);
    assert_eq!(early_decode(&[1.0; 8], &scheme, DecodeScaling::Raw), 0);
}

#[test]
fn decode_commutes_with_branch_permutation() {
    let scheme = scheme_8_4();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut perm: Vec<usize> = (0..8).collect();
    perm.shuffle(&mut rng);
    let permuted = CodingScheme::new(
        scheme
            .codewords()
            .iter()
            .map(|w| {
                let bits = w.bits();
                coded_resnext::codebook::Codeword::from_bits(&perm.iter().map(|&p| bits[p]).collect::<Vec<_>>()).unwrap()
            })
            .collect(),
    )
    .unwrap();
    for _ in 0..200 {
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..3.0)).collect();
        let pv: Vec<f64> = perm.iter().map(|&p| v[p]).collect();
        assert_eq!(
            early_decode(&v, &scheme, DecodeScaling::Ratio),
            early_decode(&pv, &permuted, DecodeScaling::Ratio)
        );
    }
    let w0 = scheme.codeword(0);
    assert!(hamming_distance(w0, scheme.codeword(1)).unwrap() >= 4);
}

#[test]
fn untrained_early_decoders_near_chance() {
    let (net, _) = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 4000;
    let x = Tensor::from_fn(&[n, 32], |_| rng.sample(rand_distr::StandardNormal));
    let mut y: Vec<usize> = (0..n).map(|i| i % 8).collect();
    y.shuffle(&mut rng);
    let data = Dataset::new(x, y, 8).unwrap();
    let sigma = (0.125 * 0.875 / n as f64).sqrt();
    let acc = early_decoder_accuracy(&net, &data, DecodeScaling::Ratio, false).unwrap();
    assert_eq!(acc.iter().map(|a| a.block).collect::<Vec<_>>(), vec![2, 3, 4, 5]);
    for a in acc {
        assert!((a.accuracy - 0.125).abs() < 3.0 * sigma, "{a:?}");
    }
}

#[test]
fn records_round_trip_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    let records = vec![
        Record::new("ablation/active", "accuracy", 0.1 + 0.2).block(5).trial(3),
        Record::new("binary", "f1", 1.0 / 3.0).class(2),
        Record::new("exponent", "val_accuracy/abs", f64::MIN_POSITIVE),
        Record::new("x,y", "quoted \"metric\"", -1e300),
    ];
    write_records(&path, &records).unwrap();
    assert_eq!(read_records(&path).unwrap(), records);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("experiment,block,class,trial,metric,value\n"));
}

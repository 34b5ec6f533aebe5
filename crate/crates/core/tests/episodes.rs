use std::collections::HashSet;

use proptest::prelude::*;
use protoflow::episodes::*;

#[test]
fn zero_noise_samples_equal_centers() {
    let (centers, d) = synth_with_centers(4, 6, 10, 1.0, 0.0, 11).unwrap();
    for (class, v) in d.records() {
        assert_eq!(v, centers[class as usize].as_slice());
    }
}

#[test]
fn same_seed_same_dataset() {
    let a = synth_gaussian(5, 8, 20, 1.0, 0.35, 42).unwrap();
    let b = synth_gaussian(5, 8, 20, 1.0, 0.35, 42).unwrap();
    assert_eq!(to_pfeb_bytes(&a), to_pfeb_bytes(&b));
    let c = synth_gaussian(5, 8, 20, 1.0, 0.35, 43).unwrap();
    assert_ne!(to_pfeb_bytes(&a), to_pfeb_bytes(&c));
}

#[test]
fn class_means_converge_to_centers() {
    let (sigma, n) = (0.35, 10_000);
    let (centers, d) = synth_with_centers(3, 8, n, 1.0, sigma, 7).unwrap();
    let bound = 3.0 * sigma / (n as f64).sqrt();
    for (class, center) in centers.iter().enumerate() {
        let mean = d.class_mean(class as u32).unwrap();
        for (m, c) in mean.iter().zip(center) {
            assert!((m - c).abs() <= bound, "class {class}: |{m} - {c}| > {bound}");
        }
    }
}

#[test]
fn pfeb_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    // Interleaved class order must survive the round trip.
    let mut d = EmbeddingDataset::new(3, Split::Train);
    d.push(2, &[0.5, -1.0, 3.25]).unwrap();
    d.push(0, &[1e-300, 7.0, -0.0]).unwrap();
    d.push(2, &[1.0, 2.0, 3.0]).unwrap();
    let bytes = to_pfeb_bytes(&d);
    let path = dir.path().join("x.pfeb");
    std::fs::write(&path, &bytes).unwrap();
    let loaded = load_embeddings(&path).unwrap();
    let again = dir.path().join("y.pfeb");
    save_pfeb(&loaded, &again).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), bytes);
    assert_eq!(loaded.class_size(2), 2);
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth_gaussian(3, 4, 5, 1.0, 0.3, 1).unwrap();
    let path = dir.path().join("x.csv");
    save_csv(&d, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("class_id,e0,e1,e2,e3\n"));
    let back = load_embeddings(&path).unwrap();
    assert_eq!(to_pfeb_bytes(&back), to_pfeb_bytes(&d));
}

#[test]
fn csv_rejects_bad_header_and_empty() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "label,e0\n0,1.0\n").unwrap();
    assert!(matches!(load_csv(&path), Err(protoflow::Error::Format(_))));
    std::fs::write(&path, "class_id,e0\n").unwrap();
    let err = load_csv(&path).unwrap_err();
    assert!(err.to_string().contains("no records"));
}

#[test]
fn forced_partition() {
    let (n, k, q) = (3, 2, 2);
    let d = synth_gaussian(n, 4, k + q, 1.0, 0.5, 3).unwrap();
    let cfg = EpisodeConfig { n_way: n, k_shot: k, queries_per_class: q, ..Default::default() };
    let e = sample_episode(&d, &cfg, &mut episode_rng(0, 0)).unwrap();
    let mut ids = e.class_ids.clone();
    ids.sort();
    assert_eq!(ids, vec![0, 1, 2]);
    let mut all: Vec<usize> = e.support_records.iter().chain(&e.query_records).copied().collect();
    all.sort();
    assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
}

#[test]
fn same_rng_state_same_episode() {
    let d = synth_gaussian(10, 4, 30, 1.0, 0.5, 3).unwrap();
    let cfg = EpisodeConfig::default();
    let a = sample_episode(&d, &cfg, &mut episode_rng(9, 4)).unwrap();
    let b = sample_episode(&d, &cfg, &mut episode_rng(9, 4)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn class_frequency_is_uniform() {
    let d = synth_gaussian(20, 2, 2, 1.0, 0.1, 0).unwrap();
    let cfg = EpisodeConfig { n_way: 5, k_shot: 1, queries_per_class: 1, ..Default::default() };
    let episodes = 10_000;
    let mut counts = [0usize; 20];
    let mut rng = episode_rng(2024, 0);
    for _ in 0..episodes {
        let e = sample_episode(&d, &cfg, &mut rng).unwrap();
        for c in e.class_ids {
            counts[c as usize] += 1;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        let freq = n as f64 / episodes as f64;
        assert!((freq - 0.25).abs() <= 0.01, "class {c}: frequency {freq}");
    }
}

#[test]
fn test_split_never_yields_train_classes() {
    let d = synth_gaussian(12, 4, 10, 1.0, 0.3, 0).unwrap();
    let [train, _, test] = d.split_by_classes(8, 0, 4).unwrap();
    train.ensure_disjoint(&test).unwrap();
    let train_ids: HashSet<u32> = train.class_ids().into_iter().collect();
    let cfg = EpisodeConfig { n_way: 4, k_shot: 2, queries_per_class: 3, ..Default::default() };
    for i in 0..200 {
        let e = sample_episode(&test, &cfg, &mut episode_rng(1, i)).unwrap();
        assert!(e.class_ids.iter().all(|c| !train_ids.contains(c)));
    }
}

proptest! {
    #[test]
    fn episodes_are_well_formed(
        seed in any::<u64>(),
        n in 2usize..6,
        k in 1usize..4,
        q in 1usize..4,
        inductive in any::<bool>(),
    ) {
        let d = synth_gaussian(8, 3, 8, 1.0, 0.3, 5).unwrap();
        let cfg = EpisodeConfig { n_way: n, k_shot: k, queries_per_class: q, ..Default::default() };
        let mut e = sample_episode(&d, &cfg, &mut episode_rng(seed, 0)).unwrap();
        if inductive {
            e = e.with_mode(EpisodeMode::Inductive);
        }
        let s: HashSet<usize> = e.support_records.iter().copied().collect();
        prop_assert!(e.query_records.iter().all(|r| !s.contains(r)));
        prop_assert!(e.support_labels.iter().chain(&e.query_labels).all(|&c| c < n));
        let expected = if inductive { n * k } else { n * (k + q) };
        prop_assert_eq!(e.visible_count(), expected);
        for (row, &r) in e.support_records.iter().enumerate() {
            let (class, v) = d.record(r);
            prop_assert_eq!(class, e.class_ids[e.support_labels[row]]);
            prop_assert_eq!(v, e.support.row(row));
        }
    }
}

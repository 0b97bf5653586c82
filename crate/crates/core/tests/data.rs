use std::collections::HashSet;

use ndcr::data::{
    generate_dataset, generate_raw, instance_seed, read_dataset, read_dataset_bytes,
    read_header_bytes, satisfies, write_dataset, write_dataset_bytes, GenConfig,
};
use ndcr::Error;
use proptest::prelude::*;

#[test]
fn count_distribution_follows_the_weights() {
    let cfg = GenConfig::default();
    let total: f64 = cfg.count_weights.iter().sum();
    let mut hist = [0usize; 5];
    let draws = 10_000;
    for i in 0..draws {
        let raw = generate_raw(instance_seed(77, i), &cfg).unwrap();
        hist[raw.clauses.len() - 1] += 1;
    }
    for (k, &n) in hist.iter().enumerate() {
        let expected = cfg.count_weights[k] / total;
        let got = n as f64 / draws as f64;
        assert!(
            (got - expected).abs() <= 0.02,
            "count {}: {got:.4} vs {expected:.4}",
            k + 1
        );
    }
}

#[test]
fn skewed_weights_are_followed_too() {
    let cfg = GenConfig {
        count_weights: vec![1.0, 0.0, 2.0, 0.0, 1.0],
        ..GenConfig::default()
    };
    let mut hist = [0usize; 5];
    for i in 0..10_000 {
        hist[generate_raw(instance_seed(5, i), &cfg)
            .unwrap()
            .clauses
            .len()
            - 1] += 1;
    }
    assert_eq!(hist[1] + hist[3], 0);
    for (k, w) in [(0, 0.25), (2, 0.5), (4, 0.25)] {
        assert!((hist[k] as f64 / 10_000.0 - w).abs() <= 0.02);
    }
}

#[test]
fn exhaustive_satisfaction_matches_the_construction() {
    for cfg in [
        GenConfig::default(),
        GenConfig {
            count_weights: vec![0.0, 0.0, 0.0, 1.0, 1.0],
            negation_prob: 0.7,
            ..GenConfig::default()
        },
    ] {
        for i in 0..2_000 {
            let raw = generate_raw(instance_seed(9, i), &cfg).unwrap();
            let winners: Vec<usize> = (0..raw.attrs.len())
                .filter(|&l| raw.clauses.iter().all(|&c| satisfies(&raw.attrs[l], c)))
                .collect();
            assert_eq!(winners, vec![raw.gold]);
            let distinct: HashSet<&Vec<bool>> = raw.attrs.iter().collect();
            assert_eq!(distinct.len(), raw.attrs.len());
            let attributes: HashSet<usize> = raw.clauses.iter().map(|c| c.attribute).collect();
            assert_eq!(attributes.len(), raw.clauses.len());
        }
    }
}

#[test]
fn stored_masks_agree_with_decoded_attributes() {
    let cfg = GenConfig::default();
    let data = generate_dataset(31, 1_000, &cfg).unwrap();
    let bytes =
        write_dataset_bytes(&serde_json::to_string(&cfg).unwrap(), cfg.hash(), &data).unwrap();
    let (_, decoded) = read_dataset_bytes(&bytes).unwrap();
    for inst in &decoded {
        let masks: Vec<Vec<bool>> = inst
            .clauses
            .iter()
            .map(|&c| inst.attrs.iter().map(|a| satisfies(a, c)).collect())
            .collect();
        assert_eq!(masks, inst.masks);
        assert_eq!(inst.conjunction(), vec![inst.gold]);
        assert!(inst.count >= 1 && inst.count <= 5 && inst.gold < inst.candidates());
        assert!(inst.text.is_finite() && inst.images.is_finite() && inst.cross.is_finite());
    }
}

#[test]
fn files_round_trip_and_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig::default();
    let a = dir.path().join("a.ndcd");
    let b = dir.path().join("b.ndcd");
    write_dataset(&a, &cfg, &generate_dataset(7, 100, &cfg).unwrap()).unwrap();
    write_dataset(&b, &cfg, &generate_dataset(7, 100, &cfg).unwrap()).unwrap();
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());

    let (header, instances) = read_dataset(&a).unwrap();
    assert_eq!(header.count, 100);
    assert_eq!(header.d, 64);
    assert_eq!(header.config_hash, cfg.hash());
    assert_eq!(header.gen_config(), Some(cfg.clone()));
    assert_eq!(instances, generate_dataset(7, 100, &cfg).unwrap());
    let again = write_dataset_bytes(&header.config_json, header.config_hash, &instances).unwrap();
    assert_eq!(again, bytes);
}

#[test]
fn corrupted_headers_are_format_errors() {
    let cfg = GenConfig::default();
    let data = generate_dataset(1, 3, &cfg).unwrap();
    let bytes =
        write_dataset_bytes(&serde_json::to_string(&cfg).unwrap(), cfg.hash(), &data).unwrap();

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(
        read_header_bytes(&magic),
        Err(Error::Format { offset: 0, .. })
    ));

    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(
        read_dataset_bytes(&version),
        Err(Error::Format { offset: 4, .. })
    ));

    let mut width = bytes.clone();
    width[8] = 63;
    assert!(read_dataset_bytes(&width).is_err());

    for cut in [3, 10, 30, bytes.len() - 1] {
        assert!(
            matches!(read_dataset_bytes(&bytes[..cut]), Err(Error::Format { .. })),
            "cut {cut}"
        );
    }
}

#[test]
fn other_encoder_seeds_change_embeddings_but_not_logic() {
    let a = GenConfig::default();
    let b = GenConfig {
        seed: 11,
        ..a.clone()
    };
    let x = generate_dataset(4, 20, &a).unwrap();
    let y = generate_dataset(4, 20, &b).unwrap();
    for (p, q) in x.iter().zip(&y) {
        assert_eq!(
            (p.gold, p.count, &p.attrs, &p.clauses),
            (q.gold, q.count, &q.attrs, &q.clauses)
        );
        assert_ne!(p.text, q.text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_instance_has_exactly_one_answer(
        seed in any::<u64>(),
        candidates in 2usize..12,
        weights in proptest::collection::vec(0.0f64..5.0, 5),
        negation in 0.0f64..1.0,
    ) {
        prop_assume!(weights.iter().any(|&w| w > 0.0));
        let cfg = GenConfig { candidates, count_weights: weights, negation_prob: negation, ..GenConfig::default() };
        let raw = generate_raw(seed, &cfg).unwrap();
        let masks = raw.masks();
        for l in 0..candidates {
            let all = masks.iter().all(|row| row[l]);
            prop_assert_eq!(all, l == raw.gold);
        }
        prop_assert_eq!(generate_raw(seed, &cfg).unwrap().to_bytes(), raw.to_bytes());
    }
}

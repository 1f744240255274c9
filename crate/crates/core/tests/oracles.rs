use aqi_core::eval::{confusion, roc_auc_ovr, weighted_f1};
use aqi_core::rf::{best_split, train_forest, ForestConfig};
use aqi_core::AqiClass;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{auc_oracle, random_labels, small_split_case, split_impurity, split_oracle, weighted_f1_oracle};

fn classes(v: &[u8]) -> Vec<AqiClass> {
    v.iter().map(|&c| AqiClass::new(c).unwrap()).collect()
}

#[test]
fn weighted_f1_hand_example() {
    let f = weighted_f1(&classes(&[1, 1, 2]), &classes(&[1, 2, 2])).unwrap();
    assert!((f - 2.0 / 3.0).abs() < 1e-15);
    assert!((weighted_f1_oracle(&[1, 1, 2], &[1, 2, 2]) - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn weighted_f1_matches_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..1000 {
        let n = rng.random_range(1..80);
        let k = rng.random_range(1..=5);
        let t = random_labels(&mut rng, n, k);
        let kp = rng.random_range(1..=5);
        let p = random_labels(&mut rng, n, kp);
        let got = weighted_f1(&classes(&t), &classes(&p)).unwrap();
        let want = weighted_f1_oracle(&t, &p);
        assert!((got - want).abs() <= 1e-12, "case {case}: {got} vs {want}");
    }
}

fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 5]> {
    let coarse = rng.random_bool(0.5);
    (0..n)
        .map(|_| {
            let mut s = [0.0; 5];
            for v in &mut s {
                *v = if coarse {
                    rng.random_range(0..5) as f64 / 4.0
                } else {
                    rng.random_range(0.0..1.0)
                };
            }
            s
        })
        .collect()
}

#[test]
fn auc_matches_pair_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..1000 {
        let n = rng.random_range(1..60);
        let k = rng.random_range(1..=5);
        let t = random_labels(&mut rng, n, k);
        let s = random_scores(&mut rng, n);
        let got = roc_auc_ovr(&classes(&t), &s).unwrap();
        let want = auc_oracle(&t, &s);
        for c in 0..5 {
            match (got[c], want[c]) {
                (None, None) => {}
                (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12, "case {case} class {c}: {a} vs {b}"),
                other => panic!("case {case} class {c}: defined-ness differs {other:?}"),
            }
        }
    }
}

#[test]
fn confusion_rows_are_supports() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let n = rng.random_range(1..50);
        let t = random_labels(&mut rng, n, 5);
        let p = random_labels(&mut rng, n, 5);
        let m = confusion(&classes(&t), &classes(&p)).unwrap();
        for c in 0..5 {
            let support = t.iter().filter(|&&v| v as usize == c + 1).count() as u64;
            assert_eq!(m[c].iter().sum::<u64>(), support);
        }
        assert_eq!(m.iter().flatten().sum::<u64>(), n as u64);
    }
}

#[test]
fn split_selection_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..500 {
        let (x, y, rows, features) = small_split_case(&mut rng);
        let got = best_split(&x, &classes(&y), &rows, &features).unwrap();
        match (got, split_oracle(&x, &y, &rows, &features)) {
            (None, None) => {}
            (Some(s), Some(best)) => {
                assert!((s.impurity - best).abs() <= 1e-12, "case {case}: {} vs {best}", s.impurity);
                let actual = split_impurity(&x, &y, &rows, s.feature, s.threshold);
                assert!((actual - best).abs() <= 1e-12, "case {case}: chosen split scores {actual}");
            }
            other => panic!("case {case}: {other:?}"),
        }
    }
}

#[test]
fn unbounded_tree_fits_consistent_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let n = rng.random_range(2..120);
        let d = rng.random_range(1..6);
        // distinct rows guarantee consistency
        let x: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r: Vec<f64> = (0..d).map(|_| rng.random_range(0..4) as f64).collect();
                r[0] = i as f64 * 0.37 % 11.0 + i as f64;
                r
            })
            .collect();
        let y = classes(&random_labels(&mut rng, n, 5));
        let cfg = ForestConfig {
            n_estimators: 1,
            max_depth: usize::MAX,
            bootstrap: false,
            seed: rng.random(),
            ..Default::default()
        };
        let forest = train_forest(&x, &y, &cfg).unwrap();
        for (row, label) in x.iter().zip(&y) {
            assert_eq!(forest.predict(row).unwrap(), *label);
        }
    }
}

#[test]
fn forest_is_a_function_of_data_and_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x: Vec<Vec<f64>> = (0..200).map(|_| (0..6).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let y: Vec<AqiClass> = x
        .iter()
        .map(|r| AqiClass::new(1 + (r[0] * 4.99) as u8).unwrap())
        .collect();
    let cfg = ForestConfig {
        n_estimators: 12,
        seed: 21,
        ..Default::default()
    };
    let a = serde_json::to_string(&train_forest(&x, &y, &cfg).unwrap()).unwrap();
    let b = serde_json::to_string(&train_forest(&x, &y, &cfg).unwrap()).unwrap();
    assert_eq!(a, b);
    let c = serde_json::to_string(&train_forest(&x, &y, &ForestConfig { seed: 22, ..cfg }).unwrap()).unwrap();
    assert_ne!(a, c);
    let forest = train_forest(&x, &y, &cfg).unwrap();
    assert!(forest.trees.iter().all(|t| t.depth() <= cfg.max_depth));
}

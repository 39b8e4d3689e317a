use std::collections::BTreeSet;

use datadiet::data::{input_norms, synthetic_gaussian};
use datadiet::nn::{init_params, ModelSpec, Params};
use datadiet::train::{forget_counts, train};
use datadiet::{CheckpointStore, CorrectnessMatrix, InputSpace, Split, TrainConfig};

fn bits(p: &Params) -> Vec<u64> {
    p.iter_flat().map(f64::to_bits).collect()
}

#[test]
fn synthetic_fixture_is_learnable() {
    let ds = synthetic_gaussian(10, 20, 100, 1, Split::Train).unwrap();
    let spec = ModelSpec::mlp(vec![20, 32, 10]);
    let cfg = TrainConfig {
        epochs: 5,
        learning_rate: 0.1,
        seed: 1,
        ..TrainConfig::default()
    };
    let res = train(&spec, &ds, &ds, &cfg, None).unwrap();
    assert!(res.train_accuracy() > 0.9, "train accuracy {}", res.train_accuracy());
}

#[test]
fn step_zero_does_not_depend_on_epoch_count() {
    let ds = synthetic_gaussian(3, 5, 20, 2, Split::Train).unwrap();
    let spec = ModelSpec::mlp(vec![5, 8, 3]);
    let root = tempfile::tempdir().unwrap();
    let mut restored = Vec::new();
    for epochs in [1, 2, 7] {
        let store = CheckpointStore::for_run(root.path(), &format!("epochs_{epochs}")).unwrap();
        let cfg = TrainConfig {
            epochs,
            batch_size: 16,
            seed: 9,
            checkpoint_epochs: BTreeSet::from([0, epochs]),
            ..TrainConfig::default()
        };
        train(&spec, &ds, &ds, &cfg, Some(&store)).unwrap();
        let p0 = store.restore(Some(0)).unwrap();
        assert_ne!(bits(&p0), bits(&store.restore(None).unwrap()));
        restored.push(bits(&p0));
    }
    assert!(restored.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(restored[0], bits(&init_params(&spec, 9).unwrap()));
}

#[test]
fn forget_counts_follow_row_permutations() {
    let rows: Vec<Vec<bool>> = vec![
        vec![true, false, true, false],
        vec![false, false, false, false],
        vec![true, true, true, true],
        vec![false, true, false, true],
        vec![true, false, false, true],
    ];
    let base = forget_counts(&CorrectnessMatrix::from_rows(&rows).unwrap()).unwrap();
    assert_eq!(base, vec![2, 5, 0, 1, 1]);
    let perm = [3, 0, 4, 2, 1];
    let permuted: Vec<Vec<bool>> = perm.iter().map(|&i| rows[i].clone()).collect();
    let got = forget_counts(&CorrectnessMatrix::from_rows(&permuted).unwrap()).unwrap();
    let want: Vec<u32> = perm.iter().map(|&i| base[i]).collect();
    assert_eq!(got, want);
}

#[test]
fn input_norms_follow_example_permutations() {
    let ds = synthetic_gaussian(4, 6, 5, 3, Split::Train).unwrap();
    let perm: Vec<usize> = (0..ds.len()).rev().collect();
    let shuffled = ds.select(&perm);
    for space in [InputSpace::Standardized, InputSpace::Raw] {
        let base = input_norms(&ds, space);
        let got = input_norms(&shuffled, space);
        let want: Vec<f64> = perm.iter().map(|&i| base[i]).collect();
        assert_eq!(got, want);
    }
}

use std::fs;

use datadiet::data::synthetic_gaussian;
use datadiet::experiment::{load_datasets, run_scoring_on, run_sweep_on, DatasetKind};
use datadiet::nn::{init_params, ModelSpec};
use datadiet::scores::{compute_table, RunHandle, TableOptions};
use datadiet::stats::spearman;
use datadiet::{CheckpointStore, ExperimentConfig, ScoreKind, Split};

fn small_config(out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        dataset: DatasetKind::Synthetic,
        output_dir: out.to_path_buf(),
        hidden: vec![16],
        score_runs: 2,
        retrain_trials: 2,
        ..ExperimentConfig::default()
    };
    cfg.synthetic.train_per_class = 12;
    cfg.synthetic.test_per_class = 6;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 16;
    cfg
}

#[test]
fn grand_at_init_tracks_input_norm_on_linear_fixture() {
    let ds = synthetic_gaussian(10, 20, 100, 1, Split::Train).unwrap();
    let spec = ModelSpec::linear_softmax(20, 10);
    let root = tempfile::tempdir().unwrap();
    let runs: Vec<RunHandle> = (0..20u64)
        .map(|r| {
            let store = CheckpointStore::for_run(root.path(), &format!("run_{r}")).unwrap();
            store.save(0, &init_params(&spec, r).unwrap()).unwrap();
            RunHandle {
                store,
                correctness: None,
            }
        })
        .collect();
    let opts = TableOptions::default();
    let grand = compute_table(ScoreKind::grand(0), &ds, &runs, &opts).unwrap();
    let norm = compute_table(ScoreKind::InputNorm, &ds, &runs, &opts).unwrap();
    let rho = spearman(&grand.mean, &norm.mean).unwrap().unwrap();
    assert!(rho > 0.8, "spearman {rho}");
}

#[test]
fn scoring_shapes_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg_a = small_config(a.path());
    let cfg_b = small_config(b.path());
    let (train, test) = load_datasets(&cfg_a).unwrap();

    let first = run_scoring_on(&cfg_a, &train, &test).unwrap();
    run_scoring_on(&cfg_b, &train, &test).unwrap();
    for kind in cfg_a.score_kinds() {
        let table = &first.tables[&kind];
        let expected_trials = if kind == ScoreKind::InputNorm { 1 } else { 2 };
        assert_eq!(table.n_trials(), expected_trials, "{kind}");
        assert_eq!(table.n_examples(), train.len());
        let name = format!("scores_{}.csv", kind.slug());
        assert_eq!(
            fs::read(a.path().join(&name)).unwrap(),
            fs::read(b.path().join(&name)).unwrap(),
            "{name}"
        );
    }

    // Rerunning into the same directory replaces the old checkpoints.
    let again = run_scoring_on(&cfg_a, &train, &test).unwrap();
    assert_eq!(again.tables, first.tables);
}

#[test]
fn identical_seeds_give_identical_rows() {
    let ds = synthetic_gaussian(3, 4, 5, 0, Split::Train).unwrap();
    let spec = ModelSpec::mlp(vec![4, 6, 3]);
    let root = tempfile::tempdir().unwrap();
    let runs: Vec<RunHandle> = (0..2)
        .map(|r| {
            let store = CheckpointStore::for_run(root.path(), &format!("run_{r}")).unwrap();
            store.save(0, &init_params(&spec, 42).unwrap()).unwrap();
            RunHandle {
                store,
                correctness: None,
            }
        })
        .collect();
    let t = compute_table(ScoreKind::grand(0), &ds, &runs, &TableOptions::default()).unwrap();
    assert_eq!(t.trials[0], t.trials[1]);
    assert_eq!(t.mean, t.trials[0]);
}

#[test]
fn sweep_shape_fraction_zero_and_determinism() {
    let out = tempfile::tempdir().unwrap();
    let cfg = small_config(out.path());
    let (train, test) = load_datasets(&cfg).unwrap();
    let scoring = run_scoring_on(&cfg, &train, &test).unwrap();

    let sweep = run_sweep_on(&cfg, &scoring.tables, &train, &test).unwrap();
    let kinds = scoring.tables.len();
    assert_eq!(sweep.rows.len(), kinds * cfg.prune_fractions.len() * cfg.retrain_trials);
    for trial in 0..cfg.retrain_trials {
        let at_zero: Vec<f64> = sweep
            .rows
            .iter()
            .filter(|r| r.fraction == 0.0 && r.trial == trial)
            .map(|r| r.test_accuracy)
            .collect();
        assert_eq!(at_zero.len(), kinds);
        assert!(at_zero.iter().all(|&a| a == at_zero[0]));
    }
    assert!(sweep.rows.iter().all(|r| (0.0..=1.0).contains(&r.test_accuracy)));

    let again = run_sweep_on(&cfg, &scoring.tables, &train, &test).unwrap();
    assert_eq!(again, sweep);
}

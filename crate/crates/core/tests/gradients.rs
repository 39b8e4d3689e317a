use datadiet::nn::{self, backward_per_example, cross_entropy, flat_l2_norm, init_params, ModelSpec, Params};
use datadiet::oracle::{closed_form_grad_norm, expected_grad_norm_factor, random_instance, LinearModel};
use datadiet::scores::{compute_table, grand_one, RunHandle, TableOptions};
use datadiet::{seed, CheckpointStore, Dataset, Example, ScoreKind, Split};
use rand::Rng;

const EPS: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
/// Coordinates where both derivatives are this small are compared absolutely.
const NEGLIGIBLE: f64 = 1e-8;

fn loss(params: &Params, x: &[f64], y: usize) -> f64 {
    cross_entropy(&nn::forward(params, x).unwrap().probs, y).unwrap()
}

fn random_input(dim: usize, s: u64) -> Vec<f64> {
    let mut rng = seed::rng(s);
    (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()
}

#[test]
fn backprop_matches_central_differences() {
    let spec = ModelSpec::mlp(vec![20, 32, 10]);
    let mut worst = 0.0f64;
    for instance in 0..20u64 {
        let params = init_params(&spec, 100 + instance).unwrap();
        let x = random_input(20, 200 + instance);
        let y = (instance % 10) as usize;
        let analytic: Vec<f64> = backward_per_example(&params, &x, y).unwrap().iter_flat().collect();

        let mut probe = params.clone();
        for (k, &a) in analytic.iter().enumerate() {
            let orig = probe.iter_flat().nth(k).unwrap();
            *probe.iter_flat_mut().nth(k).unwrap() = orig + EPS;
            let up = loss(&probe, &x, y);
            *probe.iter_flat_mut().nth(k).unwrap() = orig - EPS;
            let down = loss(&probe, &x, y);
            *probe.iter_flat_mut().nth(k).unwrap() = orig;
            let numeric = (up - down) / (2.0 * EPS);
            if a.abs() < NEGLIGIBLE && numeric.abs() < NEGLIGIBLE {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            worst = worst.max(rel);
            assert!(
                rel < REL_TOL,
                "instance {instance} coordinate {k}: analytic {a}, numeric {numeric}, rel {rel}"
            );
        }
    }
    println!("worst relative error {worst:e}");
}

#[test]
fn grand_one_matches_closed_form_on_linear_models() {
    let mut worst = 0.0f64;
    for i in 0..1000u64 {
        let (params, x, y) = random_instance(10, 50, i).unwrap();
        let a = grand_one(&params, &x, y).unwrap();
        let b = closed_form_grad_norm(&LinearModel::from_params(&params).unwrap(), &x, y).unwrap();
        let rel = (a - b).abs() / b;
        worst = worst.max(rel);
        assert!(rel < 1e-9, "instance {i}: {a} vs {b}");
    }
    println!("worst relative error {worst:e}");
}

#[test]
fn grand_one_matches_materialized_gradient_with_bias() {
    let spec = ModelSpec::mlp(vec![12, 16, 8, 5]);
    for i in 0..50u64 {
        let params = init_params(&spec, i).unwrap();
        let x = random_input(12, 1000 + i);
        let y = (i % 5) as usize;
        let a = grand_one(&params, &x, y).unwrap();
        let b = flat_l2_norm(&backward_per_example(&params, &x, y).unwrap());
        assert!((a - b).abs() <= 1e-12 * b.max(1.0), "{a} vs {b}");
    }
}

#[test]
fn grand_at_init_matches_expected_closed_form() {
    let (dim, classes, draws) = (8, 4, 100usize);
    let mut rng = seed::rng(5);
    let examples: Vec<Example> = (0..6)
        .map(|id| Example {
            id,
            x: (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect(),
            y: id % classes,
        })
        .collect();
    let ds = Dataset::new(examples, classes, Split::Train, dim).unwrap();
    let spec = ModelSpec::linear_softmax(dim, classes);

    let root = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    let mut models = Vec::new();
    for r in 0..draws {
        let params = init_params(&spec, r as u64).unwrap();
        let store = CheckpointStore::for_run(root.path(), &format!("run_{r}")).unwrap();
        store.save(0, &params).unwrap();
        models.push(LinearModel::from_params(&params).unwrap());
        runs.push(RunHandle {
            store,
            correctness: None,
        });
    }
    let table = compute_table(ScoreKind::grand(0), &ds, &runs, &TableOptions::default()).unwrap();
    assert_eq!(table.n_trials(), draws);
    for (i, ex) in ds.examples.iter().enumerate() {
        let norm_x = ex.x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let expected = expected_grad_norm_factor(&models, &ex.x, ex.y).unwrap() * norm_x;
        assert!(
            (table.mean[i] - expected).abs() <= 1e-9 * expected,
            "example {i}: {} vs {expected}",
            table.mean[i]
        );
    }
}

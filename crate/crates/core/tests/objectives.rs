mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tacl::model::ModelParams;
use tacl::objectives::{sent_cl_loss, tacl_loss, tacl_terms, LossBreakdown, TaclReduction};
use tacl::trainer::{batch_loss, step_rng, teacher_states, ExampleSource, Recipe, StepBatch};
use tacl::verify::{tacl_oracle, tacl_oracle_sweep};
use tacl::{Graph, Mode, Tensor};

fn rows(v: &[[f64; 2]]) -> Tensor<f64> {
    Tensor::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

// Values computed once with an independent float64 script.
const STUDENT: [[f64; 2]; 3] = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
const TEACHER: [[f64; 2]; 3] = [[1.0, 0.5], [0.0, 1.0], [-1.0, 1.0]];
const FROZEN: [(f64, f64, [f64; 3]); 3] = [
    (1.0, 1.0144389398397087, [0.4765004612831317, 0.8421903701512017, 1.7246259880847927]),
    (0.5, 1.0968934762188953, [0.18879132537290957, 0.6353533936938082, 2.466535709589968]),
    (0.1, 3.2094692049309543, [0.00013058473418006786, 0.05584007022908033, 9.572436959829602]),
];

#[test]
fn tacl_matches_frozen_values() {
    for (tau, mean, terms) in FROZEN {
        let mut g = Graph::<f64>::new();
        let s = g.param(rows(&STUDENT));
        let t = g.constant(rows(&TEACHER));
        let all = [true; 3];
        let per = tacl_terms(&mut g, s, t, &all, &all, tau).unwrap();
        for (a, b) in g.value(per).data().iter().zip(terms) {
            assert!((a - b).abs() < 1e-12, "tau {tau}: {a} vs {b}");
        }
        let l = tacl_loss(&mut g, s, t, &all, &all, tau, TaclReduction::Mean).unwrap();
        assert!((g.value(l).item() - mean).abs() < 1e-12);
        let oracle = tacl_oracle(&rows(&STUDENT), &rows(&TEACHER), &all, &all, tau);
        for (a, b) in oracle.iter().zip(terms) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn sent_cl_matches_frozen_value() {
    let mut g = Graph::<f64>::new();
    let a = g.param(rows(&[[1.0, 0.0], [0.5, 1.0]]));
    let b = g.param(rows(&[[1.0, 0.2], [0.0, 1.0]]));
    let l = sent_cl_loss(&mut g, a, b, 0.1).unwrap();
    assert!((g.value(l).item() - 0.02104676830326084).abs() < 1e-12);
}

#[test]
fn tacl_sweep_small() {
    let (worst, nonneg) = tacl_oracle_sweep(200, 99).unwrap();
    assert!(worst <= 1e-6, "{worst}");
    assert!(nonneg);
}

#[test]
fn unselected_positions_only_enter_the_denominator() {
    let s = rows(&STUDENT);
    let t = rows(&TEACHER);
    let ind = [true, false, true];
    let mut g = Graph::<f64>::new();
    let sv = g.param(s.clone());
    let tv = g.constant(t.clone());
    let per = tacl_terms(&mut g, sv, tv, &ind, &[true; 3], 1.0).unwrap();
    assert_eq!(g.value(per).numel(), 2);
    let full = &FROZEN[0].2;
    assert!((g.value(per).data()[0] - full[0]).abs() < 1e-12);
    assert!((g.value(per).data()[1] - full[2]).abs() < 1e-12);
}

#[test]
fn teacher_with_gradient_is_rejected() {
    let mut g = Graph::<f64>::new();
    let s = g.param(rows(&STUDENT));
    let t = g.param(rows(&TEACHER));
    assert!(tacl_terms(&mut g, s, t, &[true; 3], &[true; 3], 0.1).is_err());
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tacl_is_invariant_to_positive_row_scaling(seed in any::<u64>(), n in 2usize..8, d in 1usize..12, ti in 0usize..3) {
        let tau = [1.0, 0.1, 0.01][ti];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_rows(&mut rng, n, d);
        let t = random_rows(&mut rng, n, d);
        let mut ind: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        ind[0] = true;
        let scale = |m: &[Vec<f64>], rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            m.iter().map(|r| { let c = rng.random_range(0.01..100.0); r.iter().map(|x| x * c).collect() }).collect()
        };
        let s2 = scale(&s, &mut rng);
        let t2 = scale(&t, &mut rng);
        let loss = |s: &[Vec<f64>], t: &[Vec<f64>]| {
            let mut g = Graph::<f64>::new();
            let sv = g.param(Tensor::from_rows(s).unwrap());
            let tv = g.constant(Tensor::from_rows(t).unwrap());
            let l = tacl_loss(&mut g, sv, tv, &ind, &vec![true; n], tau, TaclReduction::Mean).unwrap();
            g.value(l).item()
        };
        prop_assert!((loss(&s, &t) - loss(&s2, &t2)).abs() <= 1e-9);
    }

    #[test]
    fn tacl_terms_are_non_negative(seed in any::<u64>(), n in 2usize..8, d in 1usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Tensor::from_rows(&random_rows(&mut rng, n, d)).unwrap();
        let t = Tensor::from_rows(&random_rows(&mut rng, n, d)).unwrap();
        let all = vec![true; n];
        for v in tacl_oracle(&s, &t, &all, &all, 0.01) {
            prop_assert!(v >= 0.0);
        }
    }
}

fn breakdown_diff(a: &LossBreakdown, b: &LossBreakdown) -> f64 {
    let opt = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    [(a.total - b.total).abs(), opt(a.mlm, b.mlm), opt(a.nsp, b.nsp), opt(a.tacl, b.tacl), opt(a.sent_cl, b.sent_cl)]
        .into_iter()
        .fold(0.0, f64::max)
}

fn padded_vs_unpadded(recipe: Recipe, seed: u64) -> f64 {
    let (vocab, data) = common::fixture(200);
    let cfg = common::tiny_config(recipe, 10);
    let params: ModelParams<f64> = common::tiny_params(&cfg, &vocab);
    let lcfg = cfg.loss_config();
    let source = ExampleSource::new(&data, vocab.len(), &cfg).unwrap();
    let mut rng = step_rng(seed, 1);
    let examples = source.batch(1, &data, vocab.len(), &cfg, &mut rng).unwrap();
    let loss_at = |pad_to: Option<usize>| {
        let batch = StepBatch::new(&examples, pad_to).unwrap();
        let teacher = teacher_states(&params, &batch.view).unwrap();
        let mut g = Graph::<f64>::new();
        let vars = params.register(&mut g, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, br) = batch_loss(&mut g, &params.config, &vars, &batch, Some(&teacher), &lcfg, Mode::Infer, &mut rng).unwrap();
        br
    };
    breakdown_diff(&loss_at(None), &loss_at(Some(cfg.max_len)))
}

#[test]
fn losses_are_padding_neutral() {
    for recipe in [Recipe::Tacl, Recipe::Model1, Recipe::Model2, Recipe::BaselineMt] {
        for seed in 0..3 {
            let d = padded_vs_unpadded(recipe, seed);
            assert!(d <= 1e-6, "{recipe} seed {seed}: {d}");
        }
    }
}

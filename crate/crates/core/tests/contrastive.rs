use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Optimizer, SGD};
use c2crs_core::contrastive::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(rows: &[Vec<f64>]) -> Tensor {
    let d = rows[0].len();
    Tensor::from_vec(rows.concat(), (rows.len(), d), &Device::Cpu).unwrap()
}

fn s(x: &Tensor) -> f64 {
    x.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

/// Plain-loop InfoNCE with cosine similarity; the positive is in the denominator.
fn oracle(x: &[Vec<f64>], y: &[Vec<f64>], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        let na: f64 = a.iter().map(|p| p * p).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|p| p * p).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let b = x.len();
    let mut total = 0.0;
    for i in 0..b {
        let denom: f64 = (0..b).map(|j| (cos(&x[i], &y[j]) / tau).exp()).sum();
        total += -((cos(&x[i], &y[i]) / tau).exp() / denom).ln();
    }
    total / b as f64
}

fn random_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Vec<Vec<f64>> {
    (0..b).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn gaussian_unit_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    (0..b)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|p| p * p).sum::<f64>().sqrt();
            v.into_iter().map(|p| p / n).collect()
        })
        .collect()
}

#[test]
fn closed_forms() {
    let o = InfoNceOptions::new(1.0);
    assert!(s(&info_nce(&t(&[vec![1.0, 2.0]]), &t(&[vec![-3.0, 0.5]]), &InfoNceOptions::new(0.07), None).unwrap()).abs() < 1e-6);

    let x = t(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
    let sep = s(&info_nce(&x, &x, &o, None).unwrap());
    assert!((sep - (1.0 + (-2f64).exp()).ln()).abs() < 1e-6);
    assert!((sep - 0.126928).abs() < 1e-6);

    let same = t(&vec![vec![0.3, -0.7, 1.0]; 4]);
    let uni = s(&info_nce(&same, &same, &InfoNceOptions::new(0.07), None).unwrap());
    assert!((uni - 4f64.ln()).abs() < 1e-6);
}

#[test]
fn matches_oracle_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let b = rng.gen_range(1..7);
        let d = rng.gen_range(2..6);
        let tau = rng.gen_range(0.05..2.0);
        let (x, y) = (random_rows(&mut rng, b, d), random_rows(&mut rng, b, d));
        let got = s(&info_nce(&t(&x), &t(&y), &InfoNceOptions::new(tau), None).unwrap());
        assert!((got - oracle(&x, &y, tau)).abs() < 1e-9 * (1.0 + got.abs()));
    }
}

#[test]
fn random_unit_vectors_sit_near_log_b() {
    let (b, d, tau) = (32, 128, 0.07);
    let mut terms = Vec::new();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let views: Vec<Vec<Vec<f64>>> = (0..3).map(|_| gaussian_unit_rows(&mut rng, b, d)).collect();
        let ts: Vec<Tensor> = views.iter().map(|v| t(v)).collect();
        let coarse = s(&coarse_loss(Some(&ts[0]), Some(&ts[1]), Some(&ts[2]), &InfoNceOptions::new(tau), None).unwrap().unwrap());
        let mut sum = 0.0;
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let term = oracle(&views[i], &views[j], tau);
            terms.push(term);
            sum += term;
        }
        assert!((coarse - sum).abs() < 1e-9);
    }
    // cos(x, y) has variance 1/d, so E[term] ~ log b + 1/(2 d tau^2), which at
    // tau = 0.07 sits about 0.8 above log b
    let mean = terms.iter().sum::<f64>() / terms.len() as f64;
    let expected = 32f64.ln() + 1.0 / (2.0 * d as f64 * tau * tau);
    assert!((mean - expected).abs() <= 0.1, "mean term {mean}, expected {expected}");
    assert!(mean > 32f64.ln() + 0.2);
}

#[test]
fn coarse_sums_available_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let v: Vec<Vec<Vec<f64>>> = (0..3).map(|_| random_rows(&mut rng, 4, 3)).collect();
    let ts: Vec<Tensor> = v.iter().map(|r| t(r)).collect();
    let o = InfoNceOptions::new(0.5);
    let two = s(&coarse_loss(Some(&ts[0]), Some(&ts[1]), None, &o, None).unwrap().unwrap());
    assert!((two - oracle(&v[0], &v[1], 0.5)).abs() < 1e-9);
    assert!(coarse_loss(Some(&ts[0]), None, None, &o, None).unwrap().is_none());
}

#[test]
fn fine_examples() {
    let o = InfoNceOptions::new(1.0);
    let same = t(&vec![vec![0.5, 0.5]; 4]);
    let batch = FinePairBatch {
        words: Some(same.clone()),
        entities: Some(same.clone()),
        sentences: Some(same),
        groups: vec![0, 1, 2, 3],
    };
    let FineLoss::Value(v) = fine_loss(&batch, &o, true).unwrap() else { panic!("skipped") };
    assert!((s(&v) - 3.0 * 4f64.ln()).abs() < 1e-6);

    let x = t(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
    let batch = FinePairBatch {
        words: Some(x.clone()),
        entities: Some(x.clone()),
        sentences: Some(x),
        groups: vec![0, 1],
    };
    let FineLoss::Value(v) = fine_loss(&batch, &o, true).unwrap() else { panic!("skipped") };
    assert!((s(&v) - 3.0 * (1.0 + (-2f64).exp()).ln()).abs() < 1e-6);

    let one = t(&[vec![1.0, 2.0]]);
    let batch = FinePairBatch {
        words: Some(one.clone()),
        entities: Some(one.clone()),
        sentences: Some(one),
        groups: vec![0],
    };
    assert!(matches!(fine_loss(&batch, &o, true).unwrap(), FineLoss::Skipped));
}

#[test]
fn objective_staging() {
    assert!((pretrain_objective(PretrainStage::Fine, 2.0, 1.0, 0.2) - 2.2).abs() < 1e-12);
    assert_eq!(pretrain_objective(PretrainStage::Fine, 2.0, 1.0, 0.0), 2.0);
    assert_eq!(pretrain_objective(PretrainStage::Coarse, 123.0, 1.0, 0.2), 1.0);
}

#[test]
fn gradient_steps_align_views() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vars: Vec<Var> = (0..3)
        .map(|_| Var::from_tensor(&t(&random_rows(&mut rng, 8, 6))).unwrap())
        .collect();
    let o = InfoNceOptions::new(0.5);
    let loss = |v: &[Var]| coarse_loss(Some(v[0].as_tensor()), Some(v[1].as_tensor()), Some(v[2].as_tensor()), &o, None).unwrap().unwrap();
    let pos_cos = |v: &[Var]| {
        let mut acc = 0.0;
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            acc += c2crs_core::model::mean_positive_cosine(v[i].as_tensor(), v[j].as_tensor()).unwrap();
        }
        acc / 3.0
    };
    let (l0, c0) = (s(&loss(&vars)), pos_cos(&vars));
    let mut opt = SGD::new(vars.clone(), 0.1).unwrap();
    for _ in 0..200 {
        opt.backward_step(&loss(&vars)).unwrap();
    }
    let (l1, c1) = (s(&loss(&vars)), pos_cos(&vars));
    assert!(l1 < l0, "{l0} -> {l1}");
    assert!(c1 > c0, "{c0} -> {c1}");
}

#[test]
fn zero_norm_row_is_rejected() {
    let x = t(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
    assert!(info_nce(&x, &x, &InfoNceOptions::new(0.1), None).is_err());
}

#[test]
fn same_group_negatives_are_masked() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (x, y) = (random_rows(&mut rng, 4, 3), random_rows(&mut rng, 4, 3));
    let got = s(&info_nce(&t(&x), &t(&y), &InfoNceOptions::new(0.3), Some(&[0, 0, 1, 1])).unwrap());
    // each anchor competes only with its positive and the other group's rows
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        dot / (a.iter().map(|p| p * p).sum::<f64>().sqrt() * b.iter().map(|p| p * p).sum::<f64>().sqrt())
    };
    let mut want = 0.0;
    for i in 0..4 {
        let denom: f64 = (0..4).filter(|&j| j == i || j / 2 != i / 2).map(|j| (cos(&x[i], &y[j]) / 0.3).exp()).sum();
        want += -((cos(&x[i], &y[i]) / 0.3).exp() / denom).ln();
    }
    assert!((got - want / 4.0).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bounded_and_scale_invariant(seed in 0u64..10_000, b in 1usize..6, d in 2usize..5, tau in 0.05f64..2.0, c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (random_rows(&mut rng, b, d), random_rows(&mut rng, b, d));
        let o = InfoNceOptions::new(tau);
        let l = s(&info_nce(&t(&x), &t(&y), &o, None).unwrap());
        prop_assert!(l >= -1e-12);
        prop_assert!(l <= (b as f64).ln() + 2.0 / tau + 1e-9);
        let mut xs = x.clone();
        let k = rng.gen_range(0..b);
        for v in &mut xs[k] { *v *= c; }
        let scaled = s(&info_nce(&t(&xs), &t(&y), &o, None).unwrap());
        prop_assert!((l - scaled).abs() < 1e-6);
    }

    #[test]
    fn joint_row_permutation_invariant(seed in 0u64..10_000, b in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (random_rows(&mut rng, b, 3), random_rows(&mut rng, b, 3));
        let mut perm: Vec<usize> = (0..b).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let px: Vec<_> = perm.iter().map(|&i| x[i].clone()).collect();
        let py: Vec<_> = perm.iter().map(|&i| y[i].clone()).collect();
        let o = InfoNceOptions::new(0.2);
        let a = s(&info_nce(&t(&x), &t(&y), &o, None).unwrap());
        let p = s(&info_nce(&t(&px), &t(&py), &o, None).unwrap());
        prop_assert!((a - p).abs() < 1e-6);
    }
}

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use c2crs_core::corpus::{KnowledgeGraph, Triple};
use c2crs_core::nn::ParamStore;
use c2crs_core::recommender::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dev() -> Device {
    Device::Cpu
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

/// Counts, for each k, how many instances have the target among the first k entries.
fn brute_recall(ranked: &[Vec<u32>], targets: &[u32], ks: &[usize]) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::new();
    for &k in ks {
        let mut hits = 0usize;
        for (r, t) in ranked.iter().zip(targets) {
            let mut found = false;
            for item in r.iter().take(k) {
                if item == t {
                    found = true;
                }
            }
            hits += found as usize;
        }
        out.insert(k, if ranked.is_empty() { 0.0 } else { hits as f64 / ranked.len() as f64 });
    }
    out
}

fn ranking_with_target_at(rank: usize, target: u32, n: u32) -> Vec<u32> {
    let mut others: Vec<u32> = (0..n).filter(|&i| i != target).collect();
    others.insert(rank - 1, target);
    others
}

#[test]
fn worked_recall_example() {
    let ranks = [1, 2, 11, 51, 4];
    let targets = vec![7u32; 5];
    let ranked: Vec<Vec<u32>> = ranks.iter().map(|&r| ranking_with_target_at(r, 7, 60)).collect();
    let report = recall_at_k(&ranked, &targets, &DEFAULT_KS);
    assert_eq!(report.recall(1), Some(0.2));
    assert_eq!(report.recall(10), Some(0.6));
    assert_eq!(report.recall(50), Some(0.8));
    assert_eq!(report.n_instances, 5);

    let third = recall_at_k(&[ranking_with_target_at(3, 0, 60)], &[0], &DEFAULT_KS);
    assert_eq!((third.recall(1), third.recall(10), third.recall(50)), (Some(0.0), Some(1.0), Some(1.0)));

    let json = report.to_json();
    assert_eq!(json["recall@10"], 0.6);
    assert_eq!(json["n"], 5);
}

#[test]
fn recall_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n_items = rng.gen_range(2..70u32);
        let n = rng.gen_range(1..12);
        let mut ranked = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..n {
            let mut r: Vec<u32> = (0..n_items).collect();
            r.shuffle(&mut rng);
            ranked.push(r);
            targets.push(rng.gen_range(0..n_items));
        }
        let report = recall_at_k(&ranked, &targets, &DEFAULT_KS);
        assert_eq!(report.recall_at, brute_recall(&ranked, &targets, &DEFAULT_KS));
        let (r1, r10, r50) = (report.recall(1).unwrap(), report.recall(10).unwrap(), report.recall(50).unwrap());
        assert!(0.0 <= r1 && r1 <= r10 && r10 <= r50 && r50 <= 1.0);
    }
}

#[test]
fn rec_loss_closed_forms() {
    let uniform = Tensor::zeros((3, 4), DType::F64, &dev()).unwrap();
    assert!((scalar(&rec_loss(&uniform, &[0, 2, 3]).unwrap()) - 4f64.ln()).abs() < 1e-6);

    let mut confident = vec![0.0f64; 4];
    confident[1] = 30.0;
    let l = rec_loss(&Tensor::from_vec(confident, (1, 4), &dev()).unwrap(), &[1]).unwrap();
    assert!(scalar(&l) <= 1e-6);

    let logits = Tensor::new(&[[0.3f64, -1.0, 2.0], [1.5, 0.0, 0.2]], &dev()).unwrap();
    let both = scalar(&rec_loss(&logits, &[0, 2]).unwrap());
    let a = scalar(&rec_loss(&logits.narrow(0, 0, 1).unwrap(), &[0]).unwrap());
    let b = scalar(&rec_loss(&logits.narrow(0, 1, 1).unwrap(), &[2]).unwrap());
    assert!((both - (a + b) / 2.0).abs() < 1e-12);

    assert!(rec_loss(&logits, &[0, 3]).is_err());
}

#[test]
fn scoring_examples() {
    let items = Tensor::new(&[[1.0f64, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]], &dev()).unwrap();
    let zero = Tensor::zeros((1, 3), DType::F64, &dev()).unwrap();
    let p = score_items(&zero, &items).unwrap().to_vec2::<f64>().unwrap();
    for v in &p[0] {
        assert!((v - 0.25).abs() < 1e-12);
    }
    let dominant = Tensor::new(&[[0.0f64, 0.0, 50.0]], &dev()).unwrap();
    let p = score_items(&dominant, &items).unwrap().to_vec2::<f64>().unwrap();
    assert!((p[0].iter().sum::<f64>() - 1.0).abs() < 1e-5);
    let ranked = rank_items(&p[0], &[10, 11, 12, 13]);
    assert_eq!(ranked[0].0, 12);
    assert!(score_items(&zero, &items.narrow(0, 0, 1).unwrap()).is_err());
}

#[test]
fn ties_rank_lower_id_first() {
    let ranked = rank_items(&[0.25, 0.5, 0.25], &[9, 4, 2]);
    assert_eq!(ranked.iter().map(|r| r.0).collect::<Vec<_>>(), vec![4, 2, 9]);
}

#[test]
fn user_representation_examples() {
    let mut ps = ParamStore::new(DType::F64, 3);
    let user = UserEncoder::new(&mut ps, "rec.user", 3).unwrap();
    let nodes = Tensor::new(&[[1.0f64, 2.0, 3.0], [-1.0, 0.5, 0.0], [1.0, 2.0, 3.0], [4.0, 4.0, -4.0]], &dev()).unwrap();
    let (e, cold) = user.forward(&nodes, &[vec![1], vec![0, 2], vec![1, 3, 3], vec![]]).unwrap();
    let e = e.to_vec2::<f64>().unwrap();
    assert_eq!(cold, vec![false, false, false, true]);
    assert_eq!(e[0], vec![-1.0, 0.5, 0.0]);
    for (a, b) in e[1].iter().zip([1.0, 2.0, 3.0]) {
        assert!((a - b).abs() < 1e-12);
    }
    // convex combination of node 1 and node 3
    let (p, q) = ([-1.0, 0.5, 0.0], [4.0, 4.0, -4.0]);
    let t = (e[2][0] - p[0]) / (q[0] - p[0]);
    assert!((0.0..=1.0).contains(&t));
    for d in 0..3 {
        assert!((e[2][d] - (p[d] + t * (q[d] - p[d]))).abs() < 1e-9);
    }
    let fallback = user.view().fallback().to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert_eq!(e[3], fallback);
}

#[test]
fn recommend_ranks_every_item() {
    let kg = KnowledgeGraph::new(
        5,
        1,
        vec![Triple { head: 0, relation: 0, tail: 1 }],
        vec![1, 3, 4],
    )
    .unwrap();
    let nodes = Tensor::new(
        &[[0.0f64, 0.0], [1.0, 0.0], [5.0, 5.0], [0.0, 1.0], [-1.0, 0.0]],
        &dev(),
    )
    .unwrap();
    let items = item_embeddings(&nodes, &kg).unwrap();
    let user = Tensor::new(&[[0.0f64, 3.0], [2.0, 0.0]], &dev()).unwrap();
    let probs = score_items(&user, &items).unwrap();
    let out = recommend(&probs, &user, &kg).unwrap();
    assert_eq!(out[0].ranked_items, vec![3, 1, 4]);
    assert_eq!(out[1].ranked_items, vec![1, 3, 4]);
    for r in &out {
        assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
        assert!((r.scores.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
    assert_eq!(target_positions(&kg, &[4, 1]).unwrap(), vec![2, 0]);
    assert!(target_positions(&kg, &[2]).is_err());
}

proptest! {
    #[test]
    fn constant_shift_keeps_ranking(logits in prop::collection::vec(-5.0f64..5.0, 2..20), shift in -100.0f64..100.0) {
        let items: Vec<u32> = (0..logits.len() as u32).collect();
        let order = |l: &[f64]| {
            let t = Tensor::new(l, &dev()).unwrap().unsqueeze(0).unwrap();
            let p = candle_nn::ops::softmax(&t, 1).unwrap().to_vec2::<f64>().unwrap().remove(0);
            rank_items(&p, &items).into_iter().map(|r| r.0).collect::<Vec<_>>()
        };
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        // exact ties may reorder through rounding; compare on distinct values only
        let mut sorted = logits.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-9));
        prop_assert_eq!(order(&logits), order(&shifted));
    }
}

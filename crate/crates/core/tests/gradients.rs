//! Backprop gradients against central finite differences in f64.

use candle_core::{DType, Device, Tensor, Var};
use c2crs_core::corpus::{KnowledgeGraph, ReviewDoc, ReviewIndex, Triple};
use c2crs_core::encoders::{RgcnEncoder, ReviewEncoder, SelfAttentivePool, TransformerEncoder};
use c2crs_core::generator::gen_loss;
use c2crs_core::gradcheck::{check_gradients, check_input_gradients, standard_suite, GradCheckOptions};
use c2crs_core::nn::{length_mask, ParamStore};
use std::collections::BTreeMap;

const TOL: f64 = 1e-4;

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions { seed, ..Default::default() }
}

#[test]
fn every_loss_matches_finite_differences() {
    for probe in standard_suite(&opts(11)).unwrap() {
        let r = &probe.report;
        assert_eq!(r.checks.len(), 50);
        assert!(r.nonzero(1e-8) >= 10, "{}: too few informative coordinates", probe.name);
        assert!(r.max_rel_error() <= TOL, "{}: {:?}", probe.name, r.worst());
    }
}

#[test]
fn transformer_probe() {
    let mut ps = ParamStore::new(DType::F64, 2);
    let enc = TransformerEncoder::new(&mut ps, "encoder.conv", 10, 4, 1, 2, 6, 8).unwrap();
    let ids = Tensor::new(&[[5u32, 7, 9], [6, 8, 0]], &Device::Cpu).unwrap();
    let mask = length_mask(&[3, 2], 3, DType::F64, &Device::Cpu).unwrap();
    let params = ps.select(|_| true);
    let r = check_gradients(|| Ok(enc.forward(&ids, &mask)?.sum_all()?), &params, &opts(1)).unwrap();
    assert!(r.max_rel_error() <= TOL, "{:?}", r.worst());
}

#[test]
fn pool_probe() {
    let mut ps = ParamStore::new(DType::F64, 3);
    let pool = SelfAttentivePool::new(&mut ps, "pool", 4).unwrap();
    let m = Var::from_tensor(&Tensor::new(&[[[0.3f64, -0.2, 0.9, 0.1], [0.5, 0.4, -0.6, 0.2], [-0.7, 0.1, 0.2, 0.8]]], &Device::Cpu).unwrap()).unwrap();
    let mask = Tensor::new(&[[1.0f64, 1.0, 1.0]], &Device::Cpu).unwrap();
    // weights depend on the parameters; probe through a non-linear readout
    let mut params = ps.select(|_| true);
    params.push(("input".into(), m.clone()));
    let r = check_gradients(
        || Ok(pool.forward(m.as_tensor(), &mask)?.0.sqr()?.sum_all()?),
        &params,
        &opts(2),
    )
    .unwrap();
    assert!(r.max_rel_error() <= TOL, "{:?}", r.worst());
}

#[test]
fn rgcn_probe() {
    let kg = KnowledgeGraph::new(
        4,
        2,
        vec![
            Triple { head: 0, relation: 0, tail: 2 },
            Triple { head: 1, relation: 1, tail: 2 },
            Triple { head: 3, relation: 0, tail: 0 },
        ],
        vec![0, 1],
    )
    .unwrap();
    let mut ps = ParamStore::new(DType::F64, 4);
    let enc = RgcnEncoder::new(&mut ps, "encoder.rgcn", &kg, 4, 1, 1.0).unwrap();
    let params = ps.select(|_| true);
    let r = check_gradients(|| Ok(enc.forward()?.sum_all()?), &params, &opts(3)).unwrap();
    assert!(r.max_rel_error() <= TOL, "{:?}", r.worst());
}

#[test]
fn review_probe() {
    let mut docs = BTreeMap::new();
    docs.insert(0, ReviewDoc { item_id: 0, sentences: vec![vec![5, 6, 7], vec![8]] });
    docs.insert(1, ReviewDoc { item_id: 1, sentences: vec![vec![9, 5]] });
    let index = ReviewIndex::new(&docs);
    let mut ps = ParamStore::new(DType::F64, 5);
    let enc = ReviewEncoder::new(&mut ps, "encoder.review", &index, 10, 4, 1, 2, 6, 8).unwrap();
    let params = ps.select(|_| true);
    let r = check_gradients(
        || {
            let e = enc.encode_sentences()?.unwrap();
            Ok(enc.view(Some(&e), &[vec![0, 1, 2], vec![]])?.0.sum_all()?)
        },
        &params,
        &opts(4),
    )
    .unwrap();
    assert!(r.max_rel_error() <= TOL, "{:?}", r.worst());
}

/// Gradient of the generation loss w.r.t. the logits of one position.
fn position_grad(weights: &[f64], target: u32) -> Vec<f64> {
    let logits = Var::from_tensor(&Tensor::new(&[[[0.2f64, -0.4, 1.1, 0.3, 0.0, -0.9], [0.5, 0.1, -0.3, 0.7, -1.2, 0.4]]], &Device::Cpu).unwrap()).unwrap();
    let loss = gen_loss(logits.as_tensor(), &[target, 4], &[2], weights).unwrap();
    let g = loss.backward().unwrap();
    g.get(logits.as_tensor()).unwrap().get(0).unwrap().get(0).unwrap().to_vec1().unwrap()
}

#[test]
fn doubling_a_weight_doubles_its_gradient() {
    let base = position_grad(&[1.0; 6], 2);
    let mut w = [1.0; 6];
    w[2] = 2.0;
    let doubled = position_grad(&w, 2);
    for (a, b) in base.iter().zip(&doubled) {
        assert!((b / a - 2.0).abs() < 1e-5);
    }
}

#[test]
fn finite_difference_agrees_on_weighted_term() {
    let logits = Var::from_tensor(&Tensor::new(&[[[0.2f64, -0.4, 1.1], [0.5, 0.1, -0.3]]], &Device::Cpu).unwrap()).unwrap();
    let r = check_input_gradients(
        |t| gen_loss(&t[0], &[2, 1], &[2], &[1.0, 0.1, 0.5]),
        &[logits],
        &GradCheckOptions { coordinates: 20, ..Default::default() },
    )
    .unwrap();
    assert!(r.max_rel_error() <= 1e-6, "{:?}", r.worst());
}

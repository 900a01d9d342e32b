use std::collections::HashSet;

use candle_core::{DType, Device, Tensor, Var, D};
use c2crs_core::config::ModelConfig;
use c2crs_core::corpus::{generate_synthetic_corpus, SynthSpec, Vocabulary};
use c2crs_core::generator::*;
use c2crs_core::nn::{length_mask, ParamStore};
use c2crs_core::C2Crs;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dev() -> Device {
    Device::Cpu
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &dev()).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn memory(rng: &mut ChaCha8Rng, b: usize, d: usize, zero_sentences: bool) -> DecoderMemory {
    let ones = |k| Tensor::ones((b, k), DType::F64, &dev()).unwrap();
    DecoderMemory {
        context: rand_tensor(rng, &[b, 5, d]),
        context_mask: ones(5),
        nodes: rand_tensor(rng, &[b, 3, d]),
        nodes_mask: ones(3),
        sentences: if zero_sentences {
            Tensor::zeros((b, 4, d), DType::F64, &dev()).unwrap()
        } else {
            rand_tensor(rng, &[b, 4, d])
        },
        sentences_mask: ones(4),
    }
}

#[test]
fn zero_review_memory_reduces_to_three_sublayers() {
    let mut ps = ParamStore::new(DType::F64, 1);
    let layer = DecoderLayer::new(&mut ps, "layer", 8, 2, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = memory(&mut rng, 2, 8, true);
    let x = rand_tensor(&mut rng, &[2, 6, 8]);
    let full = layer.forward(&x, &m).unwrap();
    let causal = c2crs_core::nn::causal_bias(6, DType::F64, &dev()).unwrap();
    let h = layer.self_block(&x, &causal).unwrap();
    let h = layer.context_block(&h, &m).unwrap();
    let h = layer.node_block(&h, &m).unwrap();
    let reference = layer.ffn_block(&h).unwrap();
    for (a, b) in flat(&full).iter().zip(flat(&reference)) {
        assert!((a - b).abs() < 1e-12);
    }
    // with non-zero reviews the fourth sub-layer does contribute
    let m2 = memory(&mut ChaCha8Rng::seed_from_u64(1), 2, 8, false);
    assert_ne!(flat(&layer.forward(&x, &m2).unwrap()), flat(&full));
}

#[test]
fn layer_shapes_and_width_check() {
    let mut ps = ParamStore::new(DType::F64, 2);
    let layer = DecoderLayer::new(&mut ps, "layer", 8, 2, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = memory(&mut rng, 1, 8, false);
    let one = layer.forward(&rand_tensor(&mut rng, &[1, 1, 8]), &m).unwrap();
    assert_eq!(one.dims(), &[1, 1, 8]);
    let narrow = memory(&mut rng, 1, 6, false);
    assert!(layer.forward(&rand_tensor(&mut rng, &[1, 2, 8]), &narrow).is_err());
}

#[test]
fn decoder_is_causal() {
    let mut ps = ParamStore::new(DType::F64, 3);
    let dec = Decoder::new(&mut ps, "decoder", 12, 8, 2, 2, 16, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = memory(&mut rng, 1, 8, false);
    let a = Tensor::new(&[[2u32, 5, 6, 7, 8, 9]], &dev()).unwrap();
    let b = Tensor::new(&[[2u32, 5, 6, 11, 10, 5]], &dev()).unwrap();
    let la = dec.forward(&a, &m).unwrap().to_vec3::<f64>().unwrap();
    let lb = dec.forward(&b, &m).unwrap().to_vec3::<f64>().unwrap();
    for t in 0..3 {
        assert_eq!(la[0][t], lb[0][t]);
    }
    assert_ne!(la[0][3], lb[0][3]);
}

#[test]
fn fusion_head_distribution_and_singleton() {
    let mut ps = ParamStore::new(DType::F64, 4);
    let head = FusionHead::new(&mut ps, "head", 4, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    ps.assign("head.out.bias", &rand_tensor(&mut rng, &[9])).unwrap();
    let states = rand_tensor(&mut rng, &[1, 3, 4]);
    let e = rand_tensor(&mut rng, &[1, 1, 4]);
    let mask = Tensor::ones((1, 1), DType::F64, &dev()).unwrap();
    let (logits, attn) = head.forward(&states, &e, &mask).unwrap();
    assert_eq!(flat(&attn), vec![1.0; 3]);
    let p = candle_nn::ops::softmax(&logits, D::Minus1).unwrap().to_vec3::<f64>().unwrap();
    for row in &p[0] {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&x| x >= 0.0));
    }
    // logits = W [r; e] + b with the single sentence column as context
    let w = ps.get("head.out.weight").unwrap().as_tensor().to_vec2::<f64>().unwrap();
    let bias = flat(ps.get("head.out.bias").unwrap().as_tensor());
    let r = states.to_vec3::<f64>().unwrap();
    let ev = flat(&e);
    let got = logits.to_vec3::<f64>().unwrap();
    for t in 0..3 {
        let joint: Vec<f64> = r[0][t].iter().chain(ev.iter()).copied().collect();
        for v in 0..9 {
            let want: f64 = w[v].iter().zip(&joint).map(|(a, b)| a * b).sum::<f64>() + bias[v];
            assert!((got[0][t][v] - want).abs() < 1e-12);
        }
    }
    let (again, _) = head.forward(&states, &e, &mask).unwrap();
    assert_eq!(flat(&again), flat(&logits));
}

#[test]
fn padded_sentences_get_no_attention() {
    let mut ps = ParamStore::new(DType::F64, 5);
    let head = FusionHead::new(&mut ps, "head", 4, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let e = rand_tensor(&mut rng, &[1, 3, 4]);
    let mask = length_mask(&[2], 3, DType::F64, &dev()).unwrap();
    let (_, attn) = head.forward(&rand_tensor(&mut rng, &[1, 2, 4]), &e, &mask).unwrap();
    let a = attn.to_vec3::<f64>().unwrap();
    for row in &a[0] {
        assert!(row[2] < 1e-12);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gen_loss_closed_forms() {
    let uniform = Tensor::zeros((2, 3, 8), DType::F64, &dev()).unwrap();
    let l = gen_loss(&uniform, &[5, 6, 7, 5, 0, 0], &[3, 1], &[1.0; 8]).unwrap();
    assert!((l.to_scalar::<f64>().unwrap() - 8f64.ln()).abs() < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = rand_tensor(&mut rng, &[1, 3, 6]);
    let targets = [1u32, 4, 2];
    let rows = logits.to_vec3::<f64>().unwrap();
    let mut nll = 0.0;
    for (t, &tok) in targets.iter().enumerate() {
        let z: f64 = rows[0][t].iter().map(|x| x.exp()).sum();
        nll -= (rows[0][t][tok as usize].exp() / z).ln();
    }
    let got = gen_loss(&logits, &targets, &[3], &[1.0; 6]).unwrap().to_scalar::<f64>().unwrap();
    assert!((got - nll / 3.0).abs() < 1e-12);
    assert!(gen_loss(&logits, &[1, 9, 2], &[3], &[1.0; 6]).is_err());
}

#[test]
fn instance_weight_examples() {
    assert_eq!(instance_weight(50, 100.0, 0.1), 1.0);
    assert_eq!(instance_weight(200, 100.0, 0.1), 0.5);
    assert_eq!(instance_weight(10_000, 100.0, 0.1), 0.1);
    assert_eq!(instance_weight(100, 100.0, 0.1), 1.0);
    assert_eq!(weight_table(&[0, 99, 400], 100.0, 0.1), vec![1.0, 1.0, 0.25]);
}

/// Gradient of the weighted loss with respect to the logits of every position.
fn logit_grads(logits: &Tensor, targets: &[u32], weights: &[f64]) -> Vec<Vec<f64>> {
    let var = Var::from_tensor(logits).unwrap();
    let loss = gen_loss(var.as_tensor(), targets, &[targets.len()], weights).unwrap();
    let g = loss.backward().unwrap();
    g.get(var.as_tensor()).unwrap().to_vec3::<f64>().unwrap().remove(0)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn frequent_tokens_get_a_tenth_of_the_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = rand_tensor(&mut rng, &[1, 2, 8]);
    let targets = [5u32, 6];
    let mut freqs = vec![10u64; 8];
    freqs[5] = 10_000;
    freqs[6] = 99;
    let weighted = logit_grads(&logits, &targets, &weight_table(&freqs, 100.0, 0.1));
    let plain = logit_grads(&logits, &targets, &[1.0; 8]);
    assert!((norm(&weighted[0]) / norm(&plain[0]) - 0.1).abs() < 1e-4);
    assert!((norm(&weighted[1]) / norm(&plain[1]) - 1.0).abs() < 1e-12);
}

/// Brute-force distinct: every n-gram written out as a string key.
fn brute_distinct(responses: &[Vec<u32>], n: usize) -> f64 {
    let mut all = Vec::new();
    for r in responses {
        if r.len() < n {
            continue;
        }
        for i in 0..=r.len() - n {
            all.push(r[i..i + n].iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "));
        }
    }
    if all.is_empty() {
        return 0.0;
    }
    let unique: HashSet<&String> = all.iter().collect();
    unique.len() as f64 / all.len() as f64
}

#[test]
fn distinct_examples_and_oracle() {
    assert!((distinct_n(&[vec![1, 2, 1, 2]], 2) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(distinct_n(&[vec![1, 2, 3, 4]], 2), 1.0);
    assert_eq!(distinct_n(&[vec![7]], 2), 0.0);
    assert_eq!(distinct_n(&[], 2), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let responses: Vec<Vec<u32>> = (0..rng.gen_range(1..6))
            .map(|_| (0..rng.gen_range(0..10)).map(|_| rng.gen_range(0..5)).collect())
            .collect();
        for n in 2..=4 {
            assert_eq!(distinct_n(&responses, n), brute_distinct(&responses, n));
        }
    }
}

#[test]
fn per_sentence_distinct_averages_responses() {
    let r = vec![vec![1, 2, 1, 2], vec![3, 4, 5], vec![9]];
    assert!((distinct_n_per_sentence(&r, 2) - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
}

/// Scripted next-token distribution over 8 tokens.
fn scripted(prefix: &[u32]) -> c2crs_core::Result<Vec<f64>> {
    let mut p = vec![0.05; 8];
    let pick = match prefix.len() {
        1 => 6,
        2 => 7,
        _ => Vocabulary::EOS_ID as usize,
    };
    p[pick] = 0.65;
    Ok(p)
}

#[test]
fn decoding_contracts() {
    let g = decode(scripted, DecodeMode::Greedy, 10).unwrap();
    assert_eq!(g.tokens, vec![6, 7]);
    assert_eq!(g.termination, Termination::Eos);
    assert_eq!(g.step_probabilities, vec![0.65; 3]);
    assert_eq!(decode(scripted, DecodeMode::Beam { width: 1 }, 10).unwrap(), g);
    let cut = decode(scripted, DecodeMode::Greedy, 1).unwrap();
    assert_eq!((cut.tokens, cut.termination), (vec![6], Termination::MaxLen));
    assert!(decode(scripted, DecodeMode::Greedy, 0).is_err());
    // ties go to the lowest id that is not a blocked special: <eos> here
    let flat_dist = |_: &[u32]| Ok(vec![0.125; 8]);
    let tied = decode(flat_dist, DecodeMode::Greedy, 3).unwrap();
    assert_eq!((tied.tokens, tied.termination), (vec![], Termination::Eos));
}

#[test]
fn beam_prefers_the_more_likely_sequence() {
    // greedy takes 5 (0.5) then a flat tail; beam finds 6 (0.4) followed by a sure eos
    let next = |prefix: &[u32]| -> c2crs_core::Result<Vec<f64>> {
        let mut p = vec![0.0; 8];
        match prefix {
            [_] => {
                p[5] = 0.5;
                p[6] = 0.4;
                p[7] = 0.1;
            }
            [_, 5] => {
                for x in p.iter_mut().skip(3) {
                    *x = 0.2;
                }
            }
            _ => p[Vocabulary::EOS_ID as usize] = 1.0,
        }
        Ok(p)
    };
    assert_eq!(decode(next, DecodeMode::Greedy, 2).unwrap().tokens[0], 5);
    assert_eq!(decode(next, DecodeMode::Beam { width: 2 }, 2).unwrap().tokens, vec![6]);
}

#[test]
fn model_decoding_is_deterministic() {
    let corpus = generate_synthetic_corpus(SynthSpec {
        n_items: 4,
        n_entities: 8,
        n_conversations: 4,
        seed: 2,
    })
    .unwrap();
    let model = C2Crs::new(&ModelConfig::tiny(), &corpus, DType::F32, 9).unwrap();
    let frozen = model.freeze().unwrap();
    let inst = &corpus.instances(64)[1];
    let run = |mode| model.generate(&frozen, &inst.context_token_ids, &inst.context_entities, mode, 12).unwrap();
    let greedy = run(DecodeMode::Greedy);
    assert_eq!(run(DecodeMode::Greedy), greedy);
    assert_eq!(run(DecodeMode::Beam { width: 1 }), greedy);
    assert!(greedy.tokens.len() <= 12);
    assert!(!greedy.tokens.contains(&Vocabulary::PAD_ID));
    for p in &greedy.step_probabilities {
        assert!(*p > 0.0 && *p <= 1.0);
    }
}

proptest! {
    #[test]
    fn weights_are_bounded_and_non_increasing(f in 0u64..1_000_000, g in 0u64..1_000_000, beta in 1.0f64..500.0, gamma in 0.01f64..1.0) {
        let (a, b) = (instance_weight(f, beta, gamma), instance_weight(g, beta, gamma));
        prop_assert!((gamma..=1.0).contains(&a));
        if f <= g {
            prop_assert!(a >= b);
        }
    }

    #[test]
    fn probabilities_form_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 4..40)) {
        let p = probabilities(&Tensor::new(logits.as_slice(), &dev()).unwrap()).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
    }
}

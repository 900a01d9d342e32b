//! Central finite-difference gradient checks against candle's backward pass.

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub coordinates: usize,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged on absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coordinates: 50,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Coordinates where either gradient is larger than `eps` in magnitude.
    pub fn nonzero(&self, eps: f64) -> usize {
        self.checks
            .iter()
            .filter(|c| c.analytic.abs() > eps || c.numeric.abs() > eps)
            .count()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn set_coordinate(var: &Var, base: &[f64], index: usize, value: f64) -> Result<()> {
    let mut v = base.to_vec();
    v[index] = value;
    let t = Tensor::from_vec(v, var.dims(), var.device())?.to_dtype(var.dtype())?;
    var.set(&t)?;
    Ok(())
}

/// Compares backprop gradients of `loss` with central differences on
/// `coordinates` random entries drawn uniformly from the parameters that
/// received a gradient. Parameters must be `f64`.
pub fn check_gradients<F>(loss: F, params: &[(String, Var)], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    let value = loss()?;
    let grads = value.backward()?;
    let mut reached: Vec<(&String, &Var, Vec<f64>)> = Vec::new();
    for (name, var) in params {
        if var.dtype() != DType::F64 {
            return Err(Error::InvalidArgument(format!("gradient check needs f64 parameters; {name} is {:?}", var.dtype())));
        }
        if let Some(g) = grads.get(var.as_tensor()) {
            reached.push((name, var, g.flatten_all()?.to_vec1::<f64>()?));
        }
    }
    let total: usize = reached.iter().map(|r| r.2.len()).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("loss does not depend on any given parameter".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = Vec::with_capacity(opts.coordinates);
    for _ in 0..opts.coordinates {
        let mut flat = rng.gen_range(0..total);
        let (name, var, grad) = reached
            .iter()
            .find(|r| {
                if flat < r.2.len() {
                    true
                } else {
                    flat -= r.2.len();
                    false
                }
            })
            .expect("index within total");
        let base: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1()?;
        let x = base[flat];
        set_coordinate(var, &base, flat, x + opts.step)?;
        let plus = scalar(&loss()?)?;
        set_coordinate(var, &base, flat, x - opts.step)?;
        let minus = scalar(&loss()?)?;
        set_coordinate(var, &base, flat, x)?;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let analytic = grad[flat];
        checks.push(CoordinateCheck {
            param: (*name).clone(),
            index: flat,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric, opts.floor),
        });
    }
    Ok(GradCheckReport { checks })
}

/// Gradient check over plain input tensors instead of model parameters.
pub fn check_input_gradients<F>(loss: F, inputs: &[Var], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let named: Vec<(String, Var)> = inputs
        .iter()
        .enumerate()
        .map(|(i, v)| (format!("input{i}"), v.clone()))
        .collect();
    let tensors: Vec<Tensor> = inputs.iter().map(|v| v.as_tensor().clone()).collect();
    check_gradients(|| loss(&tensors), &named, opts)
}

/// One named gradient check of the standard suite.
#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn random_var(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Var> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(Var::from_tensor(&Tensor::from_vec(v, shape, &candle_core::Device::Cpu)?)?)
}

/// Tiny corpus, model and a batch of three rec-turn contexts from distinct
/// conversations, in f64.
fn tiny_model(seed: u64) -> Result<(crate::model::C2Crs, crate::corpus::Batch)> {
    use crate::corpus::{generate_synthetic_corpus, Batch, ReviewIndex, SynthSpec};
    let corpus = generate_synthetic_corpus(SynthSpec {
        n_items: 4,
        n_entities: 8,
        n_conversations: 4,
        seed,
    })?;
    let config = crate::config::ModelConfig {
        d_conv: 4,
        d_rec: 4,
        d_contrast: 4,
        ffn_width: 6,
        temperature: 0.5,
        ..crate::config::ModelConfig::tiny()
    };
    let model = crate::model::C2Crs::new(&config, &corpus, DType::F64, seed)?;
    let instances = corpus.instances(64);
    let picked: Vec<_> = instances.iter().filter(|i| i.target_item.is_some()).take(3).collect();
    let batch = Batch::from_instances(&picked, &ReviewIndex::new(&corpus.reviews), 16);
    Ok((model, batch))
}

fn model_probe(
    name: &'static str,
    which: crate::model::Objectives,
    pick: fn(&crate::model::LossTerms) -> Option<Tensor>,
    opts: &GradCheckOptions,
) -> Result<ProbeResult> {
    let (model, batch) = tiny_model(opts.seed)?;
    let params = model.params().select(|_| true);
    let loss = || -> Result<Tensor> {
        let terms = model.losses(&batch, which)?;
        pick(&terms).ok_or_else(|| Error::InvalidArgument(format!("{name}: term not computed")))
    };
    Ok(ProbeResult {
        name,
        report: check_gradients(loss, &params, opts)?,
    })
}

/// Finite-difference checks of every loss through its computation path at
/// tiny widths: the contrastive terms directly and through the encoders, the
/// recommendation loss through the user pool and item scoring, and the
/// generation loss through a decoder layer and the output head.
pub fn standard_suite(opts: &GradCheckOptions) -> Result<Vec<ProbeResult>> {
    use crate::contrastive::{info_nce, InfoNceOptions};
    use crate::model::Objectives;

    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let x = random_var(&mut rng, &[3, 4])?;
    let y = random_var(&mut rng, &[3, 4])?;
    let nce = InfoNceOptions::new(0.5);
    out.push(ProbeResult {
        name: "info_nce",
        report: check_input_gradients(|t| info_nce(&t[0], &t[1], &nce, None), &[x, y], opts)?,
    });
    out.push(model_probe(
        "coarse_loss",
        Objectives { coarse: true, ..Default::default() },
        |t| t.coarse.clone(),
        opts,
    )?);
    out.push(model_probe(
        "fine_loss",
        Objectives { fine: true, ..Default::default() },
        |t| t.fine.clone(),
        opts,
    )?);
    out.push(model_probe(
        "rec_loss",
        Objectives { rec: true, ..Default::default() },
        |t| t.rec.clone(),
        opts,
    )?);
    out.push(gen_probe(opts)?);
    Ok(out)
}

/// Generation loss through one decoder layer and the output head
/// (width 8, 12 tokens) with non-uniform token weights.
fn gen_probe(opts: &GradCheckOptions) -> Result<ProbeResult> {
    use crate::generator::{gen_loss, Decoder, DecoderMemory};
    use crate::nn::ParamStore;

    let (d, vocab) = (8, 12);
    let mut ps = ParamStore::new(DType::F64, opts.seed);
    let decoder = Decoder::new(&mut ps, "decoder", vocab, d, 1, 2, 8, 16)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37);
    let dev = candle_core::Device::Cpu;
    let mem = |rng: &mut ChaCha8Rng, k: usize| -> Result<Tensor> { Ok(random_var(rng, &[2, k, d])?.as_tensor().clone()) };
    let mask = |lens: &[usize], k: usize| crate::nn::length_mask(lens, k, DType::F64, &dev);
    let memory = DecoderMemory {
        context: mem(&mut rng, 5)?,
        context_mask: mask(&[5, 3], 5)?,
        nodes: mem(&mut rng, 3)?,
        nodes_mask: mask(&[3, 1], 3)?,
        sentences: mem(&mut rng, 4)?,
        sentences_mask: mask(&[4, 2], 4)?,
    };
    let input: Vec<u32> = vec![2, 6, 7, 9, 2, 11, 5, 0];
    let target: Vec<u32> = vec![6, 7, 9, 3, 11, 5, 3, 0];
    let ids = Tensor::from_vec(input, (2, 4), &dev)?;
    let weights: Vec<f64> = (0..vocab).map(|t| if t % 3 == 0 { 0.25 } else { 1.0 }).collect();
    let params = ps.select(|_| true);
    let loss = || -> Result<Tensor> { gen_loss(&decoder.forward(&ids, &memory)?, &target, &[4, 3], &weights) };
    Ok(ProbeResult {
        name: "gen_loss",
        report: check_gradients(loss, &params, opts)?,
    })
}

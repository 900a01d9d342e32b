use candle_core::{DType, Device, Tensor, D};

use super::ParamStore;
use crate::{Error, Result};

/// Additive bias used to remove masked positions from a softmax.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = ps.fan_in(&format!("{name}.weight"), &[d_out, d_in], d_in)?;
        let bias = if bias {
            Some(ps.constant(&format!("{name}.bias"), &[d_out], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: Tensor,
    shift: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: ps.constant(&format!("{name}.gain"), &[d], 1.0)?,
            shift: ps.constant(&format!("{name}.shift"), &[d], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.shift)?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(ps: &mut ParamStore, name: &str, n: usize, d: usize) -> Result<Self> {
        let table = ps.uniform(name, &[n, d], (3.0 / d as f64).sqrt())?;
        Ok(Self { table })
    }

    pub fn from_tensor(table: Tensor) -> Self {
        Self { table }
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    /// `ids` of any shape `[..]` becomes `[.., d]`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let mut dims = ids.dims().to_vec();
        let flat = ids.flatten_all()?;
        let rows = self.table.index_select(&flat, 0)?;
        dims.push(self.table.dim(1)?);
        Ok(rows.reshape(dims)?)
    }
}

/// Scaled dot-product attention with `n_heads` heads and bias-free
/// projections, so an all-zero memory contributes exactly zero output.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    n_heads: usize,
    d: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, d_mem: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Config(format!("width {d} is not divisible by {n_heads} heads")));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), d, d, false)?,
            k: Linear::new(ps, &format!("{name}.k"), d_mem, d, false)?,
            v: Linear::new(ps, &format!("{name}.v"), d_mem, d, false)?,
            o: Linear::new(ps, &format!("{name}.o"), d, d, false)?,
            n_heads,
            d,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        Ok(x
            .reshape((b, l, self.n_heads, self.d / self.n_heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `x: [b, Lq, d]`, `memory: [b, Lk, d_mem]`; `bias` broadcasts to `[b, h, Lq, Lk]`.
    pub fn forward(&self, x: &Tensor, memory: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, lq, _) = x.dims3()?;
        if memory.dim(0)? != b {
            return Err(Error::InvalidArgument(format!(
                "attention batch mismatch: queries {b}, memory {}",
                memory.dim(0)?
            )));
        }
        let q = self.split(&self.q.forward(x)?)?;
        let k = self.split(&self.k.forward(memory)?)?;
        let v = self.split(&self.v.forward(memory)?)?;
        let scale = 1.0 / ((self.d / self.n_heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, lq, self.d))?;
        self.o.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(ps, &format!("{name}.up"), d, hidden, true)?,
            down: Linear::new(ps, &format!("{name}.down"), hidden, d, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.relu()?)
    }
}

/// 0/1 validity mask `[b, width]` from row lengths.
pub fn length_mask(lengths: &[usize], width: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0f64; lengths.len() * width];
    for (r, &len) in lengths.iter().enumerate() {
        for v in &mut m[r * width..r * width + len.min(width)] {
            *v = 1.0;
        }
    }
    Ok(Tensor::from_vec(m, (lengths.len(), width), device)?.to_dtype(dtype)?)
}

/// Turns a 0/1 mask `[b, k]` into an additive bias `[b, 1, 1, k]` for attention scores.
pub fn key_bias(mask: &Tensor) -> Result<Tensor> {
    let (b, k) = mask.dims2()?;
    let bias = ((mask - 1.0)? * -MASK_NEG)?;
    Ok(bias.reshape((b, 1, 1, k))?)
}

/// Upper-triangular `[1, 1, L, L]` bias blocking attention to later positions.
pub fn causal_bias(len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0f64; len * len];
    for i in 0..len {
        for j in i + 1..len {
            m[i * len + j] = MASK_NEG;
        }
    }
    Ok(Tensor::from_vec(m, (1, 1, len, len), device)?.to_dtype(dtype)?)
}

/// Dense `u32` tensor `[rows, width]` from a row-major buffer.
pub fn id_tensor(ids: &[u32], rows: usize, width: usize, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(ids.to_vec(), (rows, width), device)?)
}

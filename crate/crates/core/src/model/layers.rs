//! Small differentiable building blocks over candle tensors.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::params::{ParamGroup, ParamStore};

pub use super::fused::{SELU_ALPHA, SELU_SCALE};
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

pub fn selu(x: &Tensor) -> Result<Tensor> {
    Ok(super::fused::selu(x)?)
}

/// SELU composed from primitive ops; reference for the fused kernel.
pub fn selu_composed(x: &Tensor) -> Result<Tensor> {
    Ok((x.elu(SELU_ALPHA)? * SELU_SCALE)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// `ln(1 + e^x)` computed as `relu(x) + ln(1 + e^{-|x|})`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = ((x.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok((x.relu()? + tail)?)
}

/// Inverse of softplus; `softplus_inverse(1) = ln(e - 1)`.
pub fn softplus_inverse(y: f64) -> f64 {
    y.exp_m1().ln()
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(super::fused::softmax_last(x)?)
}

/// Softmax composed from primitive ops; reference for the fused kernel.
pub fn softmax_last_composed(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn tensor_from_f64(values: Vec<f64>, shape: &[usize], dtype: DType, dev: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, dev)?.to_dtype(dtype)?)
}

pub fn uniform_var(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    bound: f64,
    dtype: DType,
    dev: &Device,
) -> Result<Var> {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Ok(Var::from_tensor(&tensor_from_f64(vals, shape, dtype, dev)?)?)
}

pub fn const_var(value: f64, shape: &[usize], dtype: DType, dev: &Device) -> Result<Var> {
    let n: usize = shape.iter().product();
    Ok(Var::from_tensor(&tensor_from_f64(vec![value; n], shape, dtype, dev)?)?)
}

/// Per-call dropout state. `None` means evaluation: dropout is the identity.
pub struct DropoutCtx<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl DropoutCtx<'_> {
    pub fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x.clone());
        };
        if self.rate <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let n = x.elem_count();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let mask = tensor_from_f64(mask, x.dims(), x.dtype(), x.device())?;
        Ok((x * mask)?)
    }
}

/// Affine map on the last dimension; weight stored `(in, out)`.
#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let (dtype, dev) = (store.dtype(), store.device().clone());
        let weight = store.register(
            format!("{name}.weight"),
            group,
            uniform_var(rng, &[input, output], bound, dtype, &dev)?,
        );
        let bias = store.register(
            format!("{name}.bias"),
            group,
            uniform_var(rng, &[output], bound, dtype, &dev)?,
        );
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn without_bias(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let (dtype, dev) = (store.dtype(), store.device().clone());
        let weight = store.register(
            format!("{name}.weight"),
            group,
            uniform_var(rng, &[input, output], bound, dtype, &dev)?,
        );
        Ok(Self { weight, bias: None })
    }

    /// A linear map with explicit constant initial weight and bias.
    pub fn constant(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        input: usize,
        output: usize,
        weight: f64,
        bias: f64,
    ) -> Result<Self> {
        let (dtype, dev) = (store.dtype(), store.device().clone());
        let weight = store.register(
            format!("{name}.weight"),
            group,
            const_var(weight, &[input, output], dtype, &dev)?,
        );
        let bias = store.register(
            format!("{name}.bias"),
            group,
            const_var(bias, &[output], dtype, &dev)?,
        );
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / input.max(1);
        let y = x.reshape((rows, input))?.matmul(self.weight.as_tensor())?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        let y = y.reshape(out_dims)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b.as_tensor())?),
            None => Ok(y),
        }
    }
}

/// Batch normalization over rows of a `(rows, features)` matrix.
#[derive(Clone)]
pub struct BatchNorm {
    pub gamma: Var,
    pub beta: Var,
}

/// Batch statistics observed during a training forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    pub fn update(&mut self, batch: &BatchStats) {
        for (m, b) in self.mean.iter_mut().zip(&batch.mean) {
            *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
        }
        for (v, b) in self.var.iter_mut().zip(&batch.var_unbiased) {
            *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b;
        }
    }
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, features: usize) -> Result<Self> {
        let (dtype, dev) = (store.dtype(), store.device().clone());
        let gamma = store.register(
            format!("{name}.gamma"),
            group,
            const_var(1.0, &[features], dtype, &dev)?,
        );
        let beta = store.register(
            format!("{name}.beta"),
            group,
            const_var(0.0, &[features], dtype, &dev)?,
        );
        Ok(Self { gamma, beta })
    }

    /// Normalizes with batch statistics and reports them for the running update.
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, BatchStats)> {
        let rows = x.dims()[0];
        let mean = x.mean_keepdim(0)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(0)?;
        let xhat = centered.broadcast_div(&(var.clone() + BN_EPS)?.sqrt()?)?;
        let y = xhat
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?;
        let to_vec = |t: &Tensor| -> Result<Vec<f64>> {
            Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
        };
        let correction = if rows > 1 {
            rows as f64 / (rows as f64 - 1.0)
        } else {
            1.0
        };
        let stats = BatchStats {
            mean: to_vec(&mean)?,
            var_unbiased: to_vec(&var)?.into_iter().map(|v| v * correction).collect(),
        };
        Ok((y, stats))
    }

    pub fn forward_eval(&self, x: &Tensor, running: &RunningStats) -> Result<Tensor> {
        let f = running.mean.len();
        let (dtype, dev) = (x.dtype(), x.device());
        let mean = tensor_from_f64(running.mean.clone(), &[f], dtype, dev)?;
        let inv_std = tensor_from_f64(
            running.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect(),
            &[f],
            dtype,
            dev,
        )?;
        Ok(x
            .broadcast_sub(&mean)?
            .broadcast_mul(&inv_std)?
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, features: usize) -> Result<Self> {
        let (dtype, dev) = (store.dtype(), store.device().clone());
        let gamma = store.register(
            format!("{name}.gamma"),
            group,
            const_var(1.0, &[features], dtype, &dev)?,
        );
        let beta = store.register(
            format!("{name}.beta"),
            group,
            const_var(0.0, &[features], dtype, &dev)?,
        );
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(super::fused::layer_norm(
            x,
            self.gamma.as_tensor(),
            self.beta.as_tensor(),
            LN_EPS,
        )?)
    }

    /// Composition from primitive ops; reference for the fused kernel.
    pub fn forward_composed(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let xhat = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

/// Single-layer GRU with the r/z/n gate layout; weights `(in, 3H)` and `(H, 3H)`.
#[derive(Clone)]
pub struct Gru {
    pub input: Linear,
    pub hidden: Linear,
    pub hidden_dim: usize,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Result<Self> {
        let group = ParamGroup::Gru;
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let (dtype, dev) = (store.dtype(), store.device().clone());
        let mut make = |suffix: &str, rows: usize, store: &mut ParamStore| -> Result<Linear> {
            let weight = store.register(
                format!("{name}.{suffix}.weight"),
                group,
                uniform_var(rng, &[rows, 3 * hidden_dim], bound, dtype, &dev)?,
            );
            let bias = store.register(
                format!("{name}.{suffix}.bias"),
                group,
                uniform_var(rng, &[3 * hidden_dim], bound, dtype, &dev)?,
            );
            Ok(Linear {
                weight,
                bias: Some(bias),
            })
        };
        let input = make("ih", input_dim, store)?;
        let hidden = make("hh", hidden_dim, store)?;
        Ok(Self {
            input,
            hidden,
            hidden_dim,
        })
    }

    /// Runs over `(sequences, T, in)` from a zero state; returns `(sequences, T, H)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let xp = self.input.forward(x)?;
        let bias = self.hidden.bias.as_ref().expect("recurrent bias");
        Ok(super::fused::gru_sequence(
            &xp,
            self.hidden.weight.as_tensor(),
            bias.as_tensor(),
        )?)
    }

    /// Step-by-step composition from primitive ops; reference for the fused kernel.
    pub fn forward_stepwise(&self, x: &Tensor) -> Result<Tensor> {
        let (seqs, t_len, _) = x.dims3()?;
        let h_dim = self.hidden_dim;
        // (T, seqs, 3H) so each step reads a contiguous slab
        let xp = self.input.forward(x)?.transpose(0, 1)?.contiguous()?;
        let mut h = Tensor::zeros((seqs, h_dim), x.dtype(), x.device())?;
        let mut outputs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = xp.get(t)?;
            let gh = self.hidden.forward(&h)?;
            let rz = sigmoid(&(xt.narrow(1, 0, 2 * h_dim)? + gh.narrow(1, 0, 2 * h_dim)?)?)?;
            let r = rz.narrow(1, 0, h_dim)?;
            let z = rz.narrow(1, h_dim, h_dim)?;
            let n = (xt.narrow(1, 2 * h_dim, h_dim)? + (r * gh.narrow(1, 2 * h_dim, h_dim)?)?)?
                .tanh()?;
            // (1 - z) * n + z * h
            h = (&n + (z * (&h - &n)?)?)?;
            outputs.push(h.clone());
        }
        Ok(Tensor::stack(&outputs, 1)?)
    }
}

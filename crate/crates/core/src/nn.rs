//! Small convolutional building blocks on top of `candle`, shared by the
//! trainable denoiser and the regression baseline.
//!
//! Every spatial operation treats longitude as periodic and clamps latitude,
//! so the networks commute with zonal rolls by multiples of their total
//! pooling factor.

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Module, Optimizer, ParamsAdamW};
use ndarray::{Array4, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::rng;
use crate::{Error, Result};

/// Named, ordered trainable parameters with seeded initialization.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: Vec<(String, Var)>,
    rng: rand_chacha::ChaCha8Rng,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("tensors", &self.vars.len())
            .field("params", &self.count())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            vars: Vec::new(),
            rng: rng(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn push(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.iter().any(|(n, _)| *n == name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.push((name, var));
        Ok(out)
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.push(name, values, shape)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.push(name, vec![value; n], shape)
    }

    pub fn count(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Snapshot of every parameter as `f64` arrays.
    pub fn export(&self) -> Result<Vec<(String, ArrayD<f64>)>> {
        self.vars
            .iter()
            .map(|(n, v)| {
                let t = v.as_tensor().to_dtype(DType::F64)?;
                let shape = t.dims().to_vec();
                let data = t.flatten_all()?.to_vec1::<f64>()?;
                Ok((n.clone(), ArrayD::from_shape_vec(IxDyn(&shape), data).expect("shape")))
            })
            .collect()
    }

    /// Overwrites parameters from named arrays; names and shapes must match.
    pub fn import(&self, arrays: &[(String, ArrayD<f64>)]) -> Result<()> {
        if arrays.len() != self.vars.len() {
            return Err(Error::shape(self.vars.len(), arrays.len()));
        }
        for ((name, var), (an, arr)) in self.vars.iter().zip(arrays) {
            if name != an || var.dims() != arr.shape() {
                return Err(Error::shape(
                    (name, var.dims().to_vec()),
                    (an, arr.shape().to_vec()),
                ));
            }
            let data: Vec<f64> = arr.iter().copied().collect();
            let t = Tensor::from_vec(data, arr.shape(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

/// 2-D convolution with periodic longitude and replicated latitude padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Self::with_scale(store, name, c_in, c_out, kernel, 1.0)
    }

    pub fn with_scale(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        scale: f64,
    ) -> Result<Self> {
        let bound = scale / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], bound)?;
        let bias = store.constant(format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Self { weight, bias, kernel })
    }

    pub fn param_count(c_in: usize, c_out: usize, kernel: usize) -> usize {
        c_out * c_in * kernel * kernel + c_out
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let p = self.kernel / 2;
        let x = if p > 0 { pad_periodic(x, p)? } else { x.clone() };
        let y = x.conv2d(&self.weight, 0, 1, 1, 1)?;
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

/// Pads `p` cells: wrap-around along longitude (dim 3), edge replication
/// along latitude (dim 2).
pub fn pad_periodic(x: &Tensor, p: usize) -> candle_core::Result<Tensor> {
    let w = x.dim(3)?;
    let x = Tensor::cat(&[&x.narrow(3, w - p, p)?, x, &x.narrow(3, 0, p)?], 3)?;
    x.pad_with_same(2, p, p)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: store.uniform(format!("{name}.weight"), &[d_out, d_in], bound)?,
            bias: store.constant(format!("{name}.bias"), &[d_out], 0.0)?,
        })
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

/// Largest divisor of `channels` not exceeding `max_groups`.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

pub fn group_norm(store: &mut ParamStore, name: &str, channels: usize, max_groups: usize) -> Result<candle_nn::GroupNorm> {
    let w = store.constant(format!("{name}.weight"), &[channels], 1.0)?;
    let b = store.constant(format!("{name}.bias"), &[channels], 0.0)?;
    Ok(candle_nn::GroupNorm::new(w, b, channels, group_count(channels, max_groups), 1e-5)?)
}

pub fn upsample_nearest2(x: &Tensor) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    x.upsample_nearest2d(2 * h, 2 * w)
}

/// Factor-2 bilinear upsampling (half-pixel centres), periodic in longitude
/// and edge-clamped in latitude.
pub fn upsample_bilinear2(x: &Tensor) -> candle_core::Result<Tensor> {
    let x = bilinear_axis(x, 3, true)?;
    bilinear_axis(&x, 2, false)
}

fn bilinear_axis(x: &Tensor, dim: usize, periodic: bool) -> candle_core::Result<Tensor> {
    let n = x.dim(dim)?;
    let (prev, next) = if periodic {
        (x.roll(1, dim)?, x.roll(-1, dim)?)
    } else if n == 1 {
        (x.clone(), x.clone())
    } else {
        let prev = Tensor::cat(&[&x.narrow(dim, 0, 1)?, &x.narrow(dim, 0, n - 1)?], dim)?;
        let next = Tensor::cat(&[&x.narrow(dim, 1, n - 1)?, &x.narrow(dim, n - 1, 1)?], dim)?;
        (prev, next)
    };
    let even = ((x * 0.75)? + (prev * 0.25)?)?;
    let odd = ((x * 0.75)? + (next * 0.25)?)?;
    // interleave along `dim`
    let stacked = Tensor::stack(&[&even, &odd], dim + 1)?;
    let mut dims = x.dims().to_vec();
    dims[dim] *= 2;
    stacked.reshape(dims)
}

/// Sinusoidal features of a per-sample scalar, `(B,) -> (B, 2 * half)`.
pub fn fourier_features(values: &[f64], half: usize, dtype: DType) -> Result<Tensor> {
    let mut out = Vec::with_capacity(values.len() * 2 * half);
    for v in values {
        for i in 0..half {
            let f = std::f64::consts::PI * 2f64.powi(i as i32);
            out.push((v * f).cos());
        }
        for i in 0..half {
            let f = std::f64::consts::PI * 2f64.powi(i as i32);
            out.push((v * f).sin());
        }
    }
    Ok(Tensor::from_vec(out, (values.len(), 2 * half), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn to_tensor(a: &Array4<f64>, dtype: DType) -> Result<Tensor> {
    let data: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, a.dim(), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn from_tensor(t: &Tensor) -> Result<Array4<f64>> {
    let dims = t.dims4()?;
    let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(Array4::from_shape_vec(dims, data).expect("tensor shape"))
}

/// Per-sample scalars broadcastable against `(B, C, H, W)`.
pub fn per_sample(values: &[f64], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values.to_vec(), (values.len(), 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean over all but the batch dimension, `(B, ...) -> (B,)`.
pub fn mean_per_sample(x: &Tensor) -> candle_core::Result<Tensor> {
    x.flatten_from(1)?.mean(D::Minus1)
}

/// Optimizer settings shared by all training loops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of `steps` spent in linear warmup.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-4,
            warmup_fraction: 0.05,
            weight_decay: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.steps == 0 {
            problems.push("steps must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(self.learning_rate > 0.0) {
            problems.push("learning_rate must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            problems.push("warmup_fraction must be in [0, 1)".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Linear warmup then cosine decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = (self.warmup_fraction * self.steps as f64).round() as usize;
        if step < warm {
            return self.learning_rate * (step + 1) as f64 / warm as f64;
        }
        let span = (self.steps - warm).max(1) as f64;
        let progress = (step - warm) as f64 / span;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn optimizer(&self, store: &ParamStore) -> Result<AdamW> {
        let params = ParamsAdamW {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..Default::default()
        };
        Ok(AdamW::new(store.vars(), params)?)
    }
}

/// Runs `steps` optimizer updates of a scalar loss, returning the loss trace.
/// Aborts on the first non-finite loss.
pub fn train_loop<F>(store: &ParamStore, cfg: &OptimConfig, mut loss_at: F) -> Result<Vec<f64>>
where
    F: FnMut(usize) -> Result<Tensor>,
{
    cfg.validate()?;
    let mut opt = cfg.optimizer(store)?;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        opt.set_learning_rate(cfg.lr_at(step));
        let loss = loss_at(step)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                context: format!("training loss {value}"),
            });
        }
        opt.backward_step(&loss)?;
        trace.push(value);
    }
    Ok(trace)
}

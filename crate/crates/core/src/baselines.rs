//! Deterministic super-resolution comparators: channel-wise bicubic
//! interpolation and an L1-trained encoder-decoder that refines the bicubic
//! field using the static forcing.

use candle_core::{DType, Tensor};
use candle_nn::Module;
use ndarray::{s, Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grid::ResamplePair;
use crate::nn::{from_tensor, group_norm, to_tensor, train_loop, upsample_bilinear2, Conv2d, OptimConfig, ParamStore};
use crate::rng::{derive_seed, rng};
use crate::synthdata::{map_slices, FieldSet, NormStats};
use crate::{Error, Result};

/// Channel-wise bicubic upsampling; precipitation-like channels are clamped
/// at zero afterwards.
pub fn bicubic_sr(coarse: &FieldSet, pair: &ResamplePair) -> Result<FieldSet> {
    if coarse.grid.shape() != pair.coarse.shape() {
        return Err(Error::shape(pair.coarse.shape(), coarse.grid.shape()));
    }
    let mut out = map_slices(coarse, &pair.fine, |v| pair.bicubic_upsample(&v))?;
    for (c, meta) in coarse.channels.iter().enumerate() {
        if meta.precip_like {
            out.data.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| v.max(0.0));
        }
    }
    Ok(out)
}

/// Bicubic upsampling of every `(time, channel)` slice of a raw array.
pub fn bicubic_array(coarse: &Array4<f64>, pair: &ResamplePair) -> Result<Array4<f64>> {
    let (b, c, _, _) = coarse.dim();
    let (h, w) = pair.fine.shape();
    let mut out = Array4::zeros((b, c, h, w));
    for i in 0..b {
        for k in 0..c {
            out.slice_mut(s![i, k, .., ..])
                .assign(&pair.bicubic_upsample(&coarse.slice(s![i, k, .., ..]))?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorConfig {
    pub channels: usize,
    pub base_width: usize,
    /// Number of resolution levels; the grid must be divisible by `2^(depth-1)`.
    pub depth: usize,
    pub max_groups: usize,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            base_width: 16,
            depth: 3,
            max_groups: 8,
        }
    }
}

impl RegressorConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.channels == 0 {
            p.push("regressor channels must be positive".into());
        }
        if self.base_width == 0 {
            p.push("regressor base_width must be positive".into());
        }
        if self.depth == 0 {
            p.push("regressor depth must be positive".into());
        }
        if self.max_groups == 0 {
            p.push("regressor max_groups must be positive".into());
        }
        p
    }

    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// conv3 → GN → ReLU, twice.
#[derive(Debug, Clone)]
struct DoubleConv {
    c1: Conv2d,
    n1: candle_nn::GroupNorm,
    c2: Conv2d,
    n2: candle_nn::GroupNorm,
}

impl DoubleConv {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            c1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3)?,
            n1: group_norm(store, &format!("{name}.norm1"), c_out, groups)?,
            c2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3)?,
            n2: group_norm(store, &format!("{name}.norm2"), c_out, groups)?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.n1.forward(&self.c1.forward(x)?)?.relu()?;
        self.n2.forward(&self.c2.forward(&h)?)?.relu()
    }
}

/// Encoder-decoder predicting a correction to the bicubic field from
/// `[bicubic(coarse) | forcing]`.
pub struct Regressor {
    config: RegressorConfig,
    store: ParamStore,
    enc: Vec<DoubleConv>,
    dec: Vec<DoubleConv>,
    out: Conv2d,
}

impl std::fmt::Debug for Regressor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Regressor")
            .field("config", &self.config)
            .field("params", &self.store.count())
            .finish()
    }
}

impl Regressor {
    pub fn build(config: &RegressorConfig, dtype: DType, seed: u64) -> Result<Self> {
        let p = config.problems();
        if !p.is_empty() {
            return Err(Error::Config(p));
        }
        let mut store = ParamStore::new(dtype, seed);
        let widths: Vec<usize> = (0..config.depth).map(|l| config.base_width << l).collect();
        let mut enc = Vec::new();
        let mut prev = config.channels + 1;
        for (l, &w) in widths.iter().enumerate() {
            enc.push(DoubleConv::new(&mut store, &format!("enc{l}"), prev, w, config.max_groups)?);
            prev = w;
        }
        let mut dec = Vec::new();
        for l in (0..config.depth - 1).rev() {
            dec.push(DoubleConv::new(&mut store, &format!("dec{l}"), prev + widths[l], widths[l], config.max_groups)?);
            prev = widths[l];
        }
        // zero-initialized head: training starts from the bicubic field
        let out = Conv2d::with_scale(&mut store, "head", prev, config.channels, 1, 0.0)?;
        Ok(Self {
            config: config.clone(),
            store,
            enc,
            dec,
            out,
        })
    }

    pub fn config(&self) -> &RegressorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// `upsampled + net([upsampled | forcing])`, all `(B, ·, H, W)`.
    pub fn forward(&self, upsampled: &Tensor, forcing: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = upsampled.dims4()?;
        if c != self.config.channels {
            return Err(Error::shape(self.config.channels, c));
        }
        let d = self.config.divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::GridSize(format!("{h}x{w} is not divisible by {d}")));
        }
        let mut x = Tensor::cat(&[upsampled, forcing], 1)?;
        let mut skips = Vec::new();
        for (l, block) in self.enc.iter().enumerate() {
            x = block.forward(&x)?;
            if l + 1 < self.enc.len() {
                skips.push(x.clone());
                x = x.max_pool2d(2)?;
            }
        }
        for block in &self.dec {
            let skip = skips.pop().expect("one skip per decoder level");
            x = block.forward(&Tensor::cat(&[&upsample_bilinear2(&x)?, &skip], 1)?)?;
        }
        Ok((upsampled + self.out.forward(&x)?)?)
    }

    /// Prediction on normalized, already upsampled inputs.
    pub fn predict(&self, upsampled: &Array4<f64>, forcing: &Array2<f64>) -> Result<Array4<f64>> {
        let (b, _, h, w) = upsampled.dim();
        if forcing.dim() != (h, w) {
            return Err(Error::shape((h, w), forcing.dim()));
        }
        let f = forcing.broadcast((b, 1, h, w)).expect("forcing broadcast").to_owned();
        let out = self.forward(&to_tensor(upsampled, self.dtype())?, &to_tensor(&f, self.dtype())?)?;
        from_tensor(&out.detach())
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }
}

/// Normalized bicubic inputs, normalized fine targets and the static forcing.
#[derive(Debug, Clone)]
pub struct RegressionData {
    pub upsampled: Array4<f64>,
    pub targets: Array4<f64>,
    pub forcing: Array2<f64>,
}

/// L1 training with seeded batch order.
pub fn train_regressor(net: &Regressor, data: &RegressionData, optim: &OptimConfig, seed: u64) -> Result<Vec<f64>> {
    if data.upsampled.dim() != data.targets.dim() {
        return Err(Error::shape(data.targets.dim(), data.upsampled.dim()));
    }
    let (n, c, h, w) = data.targets.dim();
    if n == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let bsz = optim.batch_size;
    let forcing = data.forcing.broadcast((bsz, 1, h, w)).ok_or_else(|| Error::shape((h, w), data.forcing.dim()))?;
    let forcing = to_tensor(&forcing.to_owned(), net.dtype())?;
    train_loop(&net.store, optim, |step| {
        let mut r = rng(derive_seed(seed, step as u64));
        let idx: Vec<usize> = (0..bsz).map(|_| r.random_range(0..n)).collect();
        let mut xb = Array4::zeros((bsz, c, h, w));
        let mut yb = Array4::zeros((bsz, c, h, w));
        for (o, &i) in idx.iter().enumerate() {
            xb.slice_mut(s![o, .., .., ..]).assign(&data.upsampled.slice(s![i, .., .., ..]));
            yb.slice_mut(s![o, .., .., ..]).assign(&data.targets.slice(s![i, .., .., ..]));
        }
        let pred = net.forward(&to_tensor(&xb, net.dtype())?, &forcing)?;
        Ok((pred - to_tensor(&yb, net.dtype())?)?.abs()?.mean_all()?)
    })
}

/// Inference path: bicubic pre-upsampling of normalized coarse fields, the
/// network, then denormalization (and the precipitation clamp).
pub fn regressor_sr(
    net: &Regressor,
    coarse_normalized: &FieldSet,
    forcing: &Array2<f64>,
    pair: &ResamplePair,
    stats: &NormStats,
) -> Result<FieldSet> {
    let up = map_slices(coarse_normalized, &pair.fine, |v| pair.bicubic_upsample(&v))?;
    let pred = net.predict(&up.data, forcing)?;
    let mut out = stats.denormalize(&up.with_data(pred)?)?;
    for (c, meta) in out.channels.clone().iter().enumerate() {
        if meta.precip_like {
            out.data.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| v.max(0.0));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normals;
    use crate::synthdata::{generate_grf, ChannelMeta, SpectrumSpec};

    fn field(seed: u64, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        Array4::from_shape_vec(shape, normals(seed, n)).unwrap()
    }

    fn roll_lon(a: &Array4<f64>, k: usize) -> Array4<f64> {
        let w = a.dim().3;
        Array4::from_shape_fn(a.dim(), |(b, c, i, j)| a[[b, c, i, (j + w - k) % w]])
    }

    #[test]
    fn bicubic_constant_and_clamp() {
        let pair = ResamplePair::new(8, 16, 2).unwrap();
        let c = FieldSet::new(Array4::from_elem((2, 1, 4, 8), 3.0), vec![ChannelMeta::new("t", "K")], pair.coarse.clone())
            .unwrap();
        let f = bicubic_sr(&c, &pair).unwrap();
        assert!(f.data.iter().all(|v| (v - 3.0).abs() < 1e-12));
        // a spike overshoots negative under Catmull-Rom; precip clamps it
        let mut spike = Array4::zeros((1, 1, 4, 8));
        spike[[0, 0, 2, 3]] = 5.0;
        let p = FieldSet::new(spike, vec![ChannelMeta::precip("pr", "mm")], pair.coarse.clone()).unwrap();
        let raw = bicubic_array(&p.data, &pair).unwrap();
        assert!(raw.iter().any(|v| *v < 0.0));
        assert!(bicubic_sr(&p, &pair).unwrap().data.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn bicubic_damps_high_wavenumbers() {
        let pair = ResamplePair::new(32, 64, 4).unwrap();
        let spec = SpectrumSpec { slope: 2.0, k_min: 1, k_max: 32, amplitude: 1.0 };
        let truth = generate_grf(&pair.fine, &spec, 1, 16).unwrap();
        let coarse = map_slices(&truth, &pair.coarse, |v| pair.coarsen(&v)).unwrap();
        let up = bicubic_sr(&coarse, &pair).unwrap();
        let high = |f: &FieldSet| -> f64 {
            let planner = rustfft::FftPlanner::new().plan_fft_forward(64);
            let mut acc = 0.0;
            for t in 0..f.n_time() {
                for row in f.slice(t, 0).outer_iter() {
                    let p = crate::spectral::zonal_power_row(&planner, &row.to_vec());
                    acc += p[9..].iter().sum::<f64>();
                }
            }
            acc
        };
        assert!(high(&up) * 5.0 < high(&truth));
    }

    #[test]
    fn regressor_roll_equivariant_and_deterministic() {
        let net = Regressor::build(&RegressorConfig { base_width: 4, ..Default::default() }, DType::F64, 1).unwrap();
        // perturb the zero head so the network path contributes
        let head = net.params().get("head.weight").unwrap();
        head.set(&(head.as_tensor() + 0.3).unwrap()).unwrap();
        let x = field(1, (2, 1, 8, 16));
        let forcing = field(2, (1, 1, 8, 16)).slice(s![0, 0, .., ..]).to_owned();
        let a = net.predict(&x, &forcing).unwrap();
        assert_eq!(a, net.predict(&x, &forcing).unwrap());
        let f4 = roll_lon(&forcing.clone().insert_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0)), 4);
        let rolled = net.predict(&roll_lon(&x, 4), &f4.slice(s![0, 0, .., ..]).to_owned()).unwrap();
        let expect = roll_lon(&a, 4);
        assert!(rolled.iter().zip(expect.iter()).all(|(p, q)| (p - q).abs() < 1e-5));
    }

    #[test]
    fn bicubic_roll_equivariant() {
        let pair = ResamplePair::new(8, 16, 2).unwrap();
        let c = field(3, (1, 1, 4, 8));
        let a = bicubic_array(&c, &pair).unwrap();
        let b = bicubic_array(&roll_lon(&c, 3), &pair).unwrap();
        assert!(b.iter().zip(roll_lon(&a, 6).iter()).all(|(p, q)| (p - q).abs() < 1e-10));
    }

    #[test]
    fn learns_identity_residual() {
        // targets equal the bicubic input: the correction should stay near zero
        let pair = ResamplePair::new(8, 16, 2).unwrap();
        let up = bicubic_array(&field(4, (16, 1, 4, 8)), &pair).unwrap();
        let data = RegressionData { upsampled: up.clone(), targets: up, forcing: Array2::zeros((8, 16)) };
        let net = Regressor::build(&RegressorConfig { base_width: 4, depth: 2, ..Default::default() }, DType::F32, 2).unwrap();
        let optim = OptimConfig { steps: 50, batch_size: 4, learning_rate: 1e-3, ..Default::default() };
        let trace = train_regressor(&net, &data, &optim, 3).unwrap();
        assert!(trace.iter().all(|v| v.is_finite()));
        let test = bicubic_array(&field(5, (4, 1, 4, 8)), &pair).unwrap();
        let pred = net.predict(&test, &Array2::zeros((8, 16))).unwrap();
        let l1 = (&pred - &test).mapv(f64::abs).mean().unwrap();
        assert!(l1 < 0.05, "held-out L1 {l1}");
    }
}

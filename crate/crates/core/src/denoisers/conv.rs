use candle_core::{DType, Tensor, Var, D};
use candle_nn::Module;
use ndarray::{s, Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Denoiser, Pullback};
use crate::edm::{loss_weight, precondition_coeffs, sample_training_sigmas, NoiseSchedule};
use crate::grid::ResamplePair;
use crate::nn::{
    fourier_features, from_tensor, group_norm, mean_per_sample, per_sample, to_tensor, train_loop, upsample_nearest2,
    Conv2d, Linear, OptimConfig, ParamStore,
};
use crate::rng::{derive_seed, normals, rng};
use crate::{Error, Result};

/// Architecture of the residual encoder-decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvDenoiserConfig {
    /// Channels of the field being denoised.
    pub channels: usize,
    /// Extra conditioning channels concatenated to the input.
    pub cond_channels: usize,
    pub base_width: usize,
    /// Width multiplier per level; one level per entry.
    pub multipliers: Vec<usize>,
    pub blocks_per_level: usize,
    pub max_groups: usize,
    /// Number of sinusoid frequencies in the noise embedding.
    pub embedding_frequencies: usize,
    pub sigma_data: f64,
}

impl Default for ConvDenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            cond_channels: 0,
            base_width: 16,
            multipliers: vec![1, 2, 4],
            blocks_per_level: 2,
            max_groups: 8,
            embedding_frequencies: 4,
            sigma_data: 1.2,
        }
    }
}

impl ConvDenoiserConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.channels == 0 {
            p.push("denoiser channels must be positive".into());
        }
        if self.base_width == 0 {
            p.push("base_width must be positive".into());
        }
        if self.multipliers.is_empty() || self.multipliers.contains(&0) {
            p.push("multipliers must be a non-empty list of positive integers".into());
        }
        if self.blocks_per_level == 0 {
            p.push("blocks_per_level must be positive".into());
        }
        if self.max_groups == 0 {
            p.push("max_groups must be positive".into());
        }
        if self.embedding_frequencies == 0 {
            p.push("embedding_frequencies must be positive".into());
        }
        if !(self.sigma_data > 0.0) {
            p.push("sigma_data must be positive".into());
        }
        p
    }

    pub fn levels(&self) -> usize {
        self.multipliers.len()
    }

    fn embedding_dim(&self) -> usize {
        4 * self.base_width
    }

    fn widths(&self) -> Vec<usize> {
        self.multipliers.iter().map(|m| m * self.base_width).collect()
    }

    /// Grid sides must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    /// Parameter count of the declared architecture.
    pub fn param_count(&self) -> usize {
        let e = self.embedding_dim();
        let widths = self.widths();
        let mut n = Linear::param_count(2 * self.embedding_frequencies, e);
        n += Conv2d::param_count(self.channels + self.cond_channels, widths[0], 3);
        let mut prev = widths[0];
        for &w in &widths {
            for _ in 0..self.blocks_per_level {
                n += ResBlock::param_count(prev, w, e);
                prev = w;
            }
        }
        for l in (0..widths.len() - 1).rev() {
            let mut c_in = prev + widths[l];
            for _ in 0..self.blocks_per_level {
                n += ResBlock::param_count(c_in, widths[l], e);
                c_in = widths[l];
            }
            prev = widths[l];
        }
        n + 2 * prev + Conv2d::param_count(prev, self.channels, 3)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: candle_nn::GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: candle_nn::GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, emb: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(store, &format!("{name}.norm1"), c_in, groups)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3)?,
            emb: Linear::new(store, &format!("{name}.emb"), emb, c_out)?,
            norm2: group_norm(store, &format!("{name}.norm2"), c_out, groups)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(store, &format!("{name}.skip"), c_in, c_out, 1)?)
            } else {
                None
            },
        })
    }

    fn param_count(c_in: usize, c_out: usize, emb: usize) -> usize {
        let skip = if c_in != c_out { Conv2d::param_count(c_in, c_out, 1) } else { 0 };
        2 * c_in
            + Conv2d::param_count(c_in, c_out, 3)
            + Linear::param_count(emb, c_out)
            + 2 * c_out
            + Conv2d::param_count(c_out, c_out, 3)
            + skip
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let e = self.emb.forward(emb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&e)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        match &self.skip {
            Some(s) => s.forward(x)? + h,
            None => x + h,
        }
    }
}

/// Preconditioned residual encoder-decoder:
/// `D(x; σ) = c_skip x + c_out F(c_in x, cond; c_noise)`.
pub struct ConvDenoiser {
    config: ConvDenoiserConfig,
    store: ParamStore,
    embed: Linear,
    conv_in: Conv2d,
    down: Vec<Vec<ResBlock>>,
    up: Vec<Vec<ResBlock>>,
    norm_out: candle_nn::GroupNorm,
    conv_out: Conv2d,
    raw_zero: bool,
}

impl std::fmt::Debug for ConvDenoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConvDenoiser")
            .field("config", &self.config)
            .field("params", &self.store.count())
            .finish()
    }
}

impl ConvDenoiser {
    pub fn build(config: &ConvDenoiserConfig, dtype: DType, seed: u64) -> Result<Self> {
        let p = config.problems();
        if !p.is_empty() {
            return Err(Error::Config(p));
        }
        let mut store = ParamStore::new(dtype, seed);
        let e = config.embedding_dim();
        let g = config.max_groups;
        let widths = config.widths();
        let embed = Linear::new(&mut store, "embed", 2 * config.embedding_frequencies, e)?;
        let conv_in = Conv2d::new(&mut store, "conv_in", config.channels + config.cond_channels, widths[0], 3)?;
        let mut down = Vec::new();
        let mut prev = widths[0];
        for (l, &w) in widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_level {
                blocks.push(ResBlock::new(&mut store, &format!("down{l}.{b}"), prev, w, e, g)?);
                prev = w;
            }
            down.push(blocks);
        }
        let mut up = Vec::new();
        for l in (0..widths.len() - 1).rev() {
            let mut blocks = Vec::new();
            let mut c_in = prev + widths[l];
            for b in 0..config.blocks_per_level {
                blocks.push(ResBlock::new(&mut store, &format!("up{l}.{b}"), c_in, widths[l], e, g)?);
                c_in = widths[l];
            }
            prev = widths[l];
            up.push(blocks);
        }
        let norm_out = group_norm(&mut store, "norm_out", prev, g)?;
        let conv_out = Conv2d::new(&mut store, "conv_out", prev, config.channels, 3)?;
        Ok(Self {
            config: config.clone(),
            store,
            embed,
            conv_in,
            down,
            up,
            norm_out,
            conv_out,
            raw_zero: false,
        })
    }

    pub fn config(&self) -> &ConvDenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Replaces the raw network output with zeros (so `D = c_skip x`).
    pub fn with_zero_network(mut self) -> Self {
        self.raw_zero = true;
        self
    }

    fn check_input(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.channels {
            return Err(Error::shape(self.config.channels, c));
        }
        let d = self.config.divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::GridSize(format!("{h}x{w} is not divisible by {d}")));
        }
        match (cond, self.config.cond_channels) {
            (None, 0) => Ok(()),
            (Some(t), k) if k > 0 => {
                let (_, ck, hk, wk) = t.dims4()?;
                if (ck, hk, wk) != (k, h, w) {
                    return Err(Error::shape((k, h, w), (ck, hk, wk)));
                }
                Ok(())
            }
            (_, k) => Err(Error::shape(format!("{k} condition channels"), cond.map(|t| t.dims().to_vec()))),
        }
    }

    /// Raw network `F(input; c_noise)`.
    fn raw(&self, input: &Tensor, c_noise: &[f64]) -> Result<Tensor> {
        let emb = fourier_features(c_noise, self.config.embedding_frequencies, self.dtype())?;
        let emb = self.embed.forward(&emb)?.silu()?;
        let mut h = self.conv_in.forward(input)?;
        let mut skips = Vec::new();
        let levels = self.down.len();
        for (l, blocks) in self.down.iter().enumerate() {
            for b in blocks {
                h = b.forward(&h, &emb)?;
            }
            if l + 1 < levels {
                skips.push(h.clone());
                h = h.avg_pool2d(2)?;
            }
        }
        for blocks in &self.up {
            let skip = skips.pop().expect("one skip per decoder level");
            h = Tensor::cat(&[&upsample_nearest2(&h)?, &skip], 1)?;
            for b in blocks {
                h = b.forward(&h, &emb)?;
            }
        }
        Ok(self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?)
    }

    /// Preconditioned `D` with one noise level per batch member.
    pub fn forward(&self, x: &Tensor, cond: Option<&Tensor>, sigmas: &[f64]) -> Result<Tensor> {
        self.check_input(x, cond)?;
        let b = x.dims4()?.0;
        if sigmas.len() != b {
            return Err(Error::shape(b, sigmas.len()));
        }
        let coeffs = sigmas
            .iter()
            .map(|s| precondition_coeffs(*s, self.config.sigma_data))
            .collect::<Result<Vec<_>>>()?;
        let col = |f: fn(&crate::edm::PreconditionCoeffs) -> f64| -> Result<Tensor> {
            per_sample(&coeffs.iter().map(f).collect::<Vec<_>>(), self.dtype())
        };
        let c_skip = col(|c| c.c_skip)?;
        let c_out = col(|c| c.c_out)?;
        let c_in = col(|c| c.c_in)?;
        let skip = x.broadcast_mul(&c_skip)?;
        if self.raw_zero {
            return Ok(skip);
        }
        let scaled = x.broadcast_mul(&c_in)?;
        let input = match cond {
            Some(c) => Tensor::cat(&[&scaled, c], 1)?,
            None => scaled,
        };
        let c_noise: Vec<f64> = coeffs.iter().map(|c| c.c_noise).collect();
        let f = self.raw(&input, &c_noise)?;
        Ok((skip + f.broadcast_mul(&c_out)?)?)
    }

    /// Weighted denoising loss `mean_b λ(σ_b) mean((D(x0 + σ_b n) − x0)²)`.
    pub fn loss(&self, x0: &Tensor, cond: Option<&Tensor>, sigmas: &[f64], noise: &Tensor) -> Result<Tensor> {
        let sig = per_sample(sigmas, self.dtype())?;
        let noisy = (x0 + noise.broadcast_mul(&sig)?)?;
        let d = self.forward(&noisy, cond, sigmas)?;
        let err = mean_per_sample(&(d - x0)?.sqr()?)?;
        let lambda: Vec<f64> = sigmas.iter().map(|s| loss_weight(*s, self.config.sigma_data)).collect();
        let lambda = Tensor::from_vec(lambda, sigmas.len(), x0.device())?.to_dtype(self.dtype())?;
        Ok((err * lambda)?.mean(D::Minus1)?)
    }

    /// Evaluates `D` on ndarray input at a shared σ.
    pub fn denoise_with(&self, x: &Array4<f64>, cond: Option<&Array4<f64>>, sigma: f64) -> Result<Array4<f64>> {
        if sigma == 0.0 {
            return Ok(x.clone());
        }
        let xt = to_tensor(x, self.dtype())?;
        let ct = match cond {
            Some(c) => Some(to_tensor(&broadcast_cond(c, x.dim().0)?, self.dtype())?),
            None => None,
        };
        let d = self.forward(&xt, ct.as_ref(), &vec![sigma; x.dim().0])?;
        from_tensor(&d.detach())
    }

    fn pullback_with<'a>(
        &'a self,
        x: &Array4<f64>,
        cond: Option<&Array4<f64>>,
        sigma: f64,
    ) -> Result<(Array4<f64>, Pullback<'a>)> {
        if sigma == 0.0 {
            return Ok((x.clone(), Box::new(|g: &Array4<f64>| Ok(g.clone()))));
        }
        let var = Var::from_tensor(&to_tensor(x, self.dtype())?)?;
        let ct = match cond {
            Some(c) => Some(to_tensor(&broadcast_cond(c, x.dim().0)?, self.dtype())?),
            None => None,
        };
        let d = self.forward(var.as_tensor(), ct.as_ref(), &vec![sigma; x.dim().0])?;
        let out = from_tensor(&d.detach())?;
        let dtype = self.dtype();
        let dim = x.dim();
        let pullback: Pullback<'a> = Box::new(move |g: &Array4<f64>| {
            if g.dim() != dim {
                return Err(Error::shape(dim, g.dim()));
            }
            let gt = to_tensor(g, dtype)?;
            let grads = (d * gt)?.sum_all()?.backward()?;
            match grads.get(var.as_tensor()) {
                Some(t) => from_tensor(t),
                None => Ok(Array4::zeros(dim)),
            }
        });
        Ok((out, pullback))
    }
}

fn broadcast_cond(c: &Array4<f64>, b: usize) -> Result<Array4<f64>> {
    match c.dim().0 {
        n if n == b => Ok(c.clone()),
        1 => {
            let (_, k, h, w) = c.dim();
            Ok(c.broadcast((b, k, h, w)).expect("broadcast over batch").to_owned())
        }
        n => Err(Error::shape(b, n)),
    }
}

impl Denoiser for ConvDenoiser {
    fn channels(&self) -> usize {
        self.config.channels
    }

    fn denoise(&self, x: &Array4<f64>, sigma: f64) -> Result<Array4<f64>> {
        self.denoise_with(x, None, sigma)
    }

    fn denoise_with_pullback(&self, x: &Array4<f64>, sigma: f64) -> Result<(Array4<f64>, Pullback<'_>)> {
        self.pullback_with(x, None, sigma)
    }
}

/// A conditional denoiser with its condition channels fixed, so it can be
/// driven by the ordinary sampler. `cond` has batch size 1 or B.
#[derive(Debug)]
pub struct Conditioned<'a> {
    pub net: &'a ConvDenoiser,
    pub cond: Array4<f64>,
}

impl Denoiser for Conditioned<'_> {
    fn channels(&self) -> usize {
        self.net.config.channels
    }

    fn denoise(&self, x: &Array4<f64>, sigma: f64) -> Result<Array4<f64>> {
        self.net.denoise_with(x, Some(&self.cond), sigma)
    }

    fn denoise_with_pullback(&self, x: &Array4<f64>, sigma: f64) -> Result<(Array4<f64>, Pullback<'_>)> {
        self.net.pullback_with(x, Some(&self.cond), sigma)
    }
}

/// What the denoiser sees besides the noisy field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditioningMode {
    /// Learned prior only.
    #[default]
    None,
    /// Bicubic-upsampled coarse fields of every channel plus static forcing.
    Full,
    /// Bicubic upsampling of one coarse channel.
    SingleChannel { channel: usize },
}

impl ConditioningMode {
    pub fn cond_channels(&self, channels: usize) -> usize {
        match self {
            Self::None => 0,
            Self::Full => channels + 1,
            Self::SingleChannel { .. } => 1,
        }
    }

    /// Names of the channels appended after the noisy field.
    pub fn layout(&self, names: &[String]) -> Vec<String> {
        match self {
            Self::None => Vec::new(),
            Self::Full => names
                .iter()
                .map(|n| format!("bicubic({n})"))
                .chain(std::iter::once("forcing".to_string()))
                .collect(),
            Self::SingleChannel { channel } => vec![format!("bicubic({})", names[*channel])],
        }
    }

    /// Builds the condition channels `(B, C_cond, H, W)` from coarse inputs
    /// `(B, C, h, w)` and the static forcing.
    pub fn condition(
        &self,
        coarse: &Array4<f64>,
        forcing: Option<&Array2<f64>>,
        pair: &ResamplePair,
    ) -> Result<Array4<f64>> {
        let (b, c, _, _) = coarse.dim();
        let (h, w) = pair.fine.shape();
        let upsample = |i: usize, k: usize| pair.bicubic_upsample(&coarse.slice(s![i, k, .., ..]));
        match self {
            Self::None => Ok(Array4::zeros((b, 0, h, w))),
            Self::Full => {
                let forcing = forcing.ok_or_else(|| Error::InvalidArgument("static forcing required".into()))?;
                if forcing.dim() != (h, w) {
                    return Err(Error::shape((h, w), forcing.dim()));
                }
                let mut out = Array4::zeros((b, c + 1, h, w));
                for i in 0..b {
                    for k in 0..c {
                        out.slice_mut(s![i, k, .., ..]).assign(&upsample(i, k)?);
                    }
                    out.slice_mut(s![i, c, .., ..]).assign(forcing);
                }
                Ok(out)
            }
            Self::SingleChannel { channel } => {
                if *channel >= c {
                    return Err(Error::shape(format!("channel < {c}"), channel));
                }
                let mut out = Array4::zeros((b, 1, h, w));
                for i in 0..b {
                    out.slice_mut(s![i, 0, .., ..]).assign(&upsample(i, *channel)?);
                }
                Ok(out)
            }
        }
    }
}

/// `[x_noisy (C) | bicubic(coarse_y) (C) | forcing (1)]`.
pub fn conditional_input(
    x_noisy: &Array4<f64>,
    coarse_y: &Array4<f64>,
    forcing: &Array2<f64>,
    pair: &ResamplePair,
) -> Result<Array4<f64>> {
    let (b, c, h, w) = x_noisy.dim();
    if coarse_y.dim().0 != b || coarse_y.dim().1 != c {
        return Err(Error::shape((b, c), (coarse_y.dim().0, coarse_y.dim().1)));
    }
    if (h, w) != pair.fine.shape() {
        return Err(Error::shape(pair.fine.shape(), (h, w)));
    }
    let cond = ConditioningMode::Full.condition(coarse_y, Some(forcing), pair)?;
    let mut out = Array4::zeros((b, 2 * c + 1, h, w));
    out.slice_mut(s![.., 0..c, .., ..]).assign(x_noisy);
    out.slice_mut(s![.., c.., .., ..]).assign(&cond);
    Ok(out)
}

/// Normalized training targets and, for conditional models, their aligned
/// condition channels.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub targets: Array4<f64>,
    pub cond: Option<Array4<f64>>,
}

impl TrainingData {
    pub fn new(targets: Array4<f64>, cond: Option<Array4<f64>>) -> Result<Self> {
        if let Some(c) = &cond {
            let (n, _, h, w) = targets.dim();
            let (nc, _, hc, wc) = c.dim();
            if (n, h, w) != (nc, hc, wc) {
                return Err(Error::shape((n, h, w), (nc, hc, wc)));
            }
        }
        if targets.dim().0 == 0 {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        Ok(Self { targets, cond })
    }

    pub fn len(&self) -> usize {
        self.targets.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(a: &Array4<f64>, idx: &[usize]) -> Array4<f64> {
        let (_, c, h, w) = a.dim();
        let mut out = Array4::zeros((idx.len(), c, h, w));
        for (o, &i) in idx.iter().enumerate() {
            out.slice_mut(s![o, .., .., ..]).assign(&a.slice(s![i, .., .., ..]));
        }
        out
    }
}

/// Trains with the weighted denoising loss. Batches, noise levels and noise
/// are drawn from streams derived from `seed` and the step index.
pub fn train_denoiser(
    net: &ConvDenoiser,
    data: &TrainingData,
    schedule: &NoiseSchedule,
    optim: &OptimConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    schedule.validate()?;
    if data.cond.is_some() != (net.config.cond_channels > 0) {
        return Err(Error::InvalidArgument(format!(
            "denoiser expects {} condition channels",
            net.config.cond_channels
        )));
    }
    let (_, c, h, w) = data.targets.dim();
    if c != net.config.channels {
        return Err(Error::shape(net.config.channels, c));
    }
    let bsz = optim.batch_size;
    train_loop(&net.store, optim, |step| {
        let stream = derive_seed(seed, step as u64);
        let mut r = rng(derive_seed(stream, 0));
        let idx: Vec<usize> = (0..bsz).map(|_| r.random_range(0..data.len())).collect();
        let sigmas = sample_training_sigmas(schedule, derive_seed(stream, 1), bsz);
        let noise = Array4::from_shape_vec((bsz, c, h, w), normals(derive_seed(stream, 2), bsz * c * h * w))
            .expect("noise shape");
        let x0 = to_tensor(&TrainingData::gather(&data.targets, &idx), net.dtype())?;
        let cond = match &data.cond {
            Some(cd) => Some(to_tensor(&TrainingData::gather(cd, &idx), net.dtype())?),
            None => None,
        };
        net.loss(&x0, cond.as_ref(), &sigmas, &to_tensor(&noise, net.dtype())?)
    })
}

//! Trains a small conditional denoiser on random-field pairs and compares
//! its σ = 1 reconstruction error with an unconditional one.

use candle_core::DType;
use edm_downscale::denoisers::{
    train_denoiser, Conditioned, ConditioningMode, ConvDenoiser, ConvDenoiserConfig, Denoiser, TrainingData,
};
use edm_downscale::edm::{add_noise, NoiseSchedule};
use edm_downscale::nn::OptimConfig;
use edm_downscale::synthdata::{build_pairs, generate_grf, static_forcing, ForcingSpec, SpectrumSpec};
use edm_downscale::ResamplePair;
use ndarray::s;

fn main() -> edm_downscale::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let pair = ResamplePair::new(16, 32, 2)?;
    let spec = SpectrumSpec {
        slope: 2.0,
        k_min: 1,
        k_max: 16,
        amplitude: 1.0,
    };
    let (coarse, fine) = build_pairs(&generate_grf(&pair.fine, &spec, 1, 160)?, &pair)?;
    let forcing = static_forcing(&pair.fine, &ForcingSpec::default())?;
    let cond = ConditioningMode::Full.condition(&coarse.data, Some(&forcing), &pair)?;
    let (train, test) = (s![..128, .., .., ..], s![128.., .., .., ..]);

    let schedule = NoiseSchedule::default();
    let optim = OptimConfig {
        steps,
        batch_size: 8,
        learning_rate: 1e-3,
        ..OptimConfig::default()
    };
    let arch = ConvDenoiserConfig {
        base_width: 8,
        multipliers: vec![1, 2],
        max_groups: 4,
        ..ConvDenoiserConfig::default()
    };
    let cond_net = ConvDenoiser::build(&ConvDenoiserConfig { cond_channels: 2, ..arch.clone() }, DType::F32, 1)?;
    let plain_net = ConvDenoiser::build(&arch, DType::F32, 2)?;

    let data = TrainingData::new(fine.data.slice(train).to_owned(), Some(cond.slice(train).to_owned()))?;
    let lc = train_denoiser(&cond_net, &data, &schedule, &optim, 3)?;
    let lp = train_denoiser(&plain_net, &TrainingData::new(data.targets.clone(), None)?, &schedule, &optim, 3)?;
    let avg = |l: &[f64]| l.iter().sum::<f64>() / l.len() as f64;
    let w = 50.min(steps);
    println!("conditional loss   first {:.3} last {:.3}", avg(&lc[..w]), avg(&lc[steps - w..]));
    println!("unconditional loss first {:.3} last {:.3}", avg(&lp[..w]), avg(&lp[steps - w..]));

    let x0 = fine.data.slice(test).to_owned();
    let noisy = add_noise(&x0, 1.0, 9)?;
    let c = Conditioned {
        net: &cond_net,
        cond: cond.slice(test).to_owned(),
    };
    let mse = |d: ndarray::Array4<f64>| (&d - &x0).mapv(|v| v * v).mean().unwrap();
    println!("held-out mse at sigma=1: conditional {:.4} unconditional {:.4}", mse(c.denoise(&noisy, 1.0)?), mse(plain_net.denoise(&noisy, 1.0)?));
    Ok(())
}

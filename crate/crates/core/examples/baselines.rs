//! Bicubic interpolation and the residual regression network as
//! deterministic super-resolution baselines.

use candle_core::DType;
use edm_downscale::baselines::{bicubic_sr, train_regressor, RegressionData, Regressor, RegressorConfig};
use edm_downscale::diagnostics::{weighted_rmse_per_timestep, zonal_spectrum};
use edm_downscale::nn::OptimConfig;
use edm_downscale::synthdata::{
    build_pairs, generate_climate, map_slices, static_forcing, ChannelSpec, ForcingSpec, SpectrumSpec,
};
use edm_downscale::ResamplePair;

fn main() -> edm_downscale::Result<()> {
    let pair = ResamplePair::new(16, 32, 2)?;
    let forcing = static_forcing(&pair.fine, &ForcingSpec::default())?;
    let channel = ChannelSpec {
        name: "temperature".into(),
        units: "K".into(),
        spectrum: SpectrumSpec {
            slope: 2.0,
            k_min: 1,
            k_max: 16,
            amplitude: 1.0,
        },
        background: 0.0,
        forcing_coupling: 1.0,
        precip_threshold: None,
    };
    let fine = generate_climate(&pair.fine, &[channel], &forcing, 4, 160)?;
    let (coarse, fine) = build_pairs(&fine, &pair)?;
    let train: Vec<usize> = (0..128).collect();
    let test: Vec<usize> = (128..160).collect();

    let bicubic = bicubic_sr(&coarse, &pair)?;
    let net = Regressor::build(
        &RegressorConfig {
            base_width: 8,
            depth: 2,
            max_groups: 4,
            ..RegressorConfig::default()
        },
        DType::F32,
        1,
    )?;
    let data = RegressionData {
        upsampled: bicubic.select_times(&train).data,
        targets: fine.select_times(&train).data,
        forcing: forcing.clone(),
    };
    let optim = OptimConfig {
        steps: 300,
        learning_rate: 1e-3,
        ..OptimConfig::default()
    };
    let losses = train_regressor(&net, &data, &optim, 2)?;
    println!("L1 loss {:.3} -> {:.3}", losses[0], losses[losses.len() - 1]);

    let coarse_test = coarse.select_times(&test);
    let up = map_slices(&coarse_test, &pair.fine, |v| pair.bicubic_upsample(&v))?;
    let reg = up.with_data(net.predict(&up.data, &forcing)?)?;
    let truth = fine.select_times(&test);
    let high = |f: &edm_downscale::FieldSet| zonal_spectrum(f).map(|s| s[0].band_power(8));
    let th = high(&truth)?;
    for (name, pred) in [("bicubic", &up), ("regressor", &reg)] {
        println!(
            "{name:<10} rmse {:.4}  high-band power ratio {:.3}",
            weighted_rmse_per_timestep(pred, &truth)?[0],
            high(pred)? / th
        );
    }
    Ok(())
}

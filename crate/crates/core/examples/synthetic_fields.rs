//! Power-law random fields, a two-channel synthetic climate with a
//! precipitation-like channel, normalization and the imperfect-input
//! perturbation.

use edm_downscale::diagnostics::zonal_spectrum;
use edm_downscale::grid::Grid;
use edm_downscale::synthdata::{
    build_pairs, generate_climate, generate_grf, perturb_imperfect, static_forcing, ChannelSpec, Damping,
    ForcingSpec, NormStats, Perturbation, SpectrumSpec,
};
use edm_downscale::ResamplePair;

fn main() -> edm_downscale::Result<()> {
    let grid = Grid::latlon(32, 64)?;
    let spec = SpectrumSpec {
        slope: 3.0,
        k_min: 1,
        k_max: 16,
        amplitude: 1.0,
    };
    let grf = generate_grf(&grid, &spec, 1, 64)?;
    let s = &zonal_spectrum(&grf)?[0];
    // zonal slices of an isotropic k^-3 field fall off roughly as k^-2
    let (k1, k2) = (2, 8);
    let slope = (s.power[k2] / s.power[k1]).ln() / (k2 as f64 / k1 as f64).ln();
    println!("zonal spectral slope between k={k1} and k={k2}: {slope:.2}");

    let pair = ResamplePair::new(32, 64, 2)?;
    let forcing = static_forcing(&pair.fine, &ForcingSpec::default())?;
    let channels = vec![
        ChannelSpec {
            name: "temperature".into(),
            units: "K".into(),
            spectrum: spec,
            background: 10.0,
            forcing_coupling: 1.5,
            precip_threshold: None,
        },
        ChannelSpec {
            name: "precipitation".into(),
            units: "mm/day".into(),
            spectrum: SpectrumSpec { slope: 2.0, k_max: 32, ..spec },
            background: 0.3,
            forcing_coupling: 0.3,
            precip_threshold: Some(0.5),
        },
    ];
    let fine = generate_climate(&pair.fine, &channels, &forcing, 2, 32)?;
    let (coarse, fine) = build_pairs(&fine, &pair)?;
    let zeros = fine.data.index_axis(ndarray::Axis(1), 1).iter().filter(|v| **v == 0.0).count();
    println!(
        "precipitation dry fraction {:.2}",
        zeros as f64 / (fine.n_time() * pair.fine.n_lat * pair.fine.n_lon) as f64
    );

    let stats = NormStats::fit(&fine, 0.01)?;
    println!("norm stats: mean {:?} std {:?} eps {:?}", stats.mean, stats.std, stats.log_offset);
    let back = stats.denormalize(&stats.normalize(&fine)?)?;
    let max_err = (&back.data - &fine.data).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("normalize round trip max abs error {max_err:.2e}");

    let p = Perturbation {
        damping: Damping::Step { k0: 4.0, factor: 0.5 },
        bias: 0.2,
        noise_std: 0.05,
    };
    let perturbed = perturb_imperfect(&coarse.channel(0), &p, 3)?;
    let before = zonal_spectrum(&coarse.channel(0))?[0].band_power(6);
    let after = zonal_spectrum(&perturbed)?[0].band_power(6);
    println!("coarse power above k=6 before {before:.4} after {after:.4}");
    Ok(())
}

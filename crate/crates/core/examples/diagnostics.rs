//! Climatological diagnostics on a synthetic field and a smoothed copy:
//! RMSE, temporal STD, zonal spectra, PDFs, EOFs and a regional crop.

use edm_downscale::diagnostics::{
    eof, pdf, pdf_range, region_crop, temporal_std, weighted_rmse, zonal_climatology, zonal_spectrum, MetricsReport,
};
use edm_downscale::synthdata::{build_pairs, generate_grf, map_slices, SpectrumSpec};
use edm_downscale::ResamplePair;

fn main() -> edm_downscale::Result<()> {
    let pair = ResamplePair::new(32, 64, 4)?;
    let spec = SpectrumSpec {
        slope: 2.5,
        k_min: 1,
        k_max: 32,
        amplitude: 1.0,
    };
    let (coarse, truth) = build_pairs(&generate_grf(&pair.fine, &spec, 7, 96)?, &pair)?;
    let smooth = map_slices(&coarse, &pair.fine, |v| pair.bicubic_upsample(&v))?;

    println!("rmse of time means {:.4}", weighted_rmse(&smooth, &truth)?[0]);
    println!("temporal std truth {:.4} smooth {:.4}", temporal_std(&truth)?[0], temporal_std(&smooth)?[0]);
    println!("zonal-mean profile (truth) {:.3?}", zonal_climatology(&truth)?.row(0).to_vec());

    let (st, ss) = (&zonal_spectrum(&truth)?[0], &zonal_spectrum(&smooth)?[0]);
    println!("k   truth     smooth");
    for k in [1, 2, 4, 8, 16, 32] {
        println!("{k:<3} {:.2e}  {:.2e}", st.power[k], ss.power[k]);
    }

    let range = pdf_range(&truth, 0)?;
    let (pt, ps) = (pdf(&truth, 0, 40, range)?, pdf(&smooth, 0, 40, range)?);
    println!("99.9% quantile truth {:.3} smooth {:.3}", pt.q_high, ps.q_high);

    let e = eof(&truth, 0, 3)?;
    println!("leading EOF explained variance {:.3?}", e.explained);

    let box_ = region_crop(&truth, (20.0, 60.0), (230.0, 300.0))?;
    println!("crop {:?} periodic {}", box_.grid.shape(), box_.grid.lon_periodic);

    let mut report = MetricsReport::new("example", 0);
    report.add_model("bicubic", &smooth, &truth, 8)?;
    report.add_model("truth", &truth, &truth, 8)?;
    report.rank();
    for r in &report.rows {
        println!("{:<8} {:<22} {:.4} {:?}", r.model, r.metric, r.value, r.rank);
    }
    Ok(())
}

//! Block-mean coarsening, its adjoint, and bicubic upsampling on a smooth
//! test field.

use edm_downscale::grid::weighted_mean;
use edm_downscale::ResamplePair;
use ndarray::Array2;

fn main() -> edm_downscale::Result<()> {
    let pair = ResamplePair::new(32, 64, 4)?;
    let g = &pair.fine;
    let field = Array2::from_shape_fn(g.shape(), |(i, j)| {
        let lat = g.lat_centers[i].to_radians();
        let lon = g.lon_centers[j].to_radians();
        15.0 * lat.cos() + 2.0 * (3.0 * lon).sin() * (2.0 * lat).cos()
    });

    let coarse = pair.coarsen(&field.view())?;
    println!("fine {:?} -> coarse {:?}", g.shape(), pair.coarse.shape());
    println!(
        "area mean  fine {:.6}  coarse {:.6}",
        weighted_mean(&field.view(), g)?,
        weighted_mean(&coarse.view(), &pair.coarse)?
    );

    let up = pair.bicubic_upsample(&coarse.view())?;
    let err = &up - &field;
    let rms = weighted_mean(&err.mapv(|v| v * v).view(), g)?.sqrt();
    println!("bicubic reconstruction rms error {rms:.4}");

    // transpose check under the plain dot product
    let y = Array2::from_shape_fn(pair.coarse.shape(), |(i, j)| (i as f64 - j as f64 * 0.5).sin());
    let lhs = (&coarse * &y).sum();
    let rhs = (&field * &pair.coarsen_adjoint(&y.view())?).sum();
    println!("<Mx, y> = {lhs:.10}   <x, M'y> = {rhs:.10}");
    Ok(())
}

//! Real-input transforms of a small 2-D field: half-spectrum layout, the
//! dominant bins, the round trip and energy conservation.

use std::f64::consts::PI;

use weatherformer::spectral::{irdft, rdft, self_conjugate};
use weatherformer::Field;

fn main() -> weatherformer::Result<()> {
    let (h, w) = (6, 10);
    let f = Field::from_fn(&[h, w], |i| {
        let (y, x) = (i[0] as f64, i[1] as f64);
        2.0 * (2.0 * PI * 3.0 * x / w as f64).cos() + (2.0 * PI * y / h as f64).sin() + 0.5
    });
    let spec = rdft(&f, &[0, 1])?;
    let half = spec.shape()[1];
    println!("field {:?} -> half spectrum {:?}", f.shape(), spec.shape());

    let mut bins: Vec<(usize, usize, f64)> =
        (0..spec.len()).map(|k| (k / half, k % half, spec.at(k).norm())).collect();
    bins.sort_by(|a, b| b.2.total_cmp(&a.2));
    for (ky, kx, mag) in bins.iter().take(4) {
        println!("  bin ({ky}, {kx})  |F| = {mag:.3}");
    }

    let back = irdft(&spec, &[0, 1], &[h, w])?;
    println!("round trip max abs error {:.2e}", back.max_abs_diff(&f));

    // Bins off the self-conjugate columns stand in for their mirror image too.
    let spectral: f64 = (0..spec.len())
        .map(|k| {
            let m = if self_conjugate(k % half, w) { 1.0 } else { 2.0 };
            m * spec.at(k).norm_sqr()
        })
        .sum::<f64>()
        / (h * w) as f64;
    let direct: f64 = f.data().iter().map(|v| v * v).sum();
    println!("energy {direct:.9} vs spectrum {spectral:.9}");
    Ok(())
}

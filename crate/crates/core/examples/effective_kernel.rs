//! Builds a smooth low-pass `lambda`, turns it into its effective spatial
//! kernel and confirms that a linear PAFNO mixer is exactly circular
//! convolution with that kernel. Pass `--csv` to print the kernel table.

use rand::Rng;
use weatherformer::pafno::{bin_shape, effective_kernel, kernel_csv, mix};
use weatherformer::rng::{stream, Stream};
use weatherformer::spectral::circular_convolve_oracle;
use weatherformer::{Field, MixerConfig, MixerDomain, MixerMode, Nonlinearity, SpectralFilter};

fn main() -> weatherformer::Result<()> {
    let grid = [8, 12];
    let cfg = MixerConfig {
        domain: MixerDomain::Spatial,
        embed_dim: 4,
        blocks: 1,
        mode: MixerMode::Pafno,
        nonlinearity: Nonlinearity::Identity,
    };
    let mut filter = SpectralFilter::identity(&cfg, &grid)?;
    let bins = bin_shape(&grid);
    filter.lambda = Some(Field::from_fn(&bins, |i| {
        let ky = if 2 * i[0] <= grid[0] { i[0] as f64 } else { i[0] as f64 - grid[0] as f64 };
        let kx = i[1] as f64;
        (-(ky * ky + kx * kx) / 8.0).exp()
    }));
    let kernel = effective_kernel(filter.lambda.as_ref().unwrap(), &grid)?;

    println!("kernel around the pivot token (rows -2..=2, cols -3..=3):");
    for dy in -2i64..=2 {
        let row: Vec<String> = (-3i64..=3)
            .map(|dx| {
                let i = dy.rem_euclid(grid[0] as i64) as usize;
                let j = dx.rem_euclid(grid[1] as i64) as usize;
                format!("{:+.4}", kernel.get(&[i, j]))
            })
            .collect();
        println!("  {}", row.join(" "));
    }

    let mut rng = stream(5, Stream::Data);
    let tokens = Field::from_fn(&[8, 12, 4], |_| rng.random_range(-1.0..1.0));
    let mixed = mix(&tokens, &filter, &cfg)?;
    let conv = circular_convolve_oracle(&tokens, &kernel, &[0, 1])?;
    println!("mixer vs direct convolution: max diff {:.2e}", mixed.max_abs_diff(&conv));

    if std::env::args().any(|a| a == "--csv") {
        print!("{}", kernel_csv(&kernel));
    }
    Ok(())
}

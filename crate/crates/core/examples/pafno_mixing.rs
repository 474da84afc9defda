//! The three spectral mixer modes on one token grid.
//!
//! Prints the scalar count of each mode, checks that identity filters pass
//! tokens through untouched and that a PAFNO filter with every coefficient
//! at one reproduces the AFNO filter drawn from the same seed.

use rand::Rng;
use weatherformer::pafno::{bin_count, mix, param_count_for};
use weatherformer::rng::{stream, Stream};
use weatherformer::{Field, MixerConfig, MixerDomain, MixerMode, Nonlinearity, SpectralFilter};

fn config(mode: MixerMode, nonlinearity: Nonlinearity) -> MixerConfig {
    MixerConfig {
        domain: MixerDomain::Spatial,
        embed_dim: 8,
        blocks: 2,
        mode,
        nonlinearity,
    }
}

fn main() -> weatherformer::Result<()> {
    let grid = [6, 8];
    let mut rng = stream(3, Stream::Data);
    let tokens = Field::from_fn(&[2, 6, 8, 8], |_| rng.random_range(-1.0..1.0));
    println!("token grid {grid:?}, {} retained bins", bin_count(&grid));

    for mode in [MixerMode::Afno, MixerMode::Pafno, MixerMode::Fno] {
        let cfg = config(mode, Nonlinearity::Identity);
        let id = SpectralFilter::identity(&cfg, &grid)?;
        let out = mix(&tokens, &id, &cfg)?;
        println!(
            "{mode:?}: {:>5} scalars, identity filter error {:.1e}",
            param_count_for(&cfg, &grid),
            out.max_abs_diff(&tokens)
        );
    }

    let afno_cfg = config(MixerMode::Afno, Nonlinearity::ReluSplit);
    let pafno_cfg = config(MixerMode::Pafno, Nonlinearity::ReluSplit);
    let afno = SpectralFilter::init(&afno_cfg, &grid, 0.3, &mut stream(1, Stream::Init))?;
    let mut pafno = SpectralFilter::init(&pafno_cfg, &grid, 0.3, &mut stream(1, Stream::Init))?;
    let a = mix(&tokens, &afno, &afno_cfg)?;
    let p = mix(&tokens, &pafno, &pafno_cfg)?;
    println!("PAFNO(lambda = 1) vs AFNO: max diff {:.1e}", p.max_abs_diff(&a));

    // Damp the high latitudinal wavenumbers and the filters part ways.
    let lambda = pafno.lambda.as_mut().expect("PAFNO carries lambda");
    let cols = lambda.shape()[1];
    for (k, v) in lambda.data_mut().iter_mut().enumerate() {
        if k / cols >= 2 {
            *v = 0.25;
        }
    }
    let p = mix(&tokens, &pafno, &pafno_cfg)?;
    println!("after damping: max diff {:.3}", p.max_abs_diff(&a));
    Ok(())
}

//! One forward pass of the toy forecaster, stage by stage.

use std::collections::BTreeMap;

use rand::Rng;
use weatherformer::model::{decode, forward, sf_block, tokenize};
use weatherformer::rng::{stream, Stream};
use weatherformer::{Field, ModelConfig, ModelParams};

fn main() -> weatherformer::Result<()> {
    let cfg = ModelConfig::toy(16, 32, 32);
    let params = ModelParams::init(&cfg, &mut stream(0, Stream::Init))?;

    let mut per_group: BTreeMap<&str, usize> = BTreeMap::new();
    for e in params.layout().entries() {
        *per_group.entry(e.group.name()).or_default() += e.len();
    }
    println!("{} parameters (closed form {})", params.len(), cfg.param_count());
    for (g, n) in &per_group {
        println!("  {g:<13} {n:>7}");
    }

    let mut rng = stream(0, Stream::Data);
    let x = Field::from_fn(&[cfg.input_steps, cfg.height, cfg.width, cfg.channels()], |_| {
        rng.random_range(-1.0..1.0)
    });
    let mut z = tokenize(&x, &params)?;
    println!("input  {:?}", x.shape());
    println!("tokens {:?}", z.shape());
    for b in 0..cfg.layers {
        z = sf_block(&z, &params, b)?;
        println!("block {b} {:?}", z.shape());
    }
    let y = decode(&z, &params)?;
    println!("output {:?}", y.shape());
    let direct = forward(&x, &params)?;
    println!("staged vs fused forward: max diff {:.1e}", y.max_abs_diff(&direct));
    Ok(())
}

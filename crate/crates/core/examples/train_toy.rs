//! Trains the reference toy model on a generated advection dataset and
//! prints the loss curve.

use std::time::Instant;

use weatherformer::data::{generate, GenConfig, Split};
use weatherformer::train::{persistence_loss, train, LossKind, TrainConfig};

fn main() -> weatherformer::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let bundle = generate(&GenConfig::default())?;
    let cfg = TrainConfig {
        epochs,
        seed: 1,
        ..TrainConfig::default()
    };
    let persist = persistence_loss(&bundle.normalized()?, cfg.model.input_steps, Split::Val, LossKind::LatWeighted)?;
    println!("persistence val loss {persist:.5}");
    let start = Instant::now();
    let out = train(&bundle, &cfg, |r| {
        println!(
            "epoch {:>3}  train {:.5}  val {:.5}  lr {:.2e}  ({:.1}s)",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.lr,
            start.elapsed().as_secs_f64()
        )
    })?;
    println!("{} parameters", out.params.len());
    Ok(())
}

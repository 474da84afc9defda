//! Scores a hand-wired forecaster against the two baselines.
//!
//! With zero damping and a uniform speed of one column per step the
//! generator is an exact shift, so the oracle checkpoint that rolls the
//! last frame by one column is perfect at every lead.

use weatherformer::data::{generate, GenConfig, SpeedProfile};
use weatherformer::eval::{evaluate, rollout, EvalOptions};
use weatherformer::model::Patch;
use weatherformer::{ModelConfig, ModelParams};

fn main() -> weatherformer::Result<()> {
    let bundle = generate(&GenConfig {
        height: 6,
        width: 16,
        steps: 80,
        speed: SpeedProfile::Uniform { speed: 1.0 },
        diffusion: vec![0.0],
        ..GenConfig::default()
    })?;
    let mut cfg = ModelConfig::toy(6, 16, 3);
    cfg.patch = Patch::new(1, 1, 1);
    cfg.layers = 0;
    cfg.spatial.blocks = 1;
    cfg.temporal = None;

    for shift in [1, 0] {
        let oracle = ModelParams::shift_oracle(&cfg, shift)?;
        let report = evaluate(&oracle, &bundle, EvalOptions::default())?;
        println!("shift {shift}: {} init times", report.init_times);
        print!("{}", report.to_table());
    }

    let oracle = ModelParams::shift_oracle(&cfg, 1)?;
    let x0 = bundle.normalized()?.window(0, cfg.input_steps)?.x;
    let series = rollout(&x0, &oracle, 3)?;
    let shapes: Vec<_> = series.leads.iter().map(|f| f.shape().to_vec()).collect();
    println!("rollout leads {shapes:?}");
    Ok(())
}

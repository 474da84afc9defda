//! A miniature component ladder: five cumulative configurations trained on
//! the same data with the same seed and budget, scored at leads 1 to 5.

use weatherformer::cli::{ablation_ladder, fit_model_to, scores_markdown, RowScore};
use weatherformer::data::{generate, GenConfig};
use weatherformer::eval::{evaluate, EvalOptions, Source};
use weatherformer::train::{train, TrainConfig};
use weatherformer::ModelConfig;

fn main() -> weatherformer::Result<()> {
    let bundle = generate(&GenConfig {
        height: 8,
        width: 16,
        steps: 240,
        ..GenConfig::default()
    })?;
    let mut base = TrainConfig {
        model: ModelConfig::toy(8, 16, 16),
        epochs: 3,
        seed: 4,
        windows_per_epoch: Some(64),
        val_windows: Some(8),
        ..TrainConfig::default()
    };
    base.optimizer.base_lr = 2e-3;
    base.optimizer.warmup_epochs = 1.0;
    fit_model_to(&mut base.model, &bundle);

    let opts = EvalOptions {
        max_inits: Some(20),
        ..EvalOptions::default()
    };
    let mut rows = Vec::new();
    for (name, cfg) in ablation_ladder(&base) {
        let out = train(&bundle, &cfg, |_| {})?;
        let r = evaluate(&out.params, &bundle, opts)?;
        rows.push(RowScore {
            name: name.into(),
            config_hash: format!("{:08x}", weatherformer::cli::config_hash(&cfg)),
            run_dir: String::new(),
            rmse: (1..=5).map(|l| r.mean_rmse(Source::Model, l)).collect(),
            acc: (1..=5).map(|l| r.mean_acc(Source::Model, l)).collect(),
        });
        println!("{name:<9} {} params, config {}", out.params.len(), rows.last().unwrap().config_hash);
    }
    print!("{}", scores_markdown(&rows, 5));
    Ok(())
}

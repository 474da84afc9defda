//! Finite-difference check of every parameter group of a small model, then
//! the same check with a deliberately broken backward rule.

use weatherformer::autodiff::Fault;
use weatherformer::train::{gradcheck, gradcheck_fixture, GradcheckConfig};
use weatherformer::ModelConfig;

fn main() -> weatherformer::Result<()> {
    let cfg = ModelConfig::toy(8, 16, 16);
    let (params, x, ys, weights) = gradcheck_fixture(&cfg, 0)?;
    let check = GradcheckConfig::default();
    print!("{}", gradcheck(&params, &x, &ys, &weights, &check)?.to_text());

    let broken = GradcheckConfig {
        samples: 70,
        fault: Some(Fault::LambdaGradient),
        ..check
    };
    let report = gradcheck(&params, &x, &ys, &weights, &broken)?;
    let failing: Vec<&str> = report.failing_groups().iter().map(|g| g.name()).collect();
    println!("with a corrupted rule, failing groups: {failing:?}");
    Ok(())
}

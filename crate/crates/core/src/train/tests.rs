use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Fault;
use crate::data::{generate, GenConfig, SpeedProfile};
use crate::eval::rollout;
use crate::model::{ParamGroup, Patch};

fn small_bundle(h: usize, w: usize, steps: usize) -> DatasetBundle {
    generate(&GenConfig {
        height: h,
        width: w,
        steps,
        ..GenConfig::default()
    })
    .unwrap()
}

fn small_cfg(h: usize, w: usize) -> TrainConfig {
    let mut model = ModelConfig::toy(h, w, 8);
    model.spatial.blocks = 2;
    model.temporal.as_mut().unwrap().blocks = 2;
    TrainConfig {
        model,
        epochs: 2,
        batch_size: 3,
        seed: 11,
        windows_per_epoch: Some(9),
        ..TrainConfig::default()
    }
}

#[test]
fn loss_matches_direct_formula() {
    let w = lat_weights(&[0.0, 60.0]).unwrap();
    let pred = Field::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let truth = Field::new(vec![2, 2, 1], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    let want = (4.0 / 3.0 * (1.0 + 4.0) + 2.0 / 3.0 * (4.0 + 9.0)) / 4.0;
    assert!((loss(&pred, &truth, &w).unwrap() - want).abs() <= 1e-12);
    assert_eq!(loss(&pred, &pred, &w).unwrap(), 0.0);
    let u = LatWeights::uniform(2);
    let plain = (1.0 + 4.0 + 4.0 + 9.0) / 4.0;
    assert!((loss(&pred, &truth, &u).unwrap() - plain).abs() <= 1e-15);
    assert!(loss(&pred, &Field::zeros(&[2, 1, 2]), &w).is_err());

    let lw = loss_weights(LossKind::LatWeighted, &[0.0, 60.0], 2, 1).unwrap();
    let s: f64 = pred.data().iter().zip(truth.data()).zip(&lw).map(|((a, b), l)| l * (a - b) * (a - b)).sum();
    assert!((s - want).abs() <= 1e-12);
}

#[test]
fn linear_regression_gradient_is_closed_form() {
    let (n, k, m) = (7, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Field::from_fn(&[n, k], |_| rng.random_range(-1.0..1.0));
    let wv = Field::from_fn(&[k, m], |_| rng.random_range(-1.0..1.0));
    let y = Field::from_fn(&[n, m], |_| rng.random_range(-1.0..1.0));
    let mut g = Graph::new(k * m);
    let xn = g.constant(x.clone());
    let wn = g.param(wv.clone(), 0).unwrap();
    let pred = g.matmul(xn, wn).unwrap();
    let l = g.weighted_sse(pred, &y, vec![1.0; n * m], 1.0 / n as f64).unwrap();
    let grad = g.backward(l).unwrap().params;
    let r = x.matmul(&wv).unwrap().sub(&y).unwrap();
    for a in 0..k {
        for b in 0..m {
            let want: f64 = (0..n).map(|i| 2.0 * x.get(&[i, a]) * r.get(&[i, b])).sum::<f64>() / n as f64;
            assert!((grad[a * m + b] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_loss_point_has_zero_gradient() {
    let c = small_cfg(4, 8).model;
    let (p, x, _, w) = gradcheck_fixture(&c, 1).unwrap();
    let y = forward(&x, &p).unwrap();
    let (l, g) = example_gradient(&p, &x, &[y], &w).unwrap();
    assert_eq!(l, 0.0);
    let head = p.layout().find("decoder.head.b").unwrap().1.range();
    assert!(g[head].iter().all(|&v| v == 0.0));
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn gradcheck_passes_and_catches_a_broken_rule() {
    let c = small_cfg(4, 8).model;
    let (p, x, ys, w) = gradcheck_fixture(&c, 3).unwrap();
    let cfg = GradcheckConfig::default();
    let r = gradcheck(&p, &x, &ys, &w, &cfg).unwrap();
    assert!(r.samples >= 200);
    assert!(r.passed, "{}", r.to_text());
    assert!(r.groups.iter().any(|g| g.group == ParamGroup::Lambda));

    let bad = GradcheckConfig {
        fault: Some(Fault::LambdaGradient),
        ..cfg.clone()
    };
    let r = gradcheck(&p, &x, &ys, &w, &bad).unwrap();
    assert!(!r.passed);
    assert_eq!(r.failing_groups(), vec![ParamGroup::Lambda]);
    assert!(gradcheck(&p, &x, &ys, &w, &GradcheckConfig { samples: 0, ..cfg }).is_err());
}

#[test]
fn two_step_loss_follows_the_rollout() {
    let c = small_cfg(4, 8).model;
    let (p, x, mut ys, w) = gradcheck_fixture(&c, 4).unwrap();
    ys.push(ys[0].scale(-0.5));
    let (l, _) = example_gradient(&p, &x, &ys, &w).unwrap();
    let s = rollout(&x, &p, 2).unwrap();
    let lw = lat_weights(&crate::data::latitudes(4)).unwrap();
    let want = 0.5 * (loss(&s.leads[0], &ys[0], &lw).unwrap() + loss(&s.leads[1], &ys[1], &lw).unwrap());
    assert!((l - want).abs() <= 1e-12, "{l} vs {want}");
    let r = gradcheck(&p, &x, &ys, &w, &GradcheckConfig::default()).unwrap();
    assert!(r.passed, "{}", r.to_text());
}

/// All-linear, bias-free spectral configuration in which the model commutes
/// with longitude rolls.
fn equivariant_params(h: usize, w: usize) -> ModelParams {
    let mut c = ModelConfig::toy(h, w, 4).linearized();
    c.patch = Patch::new(2, 1, 2);
    let mut p = ModelParams::init(&c, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let names: Vec<String> = p.layout().entries().iter().map(|e| e.name.clone()).collect();
    for n in names {
        if n.ends_with("spatial.b1") || n.ends_with("spatial.b2") || n.ends_with("temporal.b1") || n.ends_with("temporal.b2") {
            p.slice_mut(&n).unwrap().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    p
}

#[test]
fn rolled_examples_have_the_same_loss() {
    let p = equivariant_params(4, 8);
    let c = p.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Field::from_fn(&[4, 4, 8, 3], |_| rng.random_range(-1.0..1.0));
    let y = Field::from_fn(&[4, 8, 2], |_| rng.random_range(-1.0..1.0));
    let w = loss_weights(LossKind::LatWeighted, &crate::data::latitudes(4), 8, 2).unwrap();
    let (base, _) = example_gradient(&p, &x, &[y.clone()], &w).unwrap();
    assert!(base > 0.0);
    for s in (0..8).step_by(c.patch.w) {
        let (xr, yr) = earth_rotation(&x, &[y.clone()], s);
        let (l, _) = example_gradient(&p, &xr, &yr, &w).unwrap();
        assert!((l - base).abs() <= 1e-8, "shift {s}: {l} vs {base}");
    }
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let b = small_bundle(4, 8, 60);
    let cfg = TrainConfig {
        epochs: 0,
        ..small_cfg(4, 8)
    };
    let out = train(&b, &cfg, |_| {}).unwrap();
    let init = ModelParams::init(&cfg.model, &mut stream(cfg.seed, Stream::Init)).unwrap();
    assert_eq!(out.params, init);
    assert!(out.history.is_empty());
}

#[test]
fn seeded_training_is_bitwise_reproducible() {
    let b = small_bundle(4, 8, 60);
    let mut cfg = small_cfg(4, 8);
    cfg.two_step = true;
    let a = train(&b, &cfg, |_| {}).unwrap();
    let again = train(&b, &cfg, |_| {}).unwrap();
    assert_eq!(a.params.values(), again.params.values());
    assert_eq!(history_csv(&a.history), history_csv(&again.history));
    assert_eq!(a.history.len(), 2);
    assert!(history_csv(&a.history).starts_with("epoch,train_loss,val_loss,lr\n"));

    cfg.augment.noise = false;
    let other = train(&b, &cfg, |_| {}).unwrap();
    assert_ne!(a.params.values(), other.params.values());
}

#[test]
fn non_finite_loss_aborts_with_a_diagnostic() {
    let b = small_bundle(4, 8, 60);
    let cfg = small_cfg(4, 8);
    let mut p = ModelParams::init(&cfg.model, &mut stream(1, Stream::Init)).unwrap();
    p.slice_mut("decoder.head.b").unwrap()[0] = f64::NAN;
    match train_from(&b, &cfg, p, |_| {}) {
        Err(Error::NonFinite { epoch: 0, step: 0, .. }) => {}
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn config_json_round_trips_with_defaults() {
    let cfg = small_cfg(4, 8);
    let s = serde_json::to_string(&cfg).unwrap();
    let back: TrainConfig = serde_json::from_str(&s).unwrap();
    assert_eq!(back, cfg);
    let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "augment": {"noise": false}}"#).unwrap();
    assert_eq!(partial.epochs, 3);
    assert!(!partial.augment.noise && partial.augment.rotate);
    assert_eq!(partial.augment.noise_std(), 0.1f64.sqrt());
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for k in col..n {
                a[r][k] -= f * a[col][k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

#[test]
fn linear_model_reaches_the_least_squares_optimum() {
    let (h, w) = (4, 8);
    let raw = generate(&GenConfig {
        height: h,
        width: w,
        steps: 50,
        speed: SpeedProfile::Uniform { speed: 0.6 },
        ..GenConfig::default()
    })
    .unwrap();
    let b = raw.normalized().unwrap();
    let mut model = ModelConfig::toy(h, w, 4).linearized();
    model.layers = 0;
    model.patch = Patch::new(1, 1, 1);
    let cfg = TrainConfig {
        model,
        augment: AugmentConfig::none(),
        optimizer: OptimizerConfig {
            base_lr: 0.05,
            warmup_epochs: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        },
        epochs: 1500,
        batch_size: 8,
        loss: LossKind::Plain,
        seed: 2,
        ..TrainConfig::default()
    };
    let out = train(&b, &cfg, |_| {}).unwrap();
    let trained = split_loss(&out.params, &b, Split::Train, LossKind::Plain, None).unwrap();

    // The model is a 3x3 convolution of the last frame: fit it directly.
    let c = b.channels();
    let feats = 9 * c + 1;
    let mut ata = vec![vec![0.0; feats]; feats];
    let mut aty = vec![vec![0.0; feats]; 2];
    let mut rows = Vec::new();
    for win in b.windows(Split::Train, 4).unwrap() {
        let last = win.x.select(0, 3);
        for i in 0..h {
            for j in 0..w {
                let mut f = Vec::with_capacity(feats);
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let ii = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                        let jj = (j as i64 + dj).rem_euclid(w as i64) as usize;
                        f.extend((0..c).map(|ch| last.get(&[ii, jj, ch])));
                    }
                }
                f.push(1.0);
                for a in 0..feats {
                    for bb in 0..feats {
                        ata[a][bb] += f[a] * f[bb];
                    }
                    for o in 0..2 {
                        aty[o][a] += f[a] * win.y.get(&[i, j, o]);
                    }
                }
                rows.push((f, [win.y.get(&[i, j, 0]), win.y.get(&[i, j, 1])]));
            }
        }
    }
    // The static channel repeats across longitude taps; a vanishing ridge
    // picks one solution of the singular normal equations.
    for (a, row) in ata.iter_mut().enumerate() {
        row[a] += 1e-10;
    }
    let coef: Vec<Vec<f64>> = (0..2).map(|o| solve(ata.clone(), aty[o].clone())).collect();
    let sse: f64 = rows
        .iter()
        .map(|(f, y)| {
            (0..2)
                .map(|o| {
                    let p: f64 = f.iter().zip(&coef[o]).map(|(a, b)| a * b).sum();
                    (p - y[o]).powi(2)
                })
                .sum::<f64>()
        })
        .sum();
    let optimum = sse / (rows.len() * 2) as f64;
    assert!(trained >= optimum - 1e-9, "{trained} below the optimum {optimum}");
    assert!(trained - optimum <= 1e-3, "trained {trained} vs least squares {optimum}");
}

#[test]
fn short_training_beats_persistence_on_validation() {
    let b = small_bundle(8, 16, 120);
    let mut model = ModelConfig::toy(8, 16, 16);
    model.spatial.blocks = 2;
    model.temporal.as_mut().unwrap().blocks = 2;
    let cfg = TrainConfig {
        model,
        epochs: 6,
        optimizer: OptimizerConfig {
            base_lr: 2e-3,
            warmup_epochs: 1.0,
            ..Default::default()
        },
        seed: 3,
        ..TrainConfig::default()
    };
    let out = train(&b, &cfg, |_| {}).unwrap();
    let norm = b.normalized().unwrap();
    let persist = persistence_loss(&norm, 4, Split::Val, LossKind::LatWeighted).unwrap();
    let last = out.history.last().unwrap().val_loss;
    assert!(last < persist, "validation {last} vs persistence {persist}");
}

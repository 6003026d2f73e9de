mod common;

use asr_align::train::optim::{lr_at, AdamWConfig, OptimState};
use asr_align::Tensor;
use common::oracles::adamw_bowl_trace;

#[test]
fn warmup_schedule_at_reference_steps() {
    let lr_max = 1e-4;
    let ramp = |s: u64| {
        if s <= 1000 {
            lr_max * s as f64 / 1000.0
        } else {
            lr_max
        }
    };
    for s in [1u64, 500, 1000, 50_000, 100_000] {
        assert_eq!(lr_at(s, 1000, lr_max), ramp(s), "step {s}");
    }
    assert_eq!(lr_at(500, 1000, lr_max), 0.5 * lr_max);
    assert_eq!(lr_at(1000, 1000, lr_max), lr_max);
}

fn run_bowl(cfg: AdamWConfig, x0: f64, a: f64, c: f64, lrs: &[f64]) -> Vec<f64> {
    let mut x = Tensor::<f64>::scalar(x0);
    let mut st = OptimState::new(cfg, &[&x]);
    lrs.iter()
        .map(|&lr| {
            let g = Tensor::scalar(2.0 * a * (x.item() - c));
            st.step(&mut [&mut x], &[g], lr).unwrap();
            x.item()
        })
        .collect()
}

#[test]
fn adamw_matches_scalar_reference_on_a_bowl() {
    for (wd, warm) in [(0.0, 3u64), (0.01, 1000), (0.1, 0)] {
        let cfg = AdamWConfig {
            lr_max: 0.05,
            weight_decay: wd,
            warmup_steps: warm,
            ..AdamWConfig::default()
        };
        let lrs: Vec<f64> = (1..=10).map(|s| lr_at(s, warm, cfg.lr_max)).collect();
        let got = run_bowl(cfg, 1.3, 0.7, -0.4, &lrs);
        let want = adamw_bowl_trace(1.3, 0.7, -0.4, &lrs, cfg.beta1, cfg.beta2, cfg.eps, wd);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "wd {wd}: {g} vs {w}");
        }
    }
}

#[test]
fn first_step_moves_by_lr_against_the_gradient_sign() {
    let mut x = Tensor::<f64>::scalar(0.0);
    let mut st = OptimState::new(AdamWConfig::default(), &[&x]);
    st.step(&mut [&mut x], &[Tensor::scalar(2.0)], 0.1).unwrap();
    assert!((x.item() + 0.1).abs() < 1e-6);
}

#[test]
fn zero_gradient_without_decay_leaves_parameters() {
    let mut r = common::rng(1);
    let p0 = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    let mut p = p0.clone();
    let mut st = OptimState::new(AdamWConfig::default(), &[&p]);
    for _ in 0..5 {
        st.step(&mut [&mut p], &[Tensor::zeros(&[3, 4])], 0.1)
            .unwrap();
    }
    assert_eq!(p, p0);
}

#[test]
fn non_finite_gradient_aborts_with_step_index() {
    let mut p = Tensor::<f64>::scalar(1.0);
    let mut st = OptimState::new(AdamWConfig::default(), &[&p]);
    st.step(&mut [&mut p], &[Tensor::scalar(1.0)], 0.1).unwrap();
    let e = st
        .step(&mut [&mut p], &[Tensor::scalar(f64::NAN)], 0.1)
        .unwrap_err();
    assert!(e.to_string().contains('2'), "{e}");
}

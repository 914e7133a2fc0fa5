mod common;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use wildid_core::calibration::{
    argmax, ce_batch_loss, cross_entropy, expected_calibration_error, fit_global_temperature,
    pits_batch_loss, pits_loss, tempered_softmax, LogitsOutput,
};

#[test]
fn gradient_matches_central_differences() {
    let mut r = common::rng(1);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let k = [2, 10, 100][i % 3];
        let (z, t, label, target) = common::random_pits_instance(&mut r, k);
        worst = worst.max(common::fd_max_relative_error(
            &z, t, label, target, 0.1, 1e-5, 1e-8,
        ));
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn gradient_at_origin_matches_finite_differences() {
    // z = (0, 0), T = 1, y = 0
    let g = wildid_core::calibration::pits_loss_grad(
        &LogitsOutput::new(vec![0.0, 0.0], 1.0),
        0,
        1.0,
        0.1,
    )
    .unwrap();
    let loss =
        |z0: f64, z1: f64| pits_loss(&LogitsOutput::new(vec![z0, z1], 1.0), 0, 1.0, 0.1).unwrap();
    let h = 1e-5;
    let fd0 = (loss(h, 0.0) - loss(-h, 0.0)) / (2.0 * h);
    let fd1 = (loss(0.0, h) - loss(0.0, -h)) / (2.0 * h);
    assert_abs_diff_eq!(fd0, -0.5, epsilon = 1e-9);
    assert_abs_diff_eq!(fd1, 0.5, epsilon = 1e-9);
    assert_abs_diff_eq!(g.d_logits[0], fd0, epsilon = 1e-9);
    assert_abs_diff_eq!(g.d_logits[1], fd1, epsilon = 1e-9);
}

#[test]
fn pits_reduces_to_ce_on_balanced_data() {
    let mut r = common::rng(3);
    for _ in 0..50 {
        let k = r.random_range(2..20);
        let n = r.random_range(1..40);
        let logits: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| r.random_range(-6.0..6.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let outputs: Vec<LogitsOutput> = logits
            .iter()
            .map(|z| LogitsOutput::new(z.clone(), 1.0))
            .collect();
        let pits = pits_batch_loss(&outputs, &labels, &vec![1.0; n], 0.1).unwrap();
        let ce = ce_batch_loss(&logits, &labels).unwrap();
        assert!((pits - ce).abs() <= 1e-12, "{pits} vs {ce}");
    }
}

#[test]
fn global_temperature_recovers_the_sampling_temperature() {
    for (seed, true_t) in [(10, 2.0), (11, 1.0)] {
        let mut r = common::rng(seed);
        let k = 5;
        let mut logits = Vec::with_capacity(10_000);
        let mut labels = Vec::with_capacity(10_000);
        for _ in 0..10_000 {
            let z: Vec<f64> = (0..k).map(|_| r.random_range(-3.0..3.0)).collect();
            // sample the label with an independent softmax
            let w: Vec<f64> = z.iter().map(|v| (v / true_t).exp()).collect();
            labels.push(WeightedIndex::new(&w).unwrap().sample(&mut r));
            logits.push(z);
        }
        let fit = fit_global_temperature(&logits, &labels).unwrap();
        assert!(
            (fit.temperature - true_t).abs() < 0.1,
            "fitted {} for {true_t}",
            fit.temperature
        );
    }
}

#[test]
fn confident_single_sample_clamps_to_lower_bound() {
    let fit = fit_global_temperature(&[vec![10.0, 0.0]], &[0]).unwrap();
    assert!((fit.temperature - 0.05).abs() < 1e-3, "{}", fit.temperature);
}

#[test]
fn ece_hand_fixtures() {
    let onehot = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    assert_eq!(
        expected_calibration_error(&onehot, &[0, 1], 15)
            .unwrap()
            .ece,
        0.0
    );

    let sure = vec![vec![1.0, 0.0]; 4];
    assert_abs_diff_eq!(
        expected_calibration_error(&sure, &[0, 1, 0, 1], 15)
            .unwrap()
            .ece,
        0.5,
        epsilon = 1e-15
    );

    let probs = vec![
        vec![0.6, 0.4],
        vec![0.6, 0.4],
        vec![0.9, 0.1],
        vec![0.9, 0.1],
    ];
    let ece = expected_calibration_error(&probs, &[0, 1, 0, 0], 10)
        .unwrap()
        .ece;
    assert_abs_diff_eq!(ece, 0.10, epsilon = 1e-12);
}

fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 2..30)
}

proptest! {
    #[test]
    fn temperature_never_changes_the_argmax(z in logits_strategy(), ti in 0usize..5) {
        let t = [0.5, 1.0, 2.0, 10.0, 50.0][ti];
        let p = tempered_softmax(&z, t).unwrap();
        prop_assert_eq!(argmax(&p), argmax(&z));
    }

    #[test]
    fn tempered_softmax_preserves_ranking(z in logits_strategy(), t in 0.05f64..100.0) {
        let p = tempered_softmax(&z, t).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..z.len() {
            for j in 0..z.len() {
                if z[i] > z[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn confidence_decreases_with_temperature(z in prop::collection::vec(-5.0f64..5.0, 2..10), t in 0.2f64..20.0) {
        let top = argmax(&z);
        prop_assume!(z.iter().enumerate().all(|(i, &v)| i == top || v < z[top] - 1e-3));
        let p = tempered_softmax(&z, t).unwrap();
        let q = tempered_softmax(&z, t * 1.5).unwrap();
        prop_assert!(q[top] < p[top]);
    }

    #[test]
    fn regularizer_vanishes_at_the_target(z in logits_strategy(), t in 1.0f64..10.0, y in 0usize..2) {
        let loss = pits_loss(&LogitsOutput::new(z.clone(), t), y, t, 0.1).unwrap();
        let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
        let ce = cross_entropy(&scaled, y).unwrap();
        prop_assert!((loss - ce).abs() < 1e-9 * ce.max(1.0));
    }

    #[test]
    fn ece_is_permutation_invariant_and_bounded(
        rows in prop::collection::vec((0.0f64..1.0, 0usize..3), 1..60),
        shift in 0usize..60,
    ) {
        let probs: Vec<Vec<f64>> = rows.iter().map(|&(a, _)| {
            let b = (1.0 - a) / 2.0;
            vec![a, b, 1.0 - a - b]
        }).collect();
        let labels: Vec<usize> = rows.iter().map(|&(_, y)| y).collect();
        let ece = expected_calibration_error(&probs, &labels, 15).unwrap().ece;
        prop_assert!((0.0..=1.0).contains(&ece));
        let s = shift % probs.len();
        let mut p2 = probs.clone();
        let mut l2 = labels.clone();
        p2.rotate_left(s);
        l2.rotate_left(s);
        let ece2 = expected_calibration_error(&p2, &l2, 15).unwrap().ece;
        prop_assert!((ece - ece2).abs() < 1e-12);
    }
}

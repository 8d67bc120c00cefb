mod common;

use common::*;
use corefenc::eval::{micro_f1, LabelSet};
use corefenc::optim::AdamWConfig;
use corefenc::typing::{train_head, TypingConfig};
use ndarray::{array, Array2};
use rand::Rng;

/// Forty points in the plane: label `/a` when x > 0, `/b` when y > 0, each
/// with a margin of at least 0.2.
fn toy() -> (Array2<f64>, Array2<f64>) {
    let mut r = rng(3);
    let mut x = Array2::zeros((40, 2));
    let mut y = Array2::zeros((40, 2));
    for i in 0..40 {
        for k in 0..2 {
            let sign = if (i >> k) & 1 == 1 { 1.0 } else { -1.0 };
            x[[i, k]] = sign * r.gen_range(0.2..1.0);
            y[[i, k]] = if sign > 0.0 { 1.0 } else { 0.0 };
        }
    }
    (x, y)
}

/// Classic perceptron on one label; returns true once an epoch has no mistakes.
fn perceptron_separates(x: &Array2<f64>, y: &Array2<f64>, label: usize) -> bool {
    let (mut w, mut b) = ([0.0; 2], 0.0);
    for _ in 0..1000 {
        let mut mistakes = 0;
        for i in 0..x.nrows() {
            let t = if y[[i, label]] > 0.5 { 1.0 } else { -1.0 };
            if t * (w[0] * x[[i, 0]] + w[1] * x[[i, 1]] + b) <= 0.0 {
                w[0] += t * x[[i, 0]];
                w[1] += t * x[[i, 1]];
                b += t;
                mistakes += 1;
            }
        }
        if mistakes == 0 {
            return true;
        }
    }
    false
}

fn sets(y: &Array2<f64>, labels: &[String]) -> Vec<LabelSet> {
    y.rows()
        .into_iter()
        .map(|r| labels.iter().zip(r).filter(|(_, &v)| v > 0.5).map(|(l, _)| l.clone()).collect())
        .collect()
}

#[test]
fn separable_toy_is_fit_exactly() {
    let (x, y) = toy();
    assert!(perceptron_separates(&x, &y, 0) && perceptron_separates(&x, &y, 1));
    let labels = vec!["/a".to_string(), "/b".to_string()];
    let config = TypingConfig {
        epochs: 200,
        optimizer: AdamWConfig { lr: 5e-2, weight_decay: 0.0, ..Default::default() },
        ..Default::default()
    };
    let (model, log, best) = train_head(&x, &y, labels.clone(), None, &config).unwrap();
    assert_eq!(best, 200);
    assert!(log.last().unwrap().loss < log[0].loss);
    let pred = model.predict_rows(&x).unwrap();
    assert_eq!(micro_f1(&pred, &sets(&y, &labels)).unwrap(), 1.0);
}

#[test]
fn a_label_never_seen_stays_below_threshold() {
    let (x, mut y) = toy();
    // Third label column is all zeros.
    y = ndarray::concatenate![ndarray::Axis(1), y, Array2::zeros((40, 1))];
    let labels = vec!["/a".to_string(), "/b".to_string(), "/never".to_string()];
    let (model, _, _) = train_head(&x, &y, labels, None, &TypingConfig::default()).unwrap();
    let validation = array![[0.5, 0.5], [-0.7, 0.3], [0.0, 0.0], [1.5, -1.5]];
    for row in validation.rows() {
        let p = model.probabilities(row).unwrap();
        assert!(p[2] < 0.5, "{p:?}");
    }
    assert!(model.bias[2] < 0.0);
}

//! The score-function estimator checked against exact enumeration on small
//! tabular policies.

mod common;

use ncrf_core::objectives::{reinforce_surrogate, Baseline};
use ncrf_core::tensor::{Tape, Tensor};
use rand::distributions::{Distribution, WeightedIndex};

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Two-step policy over three tokens. Row 0 of the table holds the logits of
/// the first token; row `1 + a` those of the second token after `a`.
struct TwoStep {
    table: Tensor,
}

impl TwoStep {
    fn new(seed: u64) -> Self {
        TwoStep {
            table: common::uniform(&mut common::rng(seed), &[4, 3]),
        }
    }

    fn row(&self, r: usize) -> Vec<f64> {
        softmax(self.table.row(r))
    }

    fn prob(&self, a1: usize, a2: usize) -> f64 {
        self.row(0)[a1] * self.row(1 + a1)[a2]
    }

    /// Gradient of the one-trajectory surrogate `−(R − b)·log P(τ)`.
    fn estimator(&self, a1: usize, a2: usize, advantage: f64) -> Vec<f64> {
        let mut tape = Tape::new();
        let table = tape.param(self.table.clone());
        let logits = tape.select_rows(table, &[0, 1 + a1]).unwrap();
        let lp = tape.log_softmax_pick(logits, &[a1, a2]).unwrap();
        let s = reinforce_surrogate(&mut tape, &[(lp, advantage)]).unwrap();
        tape.backward(s).unwrap();
        tape.grad(table).unwrap().to_vec()
    }

    /// Closed-form gradient of E[R] for R = 1 iff both tokens are equal.
    fn analytic(&self) -> Vec<f64> {
        let p1 = self.row(0);
        let q: Vec<Vec<f64>> = (0..3).map(|a| self.row(1 + a)).collect();
        let mut g = vec![0.0; 12];
        for j in 0..3 {
            g[j] = (0..3)
                .map(|a| q[a][a] * p1[a] * (f64::from(u8::from(a == j)) - p1[j]))
                .sum();
        }
        for a in 0..3 {
            for j in 0..3 {
                g[3 * (1 + a) + j] = p1[a] * q[a][a] * (f64::from(u8::from(a == j)) - q[a][j]);
            }
        }
        g
    }

    fn expected_estimator(&self, b: f64) -> Vec<f64> {
        let mut total = vec![0.0; 12];
        for a1 in 0..3 {
            for a2 in 0..3 {
                let r = if a1 == a2 { 1.0 } else { 0.0 };
                let p = self.prob(a1, a2);
                for (t, g) in total.iter_mut().zip(self.estimator(a1, a2, r - b)) {
                    *t += p * g;
                }
            }
        }
        total
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn enumerated_estimator_matches_analytic_gradient() {
    for seed in 0..5 {
        let policy = TwoStep::new(seed);
        let descent: Vec<f64> = policy.analytic().iter().map(|g| -g).collect();
        for b in [0.0, 0.3, 1.0] {
            let expected = policy.expected_estimator(b);
            let err = max_abs_diff(&expected, &descent);
            assert!(err < 1e-8, "seed {seed}, b {b}: {err:e}");
        }
    }
}

#[test]
fn two_action_bandit() {
    let theta = Tensor::vector(vec![0.4, -0.3]);
    let pi = softmax(theta.values());
    let p = pi[0];
    let mut expected = [0.0; 2];
    for (a, &r) in [1.0, 0.0].iter().enumerate() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::new(vec![1, 2], theta.values().to_vec()).unwrap());
        let lp = tape.log_softmax_pick(logits, &[a]).unwrap();
        let s = reinforce_surrogate(&mut tape, &[(lp, r)]).unwrap();
        tape.backward(s).unwrap();
        for (e, g) in expected.iter_mut().zip(tape.grad(logits).unwrap()) {
            *e += pi[a] * g;
        }
    }
    // ∇E[R] = p(1−p)·∇(θ₀ − θ₁); the surrogate descends it.
    let g = p * (1.0 - p);
    assert!((expected[0] + g).abs() < 1e-12);
    assert!((expected[1] - g).abs() < 1e-12);
}

#[test]
fn moving_baseline_reduces_variance() {
    let policy = TwoStep::new(11);
    let mut rng = common::rng(2024);
    let first = WeightedIndex::new(policy.row(0)).unwrap();
    let second: Vec<WeightedIndex<f64>> = (0..3).map(|a| WeightedIndex::new(policy.row(1 + a)).unwrap()).collect();
    let mut baseline = Baseline::new(0.99).unwrap();
    let n = 10_000;
    let (mut plain, mut centered) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let a1 = first.sample(&mut rng);
        let a2 = second[a1].sample(&mut rng);
        let r = if a1 == a2 { 1.0 } else { 0.0 };
        plain.push(policy.estimator(a1, a2, r));
        centered.push(policy.estimator(a1, a2, r - baseline.value));
        baseline.update(r).unwrap();
    }
    let variance = |samples: &[Vec<f64>]| -> f64 {
        let dims = samples[0].len();
        let mut total = 0.0;
        for j in 0..dims {
            let mean = samples.iter().map(|s| s[j]).sum::<f64>() / n as f64;
            total += samples.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        }
        total / dims as f64
    };
    let (v0, vb) = (variance(&plain), variance(&centered));
    assert!(vb < v0, "baseline variance {vb} not below {v0}");
}

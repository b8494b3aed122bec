//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use balcal::nn::{Activation, Parameterized};
use balcal::rng::seeded;
use balcal::train::{Architecture, BalcalModel, ProbPairLog};
use balcal::Matrix;
use rand::Rng as _;

/// Small two-branch model with a non-trivial adapter so every tensor
/// receives gradient.
pub fn gradient_instance(seed: u64, use_adapter: bool) -> (BalcalModel, Matrix, Matrix) {
    let (d, k, n, input) = (8, 4, 16, 6);
    let arch = Architecture {
        input_dim: input,
        hidden: vec![10, 9],
        feature_dim: d,
        k,
        hidden_act: Activation::Tanh,
        feature_act: Activation::Identity,
        adapter_act: Activation::Tanh,
        use_adapter,
    };
    let mut model = BalcalModel::new(arch, 1.5, seed).unwrap();
    let mut r = seeded(seed ^ 0xabcdef);
    for v in model.adapter.v2.as_mut_slice() {
        *v = r.random_range(-0.5..0.5);
    }
    let x = Matrix::from_fn(n, input, |_, _| r.random_range(-1.5..1.5));
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let y = balcal::nn::one_hot(&labels, k).unwrap();
    (model, x, y)
}

/// Worst relative error between analytic gradients of the weighted loss and
/// central finite differences, over every parameter.
pub fn max_relative_fd_error(model: &BalcalModel, x: &Matrix, y: &Matrix, gamma: f64) -> f64 {
    let pass = model.forward(x).unwrap();
    let grads = model.backward(&pass, y, gamma).unwrap();
    let loss = |m: &BalcalModel| m.losses(&m.forward(x).unwrap(), y, gamma).unwrap().total;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    for (t, &len) in shapes.iter().enumerate() {
        for i in 0..len {
            let mut plus = model.clone();
            plus.params_mut()[t][i] += h;
            let mut minus = model.clone();
            minus.params_mut()[t][i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = grads.0[t][i];
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// ECE by explicit interval membership: bin b covers (b/B, (b+1)/B], with
/// confidence 0 placed in the first bin.
pub fn brute_force_ece(conf: &[f64], correct: &[bool], bins: usize) -> f64 {
    let n = conf.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let members: Vec<usize> = (0..conf.len())
            .filter(|&i| (conf[i] > lo && conf[i] <= hi) || (b == 0 && conf[i] == 0.0))
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().filter(|&&i| correct[i]).count() as f64 / m;
        let c = members.iter().map(|&i| conf[i]).sum::<f64>() / m;
        total += m / n * (acc - c).abs();
    }
    total
}

/// AUROC by counting all (in, out) pairs, ties worth one half.
pub fn all_pairs_auroc(s_in: &[f64], s_out: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in s_in {
        for &b in s_out {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / (s_in.len() * s_out.len()) as f64
}

/// `|conf(γ) − δ·acc(γ)|` recomputed from the log without library helpers.
pub fn gamma_objective(log: &ProbPairLog, gamma: f64, delta: f64) -> f64 {
    let n = log.len();
    let (mut conf, mut acc) = (0.0, 0.0);
    for i in 0..n {
        let (a, b) = (log.p_sta(i), log.p_etf(i));
        let mut best = 0;
        let mut best_p = f64::NEG_INFINITY;
        for j in 0..a.len() {
            let p = gamma * a[j] + (1.0 - gamma) * b[j];
            if p > best_p {
                best_p = p;
                best = j;
            }
        }
        conf += best_p;
        if best == log.labels()[i] {
            acc += 1.0;
        }
    }
    (conf / n as f64 - delta * acc / n as f64).abs()
}

pub fn random_simplex(k: usize, sharpness: f64, r: &mut impl rand::Rng) -> Vec<f64> {
    let logits: Vec<f64> = (0..k).map(|_| sharpness * r.random_range(-1.0..1.0)).collect();
    balcal::nn::softmax(&logits).unwrap()
}

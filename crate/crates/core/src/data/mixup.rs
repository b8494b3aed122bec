use rand_distr::{Distribution, Gamma};

use crate::error::{ensure, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

/// Convex combinations `x̃ = λ·x_i + (1−λ)·x_j`, `ỹ = λ·y_i + (1−λ)·y_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupBatch {
    pub features: Matrix,
    pub soft_labels: Matrix,
    pub lambdas: Vec<f64>,
    pub alpha: f64,
}

/// `λ ~ Beta(α, α)` as `g₁/(g₁+g₂)` with `g₁, g₂ ~ Gamma(α, 1)`.
pub fn sample_beta(alpha: f64, rng: &mut Rng) -> Result<f64> {
    ensure!(alpha > 0.0 && alpha.is_finite(), InvalidArgument, "mixup alpha must be positive, got {alpha}");
    let g = Gamma::new(alpha, 1.0).expect("validated shape");
    loop {
        let a: f64 = g.sample(rng);
        let b: f64 = g.sample(rng);
        let s = a + b;
        // both draws can underflow to zero for tiny alpha
        if s > 0.0 {
            return Ok(a / s);
        }
    }
}

/// One `λ` per pair, drawn fresh for every call.
pub fn mixup_batch(
    features_a: &Matrix,
    labels_a: &Matrix,
    features_b: &Matrix,
    labels_b: &Matrix,
    alpha: f64,
    rng: &mut Rng,
) -> Result<MixupBatch> {
    ensure!(alpha > 0.0 && alpha.is_finite(), InvalidArgument, "mixup alpha must be positive, got {alpha}");
    let lambdas = (0..features_a.rows())
        .map(|_| sample_beta(alpha, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut batch = mixup_with_lambdas(features_a, labels_a, features_b, labels_b, &lambdas)?;
    batch.alpha = alpha;
    Ok(batch)
}

/// Mixup with caller-supplied coefficients.
pub fn mixup_with_lambdas(
    features_a: &Matrix,
    labels_a: &Matrix,
    features_b: &Matrix,
    labels_b: &Matrix,
    lambdas: &[f64],
) -> Result<MixupBatch> {
    ensure!(
        features_a.shape() == features_b.shape() && labels_a.shape() == labels_b.shape(),
        Shape,
        "mixup halves differ in shape"
    );
    ensure!(
        features_a.rows() == labels_a.rows() && lambdas.len() == features_a.rows(),
        Shape,
        "mixup needs one label row and one lambda per sample"
    );
    ensure!(
        lambdas.iter().all(|l| (0.0..=1.0).contains(l)),
        InvalidArgument,
        "mixing coefficients must lie in [0, 1]"
    );
    let mix = |a: &Matrix, b: &Matrix| {
        let mut out = a.clone();
        for (i, &lam) in lambdas.iter().enumerate() {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(b.row(i)) {
                *o = lam * *o + (1.0 - lam) * bv;
            }
        }
        out
    };
    Ok(MixupBatch {
        features: mix(features_a, features_b),
        soft_labels: mix(labels_a, labels_b),
        lambdas: lambdas.to_vec(),
        alpha: f64::NAN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::one_hot;
    use crate::rng::seeded;

    #[test]
    fn lambda_one_returns_first_parent() {
        let xa = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let xb = Matrix::from_rows(&[vec![-3.0, 5.0]]).unwrap();
        let ya = one_hot(&[0], 3).unwrap();
        let yb = one_hot(&[2], 3).unwrap();
        let m = mixup_with_lambdas(&xa, &ya, &xb, &yb, &[1.0]).unwrap();
        assert_eq!(m.features, xa);
        assert_eq!(m.soft_labels, ya);
    }

    #[test]
    fn lambda_point_three() {
        let xa = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let xb = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let ya = one_hot(&[0], 2).unwrap();
        let yb = one_hot(&[1], 2).unwrap();
        let m = mixup_with_lambdas(&xa, &ya, &xb, &yb, &[0.3]).unwrap();
        assert!((m.features.get(0, 0) - 0.3).abs() < 1e-15);
        assert!((m.soft_labels.get(0, 0) - 0.3).abs() < 1e-15);
        assert!((m.soft_labels.get(0, 1) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn beta_one_is_uniform() {
        let mut r = seeded(2024);
        let n = 10_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_beta(1.0, &mut r).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
        // Uniform(0,1) has variance 1/12
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 1.0 / 12.0).abs() < 0.005, "{var}");
        assert!(draws.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn rejects_nonpositive_alpha() {
        let x = Matrix::zeros(1, 1);
        let y = one_hot(&[0], 2).unwrap();
        assert!(mixup_batch(&x, &y, &x, &y, 0.0, &mut seeded(0)).is_err());
        assert!(sample_beta(-1.0, &mut seeded(0)).is_err());
    }
}

use rand_distr::{Distribution, Normal, Uniform};

use super::{Dataset, SplitTag};
use crate::error::{ensure, Error, Result};
use crate::matrix::{norm, Matrix};
use crate::rng::{self, Rng};

const PLACEMENT_ATTEMPTS: usize = 1000;

/// Isotropic Gaussian clusters around fixed centers.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobSource {
    pub centers: Matrix,
    pub noise_sd: f64,
}

impl BlobSource {
    /// Centers drawn uniformly from `[offset − separation, offset + separation]^dim`
    /// and accepted only when every pairwise distance is at least `separation`.
    pub fn new(k: usize, input_dim: usize, separation: f64, noise_sd: f64, offset: f64, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        Self::with_rng(k, input_dim, separation, noise_sd, offset, &mut r)
    }

    fn with_rng(
        k: usize,
        input_dim: usize,
        separation: f64,
        noise_sd: f64,
        offset: f64,
        r: &mut Rng,
    ) -> Result<Self> {
        ensure!(k >= 1 && input_dim >= 1, InvalidArgument, "need k >= 1 and input_dim >= 1");
        ensure!(
            separation > 0.0 && noise_sd > 0.0,
            InvalidArgument,
            "separation and noise_sd must be positive"
        );
        let side = Uniform::new_inclusive(offset - separation, offset + separation).expect("finite bounds");
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
        for c in 0..k {
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let cand: Vec<f64> = (0..input_dim).map(|_| side.sample(r)).collect();
                let ok = centers.iter().all(|other| {
                    let diff: Vec<f64> = cand.iter().zip(other).map(|(a, b)| a - b).collect();
                    norm(&diff) >= separation
                });
                if ok {
                    centers.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::InvalidArgument(format!(
                    "could not place center {c} of {k} with separation {separation} after {PLACEMENT_ATTEMPTS} attempts"
                )));
            }
        }
        Ok(Self {
            centers: Matrix::from_rows(&centers)?,
            noise_sd,
        })
    }

    pub fn k(&self) -> usize {
        self.centers.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.centers.cols()
    }

    /// `n_per_class` samples per class, grouped by class.
    pub fn sample(&self, n_per_class: usize, seed: u64, split: SplitTag) -> Result<Dataset> {
        let mut r = rng::seeded(seed);
        self.sample_with(n_per_class, &mut r, split)
    }

    fn sample_with(&self, n_per_class: usize, r: &mut Rng, split: SplitTag) -> Result<Dataset> {
        ensure!(n_per_class >= 1, InvalidArgument, "need at least one sample per class");
        let noise = Normal::new(0.0, self.noise_sd).expect("positive sd");
        let (k, dim) = (self.k(), self.input_dim());
        let mut data = Vec::with_capacity(k * n_per_class * dim);
        let mut labels = Vec::with_capacity(k * n_per_class);
        for c in 0..k {
            let center = self.centers.row(c);
            for _ in 0..n_per_class {
                data.extend(center.iter().map(|&m| m + noise.sample(r)));
                labels.push(c);
            }
        }
        Dataset::new(Matrix::from_vec(k * n_per_class, dim, data)?, labels, k, split)
    }
}

/// `k` Gaussian clusters with pairwise center distance ≥ `separation`.
pub fn make_blobs(
    k: usize,
    input_dim: usize,
    n_per_class: usize,
    separation: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<Dataset> {
    let mut r = rng::seeded(seed);
    let src = BlobSource::with_rng(k, input_dim, separation, noise_sd, 0.0, &mut r)?;
    src.sample_with(n_per_class, &mut r, SplitTag::Full)
}

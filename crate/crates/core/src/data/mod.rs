//! Datasets: synthetic generation, file ingestion, splitting, mixup,
//! corruption shifts and out-of-distribution pairing.

mod blobs;
mod corrupt;
mod io;
mod mixup;
mod presets;

pub use blobs::{make_blobs, BlobSource};
pub use corrupt::{corrupt, Corruption};
pub use io::{load_csv, load_idx};
pub use mixup::{mixup_batch, mixup_with_lambdas, sample_beta, MixupBatch};
pub use presets::{ood_pair, DatasetPreset, OodSource, Splits};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::matrix::Matrix;
use crate::nn::one_hot;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Full,
    Train,
    Val,
    Test,
    /// Out-of-distribution samples; labels carry no meaning.
    Ood,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub k: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, k: usize, split: SplitTag) -> Result<Self> {
        ensure!(
            features.rows() == labels.len(),
            Shape,
            "{} feature rows but {} labels",
            features.rows(),
            labels.len()
        );
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(crate::Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            k,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    pub fn one_hot(&self) -> Matrix {
        one_hot(&self.labels, self.k).expect("labels validated at construction")
    }

    pub fn subset(&self, idx: &[usize], split: SplitTag) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            k: self.k,
            split,
        }
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    /// Replaces each label, with probability `rate`, by a uniformly drawn different class.
    pub fn with_label_noise(mut self, rate: f64, seed: u64) -> Result<Self> {
        ensure!((0.0..=1.0).contains(&rate), InvalidArgument, "label noise rate {rate} outside [0, 1]");
        if rate == 0.0 {
            return Ok(self);
        }
        let mut r = rng::seeded(seed);
        for y in &mut self.labels {
            if r.random::<f64>() < rate {
                let shift = r.random_range(1..self.k);
                *y = (*y + shift) % self.k;
            }
        }
        Ok(self)
    }

    pub fn manifest(&self, name: &str, seed: Option<u64>, provenance: &str) -> Manifest {
        Manifest {
            name: name.to_string(),
            k: self.k,
            input_dim: self.input_dim(),
            n: self.len(),
            seed,
            provenance: provenance.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub k: usize,
    pub input_dim: usize,
    pub n: usize,
    pub seed: Option<u64>,
    pub provenance: String,
}

/// Stratified, seeded train/validation split. Each class contributes
/// `round(n_k · val_fraction)` samples to validation; both parts keep the
/// original sample order.
pub fn split(dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    ensure!(
        val_fraction > 0.0 && val_fraction < 1.0,
        InvalidArgument,
        "validation fraction {val_fraction} must lie strictly between 0 and 1"
    );
    let mut r = rng::seeded(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.k];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut is_val = vec![false; dataset.len()];
    for members in &mut by_class {
        members.shuffle(&mut r);
        let take = (members.len() as f64 * val_fraction).round() as usize;
        for &i in members.iter().take(take) {
            is_val[i] = true;
        }
    }
    let (val_idx, train_idx): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| is_val[i]);
    Ok((
        dataset.subset(&train_idx, SplitTag::Train),
        dataset.subset(&val_idx, SplitTag::Val),
    ))
}

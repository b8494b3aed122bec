use serde::{Deserialize, Serialize};

use super::{split, BlobSource, Dataset, SplitTag};
use crate::error::{ensure, Error, Result};
use crate::rng::sub_seed;

/// Desk-scale synthetic dataset presets standing in for 10- and 100-class
/// image benchmarks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetPreset {
    pub name: String,
    pub k: usize,
    pub input_dim: usize,
    pub n_per_class: usize,
    pub n_test_per_class: usize,
    pub separation: f64,
    pub noise_sd: f64,
    pub val_fraction: f64,
}

impl DatasetPreset {
    pub fn blobs10() -> Self {
        Self {
            name: "blobs10".into(),
            k: 10,
            input_dim: 32,
            n_per_class: 500,
            n_test_per_class: 200,
            separation: 1.0,
            noise_sd: 1.0,
            val_fraction: 0.15,
        }
    }

    pub fn blobs100() -> Self {
        Self {
            name: "blobs100".into(),
            k: 100,
            input_dim: 64,
            n_per_class: 100,
            n_test_per_class: 50,
            separation: 1.0,
            noise_sd: 1.0,
            val_fraction: 0.05,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "blobs10" => Ok(Self::blobs10()),
            "blobs100" => Ok(Self::blobs100()),
            other => Err(Error::InvalidArgument(format!(
                "unknown dataset preset '{other}' (expected blobs10 or blobs100)"
            ))),
        }
    }

    pub fn source(&self, seed: u64) -> Result<BlobSource> {
        BlobSource::new(self.k, self.input_dim, self.separation, self.noise_sd, 0.0, sub_seed(seed, 0))
    }

    /// A blob family with the same shape whose centers live in a box shifted
    /// by four separations along every axis, so it shares no support with the
    /// in-distribution centers.
    pub fn ood_source(&self, seed: u64) -> Result<BlobSource> {
        BlobSource::new(
            self.k,
            self.input_dim,
            self.separation,
            self.noise_sd,
            4.0 * self.separation,
            sub_seed(seed, 100),
        )
    }

    /// Train/validation/test splits; label noise (if any) is applied to all
    /// three so held-out accuracy is capped the same way training accuracy is.
    pub fn generate(&self, seed: u64, label_noise: f64) -> Result<Splits> {
        let src = self.source(seed)?;
        let pool = src
            .sample(self.n_per_class, sub_seed(seed, 1), SplitTag::Full)?
            .with_label_noise(label_noise, sub_seed(seed, 2))?;
        let test = src
            .sample(self.n_test_per_class, sub_seed(seed, 3), SplitTag::Test)?
            .with_label_noise(label_noise, sub_seed(seed, 4))?;
        let (train, val) = split(&pool, self.val_fraction, sub_seed(seed, 5))?;
        Ok(Splits { train, val, test })
    }

    pub fn generate_ood(&self, seed: u64) -> Result<Dataset> {
        let src = self.ood_source(seed)?;
        src.sample(self.n_test_per_class, sub_seed(seed, 101), SplitTag::Ood)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub enum OodSource<'a> {
    Dataset(Dataset),
    Blobs { source: &'a BlobSource, n_per_class: usize, seed: u64 },
}

/// Pairs an in-distribution set with an out-of-distribution one. The out
/// set is tagged [`SplitTag::Ood`]; its labels are not meaningful.
pub fn ood_pair(in_dataset: &Dataset, out: OodSource<'_>) -> Result<(Dataset, Dataset)> {
    let out = match out {
        OodSource::Dataset(d) => d,
        OodSource::Blobs {
            source,
            n_per_class,
            seed,
        } => source.sample(n_per_class, seed, SplitTag::Ood)?,
    };
    ensure!(
        out.input_dim() == in_dataset.input_dim(),
        Shape,
        "in-distribution width {} vs out-of-distribution width {}",
        in_dataset.input_dim(),
        out.input_dim()
    );
    Ok((in_dataset.clone(), out.with_split(SplitTag::Ood)))
}

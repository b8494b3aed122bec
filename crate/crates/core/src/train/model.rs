use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::etf::EtfClassifier;
use crate::matrix::Matrix;
use crate::nn::{
    cross_entropy, softmax_ce_grad, softmax_rows, Activation, Adapter, AdapterCache, DenseCache, DenseNet,
    Gradients, LinearHead, Parameterized,
};
use crate::rng::{self, stream_seed, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub k: usize,
    pub hidden_act: Activation,
    pub feature_act: Activation,
    pub adapter_act: Activation,
    /// When false the ETF branch reads the extractor features directly.
    pub use_adapter: bool,
}

impl Architecture {
    /// Two hidden layers of width 64 and `d = max(16, K)`.
    pub fn desk(input_dim: usize, k: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 64],
            feature_dim: 16.max(k),
            k,
            hidden_act: Activation::Tanh,
            feature_act: Activation::Identity,
            adapter_act: Activation::Tanh,
            use_adapter: true,
        }
    }
}

/// Feature extractor, learnable head, adapter and fixed ETF classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalcalModel {
    pub arch: Architecture,
    pub extractor: DenseNet,
    pub head: LinearHead,
    pub adapter: Adapter,
    pub etf: EtfClassifier,
}

/// Everything one forward pass produces, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    features: DenseCache,
    adapter: Option<AdapterCache>,
    pub logits_sta: Matrix,
    pub p_sta: Matrix,
    pub logits_etf: Matrix,
    pub p_etf: Matrix,
}

impl ForwardPass {
    pub fn features(&self) -> &Matrix {
        self.features.output()
    }

    /// Input to the ETF classifier (`z′`).
    pub fn adapted(&self) -> &Matrix {
        self.adapter.as_ref().map_or(self.features.output(), AdapterCache::output)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Losses {
    pub sta: f64,
    pub etf: f64,
    pub total: f64,
}

impl BalcalModel {
    /// Initializes all trainable parts from the init stream of `seed` and the
    /// ETF basis from its basis stream.
    pub fn new(arch: Architecture, beta: f64, seed: u64) -> Result<Self> {
        ensure!(
            arch.feature_dim >= arch.k,
            InvalidArgument,
            "feature dimension {} must be at least the class count {}",
            arch.feature_dim,
            arch.k
        );
        let mut r = rng::seeded(stream_seed(seed, Stream::Init));
        let extractor = DenseNet::new(
            arch.input_dim,
            &arch.hidden,
            arch.feature_dim,
            arch.hidden_act,
            arch.feature_act,
            &mut r,
        );
        let head = LinearHead::new(arch.feature_dim, arch.k, &mut r);
        let adapter = Adapter::new(arch.feature_dim, arch.adapter_act, &mut r);
        let etf = EtfClassifier::seeded(arch.feature_dim, arch.k, beta, stream_seed(seed, Stream::Basis))?;
        Ok(Self {
            arch,
            extractor,
            head,
            adapter,
            etf,
        })
    }

    pub fn k(&self) -> usize {
        self.arch.k
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardPass> {
        let features = self.extractor.forward_cached(x)?;
        let z = features.output();
        let logits_sta = self.head.logits(z)?;
        let p_sta = softmax_rows(&logits_sta)?;
        let adapter = if self.arch.use_adapter {
            Some(self.adapter.forward_cached(z)?)
        } else {
            None
        };
        let z_prime = adapter.as_ref().map_or(z, AdapterCache::output);
        let logits_etf = z_prime.matmul(self.etf.matrix())?;
        let p_etf = softmax_rows(&logits_etf)?;
        Ok(ForwardPass {
            features,
            adapter,
            logits_sta,
            p_sta,
            logits_etf,
            p_etf,
        })
    }

    /// `γ·L_sta + (1 − γ)·L_etf` with (possibly soft) labels.
    pub fn losses(&self, pass: &ForwardPass, labels: &Matrix, gamma: f64) -> Result<Losses> {
        let sta = cross_entropy(&pass.p_sta, labels)?;
        let etf = cross_entropy(&pass.p_etf, labels)?;
        Ok(Losses {
            sta,
            etf,
            total: gamma * sta + (1.0 - gamma) * etf,
        })
    }

    /// Gradients of the weighted loss, ordered like [`Parameterized::params`]:
    /// extractor, head, adapter.
    pub fn backward(&self, pass: &ForwardPass, labels: &Matrix, gamma: f64) -> Result<Gradients> {
        ensure!((0.0..=1.0).contains(&gamma), InvalidArgument, "gamma {gamma} outside [0, 1]");
        let z = pass.features.output();

        let d_logits_sta = softmax_ce_grad(&pass.p_sta, labels, gamma)?;
        let (head_grads, mut dz) = self.head.backward(z, &d_logits_sta)?;

        let d_logits_etf = softmax_ce_grad(&pass.p_etf, labels, 1.0 - gamma)?;
        let d_adapted = d_logits_etf.matmul_t(self.etf.matrix())?;
        let adapter_grads = match &pass.adapter {
            Some(cache) => {
                let (g, dz_etf) = self.adapter.backward(cache, &d_adapted)?;
                dz = dz.add(&dz_etf)?;
                g
            }
            None => {
                dz = dz.add(&d_adapted)?;
                Gradients(self.adapter.params().iter().map(|p| vec![0.0; p.len()]).collect())
            }
        };

        let (mut grads, _) = self.extractor.backward(&pass.features, &dz)?;
        grads.extend(head_grads);
        grads.extend(adapter_grads);
        Ok(grads)
    }

    /// Probabilities of both branches for inference.
    pub fn predict(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let pass = self.forward(x)?;
        Ok((pass.p_sta, pass.p_etf))
    }

    /// Raw logits of both branches.
    pub fn logits(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let pass = self.forward(x)?;
        Ok((pass.logits_sta, pass.logits_etf))
    }

    pub fn set_beta(&mut self, beta: f64) -> Result<()> {
        self.etf = self.etf.with_beta(beta)?;
        Ok(())
    }
}

impl Parameterized for BalcalModel {
    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.extractor.params();
        p.extend(self.head.params());
        p.extend(self.adapter.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.extractor.params_mut();
        p.extend(self.head.params_mut());
        p.extend(self.adapter.params_mut());
        p
    }
}

use crate::error::{ensure, Result};
use crate::matrix::Matrix;
use crate::nn::argmax;

/// Convex combination of the two classifiers' probability vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedPrediction {
    pub p_fused: Vec<f64>,
    pub predicted_class: usize,
    pub confidence: f64,
}

/// `p_fused = γ·p_sta + (1 − γ)·p_etf`
pub fn fused_probs(p_sta: &[f64], p_etf: &[f64], gamma: f64) -> Result<FusedPrediction> {
    ensure!((0.0..=1.0).contains(&gamma), InvalidArgument, "gamma {gamma} outside [0, 1]");
    ensure!(
        p_sta.len() == p_etf.len() && !p_sta.is_empty(),
        Shape,
        "probability vectors of length {} and {}",
        p_sta.len(),
        p_etf.len()
    );
    let p_fused: Vec<f64> = p_sta
        .iter()
        .zip(p_etf)
        .map(|(&s, &e)| gamma * s + (1.0 - gamma) * e)
        .collect();
    let predicted_class = argmax(&p_fused);
    Ok(FusedPrediction {
        confidence: p_fused[predicted_class],
        predicted_class,
        p_fused,
    })
}

/// Row-wise fusion of two probability matrices.
pub fn fuse_matrices(p_sta: &Matrix, p_etf: &Matrix, gamma: f64) -> Result<Matrix> {
    ensure!((0.0..=1.0).contains(&gamma), InvalidArgument, "gamma {gamma} outside [0, 1]");
    p_sta.zip_with(p_etf, |s, e| gamma * s + (1.0 - gamma) * e)
}

/// Per-sample probability pairs saved during one training epoch.
///
/// Stored flat (`n×K`, row-major). ETF logits are kept alongside the ETF
/// probabilities so the scaling factor can be searched without re-running
/// the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbPairLog {
    k: usize,
    p_sta: Vec<f64>,
    p_etf: Vec<f64>,
    etf_logits: Vec<f64>,
    labels: Vec<usize>,
    /// ETF scaling factor in force when the logits were recorded.
    beta: f64,
}

impl ProbPairLog {
    pub fn new(k: usize, beta: f64) -> Self {
        Self {
            k,
            p_sta: Vec::new(),
            p_etf: Vec::new(),
            etf_logits: Vec::new(),
            labels: Vec::new(),
            beta,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn p_sta(&self, i: usize) -> &[f64] {
        &self.p_sta[i * self.k..(i + 1) * self.k]
    }

    pub fn p_etf(&self, i: usize) -> &[f64] {
        &self.p_etf[i * self.k..(i + 1) * self.k]
    }

    pub fn etf_logits(&self, i: usize) -> &[f64] {
        &self.etf_logits[i * self.k..(i + 1) * self.k]
    }

    /// One record without ETF logits; the logits are reconstructed as `ln p_etf`,
    /// which differs from the true logits by a per-row constant.
    pub fn push(&mut self, p_sta: &[f64], p_etf: &[f64], label: usize) -> Result<()> {
        let logits: Vec<f64> = p_etf.iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect();
        self.push_with_logits(p_sta, p_etf, &logits, label)
    }

    pub fn push_with_logits(&mut self, p_sta: &[f64], p_etf: &[f64], etf_logits: &[f64], label: usize) -> Result<()> {
        ensure!(
            p_sta.len() == self.k && p_etf.len() == self.k && etf_logits.len() == self.k,
            Shape,
            "log record must have {} entries per vector",
            self.k
        );
        ensure!(label < self.k, InvalidArgument, "label {label} out of range for {} classes", self.k);
        for p in [p_sta, p_etf] {
            let s: f64 = p.iter().sum();
            ensure!((s - 1.0).abs() <= 1e-9, InvalidArgument, "probability vector sums to {s}");
        }
        self.p_sta.extend_from_slice(p_sta);
        self.p_etf.extend_from_slice(p_etf);
        self.etf_logits.extend_from_slice(etf_logits);
        self.labels.push(label);
        Ok(())
    }

    pub fn push_batch(&mut self, p_sta: &Matrix, p_etf: &Matrix, etf_logits: &Matrix, labels: &[usize]) -> Result<()> {
        ensure!(
            p_sta.rows() == labels.len() && p_etf.rows() == labels.len() && etf_logits.rows() == labels.len(),
            Shape,
            "batch of {} labels with {} / {} / {} probability rows",
            labels.len(),
            p_sta.rows(),
            p_etf.rows(),
            etf_logits.rows()
        );
        for (i, &y) in labels.iter().enumerate() {
            self.push_with_logits(p_sta.row(i), p_etf.row(i), etf_logits.row(i), y)?;
        }
        Ok(())
    }
}

/// Mean fused confidence and fused accuracy over the log.
pub fn epoch_conf_acc(log: &ProbPairLog, gamma: f64) -> Result<(f64, f64)> {
    ensure!(!log.is_empty(), Empty, "probability log is empty");
    ensure!((0.0..=1.0).contains(&gamma), InvalidArgument, "gamma {gamma} outside [0, 1]");
    let k = log.k;
    let mut conf = 0.0;
    let mut hits = 0usize;
    let mut fused = vec![0.0; k];
    for i in 0..log.len() {
        for ((f, &s), &e) in fused.iter_mut().zip(log.p_sta(i)).zip(log.p_etf(i)) {
            *f = gamma * s + (1.0 - gamma) * e;
        }
        let c = argmax(&fused);
        conf += fused[c];
        hits += usize::from(c == log.labels[i]);
    }
    let n = log.len() as f64;
    Ok((conf / n, hits as f64 / n))
}

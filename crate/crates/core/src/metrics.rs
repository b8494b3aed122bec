//! Evaluation quantities over a set of predictions.
//!
//! All metrics return fractions in `[0, 1]`; rendering as percentages is left
//! to the reporting layer.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::matrix::Matrix;
use crate::nn::{argmax, LOG_FLOOR};

pub const DEFAULT_BINS: usize = 15;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub pred: usize,
    pub confidence: f64,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn from_probs(probs: Vec<f64>, label: usize) -> Self {
        let pred = argmax(&probs);
        Self {
            label,
            pred,
            confidence: probs[pred],
            probs,
        }
    }

    #[inline]
    pub fn correct(&self) -> bool {
        self.pred == self.label
    }
}

/// The input to every metric. Confidence is always the max of the probability vector.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PredictionSet {
    preds: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(preds: Vec<Prediction>) -> Self {
        Self { preds }
    }

    pub fn from_probs(probs: &Matrix, labels: &[usize]) -> Result<Self> {
        ensure!(
            probs.rows() == labels.len(),
            Shape,
            "{} probability rows for {} labels",
            probs.rows(),
            labels.len()
        );
        Ok(Self {
            preds: (0..probs.rows())
                .map(|i| Prediction::from_probs(probs.row(i).to_vec(), labels[i]))
                .collect(),
        })
    }

    /// Confidence/correctness pairs only; the probability vector is the
    /// two-class vector `(c, 1 − c)` padded to nothing. Handy for metric tests.
    pub fn from_confidences(conf: &[f64], correct: &[bool]) -> Self {
        Self {
            preds: conf
                .iter()
                .zip(correct)
                .map(|(&c, &ok)| Prediction {
                    label: if ok { 0 } else { 1 },
                    pred: 0,
                    confidence: c,
                    probs: vec![c],
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prediction> {
        self.preds.iter()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.preds.iter().map(|p| p.confidence).collect()
    }

    fn require_nonempty(&self) -> Result<()> {
        ensure!(!self.preds.is_empty(), Empty, "prediction set is empty");
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let k = self.preds.first().map_or(0, |p| p.probs.len());
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["index".to_string(), "label".into(), "pred".into(), "confidence".into()];
        header.extend((0..k).map(|j| format!("p_{j}")));
        out.write_record(&header)?;
        for (i, p) in self.preds.iter().enumerate() {
            let mut rec = vec![i.to_string(), p.label.to_string(), p.pred.to_string(), p.confidence.to_string()];
            rec.extend(p.probs.iter().map(f64::to_string));
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("<prediction csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        ensure!(
            headers.len() >= 4
                && &headers[0] == "index"
                && &headers[1] == "label"
                && &headers[2] == "pred"
                && &headers[3] == "confidence",
            InvalidArgument,
            "prediction CSV header must start with index,label,pred,confidence"
        );
        let bad = |line: usize, msg: String| Error::Parse {
            path: "<prediction csv>".into(),
            line,
            msg,
        };
        let mut preds = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let int = |j: usize| -> Result<usize> {
                rec[j].parse().map_err(|e| bad(line, format!("column {j}: {e}")))
            };
            let float = |j: usize| -> Result<f64> {
                rec[j].parse().map_err(|e| bad(line, format!("column {j}: {e}")))
            };
            let probs = (4..rec.len()).map(float).collect::<Result<Vec<_>>>()?;
            preds.push(Prediction {
                label: int(1)?,
                pred: int(2)?,
                confidence: float(3)?,
                probs,
            });
        }
        Ok(Self { preds })
    }
}

pub fn accuracy(preds: &PredictionSet) -> Result<f64> {
    preds.require_nonempty()?;
    Ok(preds.iter().filter(|p| p.correct()).count() as f64 / preds.len() as f64)
}

pub fn mean_confidence(preds: &PredictionSet) -> Result<f64> {
    preds.require_nonempty()?;
    Ok(preds.iter().map(|p| p.confidence).sum::<f64>() / preds.len() as f64)
}

/// Shannon entropy in nats; `0·ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

pub fn mean_entropy(preds: &PredictionSet) -> Result<f64> {
    preds.require_nonempty()?;
    Ok(preds.iter().map(|p| entropy(&p.probs)).sum::<f64>() / preds.len() as f64)
}

/// Mean negative log-likelihood of the true label.
pub fn nll(preds: &PredictionSet) -> Result<f64> {
    preds.require_nonempty()?;
    let mut total = 0.0;
    for p in preds.iter() {
        ensure!(p.label < p.probs.len(), InvalidArgument, "label {} outside probability vector", p.label);
        total -= p.probs[p.label].max(LOG_FLOOR).ln();
    }
    Ok(total / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

impl Bin {
    pub fn gap(&self) -> f64 {
        (self.accuracy - self.confidence).abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub n: usize,
    pub bins: Vec<Bin>,
}

impl BinReport {
    /// `Σ |B_m|/n · |acc − conf|`
    pub fn weighted_gap(&self) -> f64 {
        self.bins
            .iter()
            .map(|b| b.count as f64 / self.n as f64 * b.gap())
            .sum()
    }

    /// Column-oriented JSON for plotting tools.
    pub fn to_plot_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n": self.n,
            "lower": self.bins.iter().map(|b| b.lower).collect::<Vec<_>>(),
            "upper": self.bins.iter().map(|b| b.upper).collect::<Vec<_>>(),
            "count": self.bins.iter().map(|b| b.count).collect::<Vec<_>>(),
            "accuracy": self.bins.iter().map(|b| b.accuracy).collect::<Vec<_>>(),
            "confidence": self.bins.iter().map(|b| b.confidence).collect::<Vec<_>>(),
            "ece": self.weighted_gap(),
        })
    }
}

/// Index of the equal-width bin on `(0, 1]` holding `c`; bins are left-open, right-closed.
fn fixed_bin(c: f64, bins: usize) -> usize {
    let idx = (c * bins as f64).ceil() as isize - 1;
    idx.clamp(0, bins as isize - 1) as usize
}

fn summarize(members: &[&Prediction], lower: f64, upper: f64) -> Bin {
    let count = members.len();
    let (accuracy, confidence) = if count == 0 {
        (0.0, 0.0)
    } else {
        let n = count as f64;
        (
            members.iter().filter(|p| p.correct()).count() as f64 / n,
            members.iter().map(|p| p.confidence).sum::<f64>() / n,
        )
    };
    Bin {
        lower,
        upper,
        count,
        accuracy,
        confidence,
    }
}

/// Equal-width reliability bins over `(0, 1]`.
pub fn reliability_bins(preds: &PredictionSet, bins: usize) -> Result<BinReport> {
    ensure!(bins >= 1, InvalidArgument, "need at least one bin");
    preds.require_nonempty()?;
    let mut members: Vec<Vec<&Prediction>> = vec![Vec::new(); bins];
    for p in preds.iter() {
        members[fixed_bin(p.confidence, bins)].push(p);
    }
    let width = 1.0 / bins as f64;
    Ok(BinReport {
        n: preds.len(),
        bins: members
            .iter()
            .enumerate()
            .map(|(m, ps)| summarize(ps, m as f64 * width, (m + 1) as f64 * width))
            .collect(),
    })
}

pub fn ece(preds: &PredictionSet, bins: usize) -> Result<f64> {
    Ok(reliability_bins(preds, bins)?.weighted_gap())
}

/// Equal-count bins over confidence-sorted samples. The first `n mod bins`
/// bins take one extra sample; ties keep input order.
pub fn adaptive_bins(preds: &PredictionSet, bins: usize) -> Result<BinReport> {
    ensure!(bins >= 1, InvalidArgument, "need at least one bin");
    ensure!(
        preds.len() >= bins,
        InvalidArgument,
        "adaptive binning needs at least as many samples ({}) as bins ({bins})",
        preds.len()
    );
    let mut sorted: Vec<&Prediction> = preds.iter().collect();
    sorted.sort_by(|a, b| a.confidence.total_cmp(&b.confidence));
    let n = sorted.len();
    let base = n / bins;
    let extra = n % bins;
    let mut out = Vec::with_capacity(bins);
    let mut start = 0;
    for m in 0..bins {
        let size = base + usize::from(m < extra);
        let chunk = &sorted[start..start + size];
        let lower = chunk.first().map_or(0.0, |p| p.confidence);
        let upper = chunk.last().map_or(0.0, |p| p.confidence);
        out.push(summarize(chunk, lower, upper));
        start += size;
    }
    Ok(BinReport { n, bins: out })
}

pub fn aece(preds: &PredictionSet, bins: usize) -> Result<f64> {
    Ok(adaptive_bins(preds, bins)?.weighted_gap())
}

/// Mann–Whitney AUROC with in-distribution as the positive class:
/// `P(s_in > s_out) + ½·P(s_in = s_out)`.
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    ensure!(!scores_in.is_empty(), Empty, "no in-distribution scores");
    ensure!(!scores_out.is_empty(), Empty, "no out-of-distribution scores");
    let mut out = scores_out.to_vec();
    out.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &s in scores_in {
        let below = out.partition_point(|&o| o < s);
        let not_above = out.partition_point(|&o| o <= s);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (scores_in.len() as f64 * scores_out.len() as f64))
}

/// False-positive rate on out-samples at the largest threshold `t` such that
/// at least 95% of in-samples satisfy `score ≥ t`.
pub fn fpr95(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    fpr_at_tpr(scores_in, scores_out, 0.95)
}

pub fn fpr_at_tpr(scores_in: &[f64], scores_out: &[f64], tpr: f64) -> Result<f64> {
    ensure!(!scores_in.is_empty(), Empty, "no in-distribution scores");
    ensure!(!scores_out.is_empty(), Empty, "no out-of-distribution scores");
    let mut sorted = scores_in.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    // smallest count of top in-samples whose fraction reaches the target
    let need = ((tpr * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let threshold = sorted[need.min(n) - 1];
    let fp = scores_out.iter().filter(|&&s| s >= threshold).count();
    Ok(fp as f64 / scores_out.len() as f64)
}

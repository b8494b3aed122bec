//! Searches for the balance factor γ and, in the ETF-only ablation, the
//! scaling factor β that bring training confidence to `δ · accuracy`.

use super::fusion::{epoch_conf_acc, ProbPairLog};
use crate::error::{ensure, Result};
use crate::nn::softmax;

const GRID_POINTS: usize = 1001;
const BISECT_STEPS: usize = 40;
const REFINE_STEPS: usize = 20;
const FLAT_TOL: f64 = 1e-9;

/// Default value returned when the objective does not depend on γ.
pub const GAMMA_TIE: f64 = 0.5;

/// `γ* = argmin_γ |conf(γ) − δ·acc(γ)|` over `[0, 1]`, evaluated on the saved
/// probability pairs.
///
/// `g(γ) = conf(γ) − δ·acc(γ)` is piecewise linear with jumps where the fused
/// argmax flips, so plain bisection is not enough. The search scans a
/// 1001-point grid, bisects `g` inside every grid cell where it changes sign,
/// and refines the best grid cell by halving on `|g|`. The best point seen
/// wins. A flat objective returns [`GAMMA_TIE`].
pub fn search_gamma(log: &ProbPairLog, delta: f64) -> Result<f64> {
    ensure!(!log.is_empty(), Empty, "probability log is empty");
    ensure!(delta > 0.0 && delta.is_finite(), InvalidArgument, "delta must be positive, got {delta}");

    let g = |gamma: f64| -> f64 {
        let (conf, acc) = epoch_conf_acc(log, gamma).expect("validated log and gamma");
        conf - delta * acc
    };

    let grid: Vec<f64> = (0..GRID_POINTS).map(|i| i as f64 / (GRID_POINTS - 1) as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&x| g(x)).collect();

    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
    if hi - lo <= FLAT_TOL {
        return Ok(GAMMA_TIE);
    }

    let mut best = Best::default();
    for (&x, &v) in grid.iter().zip(&values) {
        best.offer(x, v.abs());
    }

    // every visible sign change
    for i in 0..GRID_POINTS - 1 {
        let (mut a, mut b) = (grid[i], grid[i + 1]);
        let (mut ga, gb) = (values[i], values[i + 1]);
        if ga * gb >= 0.0 {
            continue;
        }
        for _ in 0..BISECT_STEPS {
            let m = 0.5 * (a + b);
            let gm = g(m);
            best.offer(m, gm.abs());
            if gm == 0.0 {
                break;
            }
            if ga * gm < 0.0 {
                b = m;
            } else {
                a = m;
                ga = gm;
            }
        }
    }

    // refine around the best grid cell
    let i_best = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .expect("non-empty grid");
    let mut a = grid[i_best.saturating_sub(1)];
    let mut b = grid[(i_best + 1).min(GRID_POINTS - 1)];
    for _ in 0..REFINE_STEPS {
        let m = 0.5 * (a + b);
        let left = 0.5 * (a + m);
        let right = 0.5 * (m + b);
        let (hl, hm, hr) = (g(left).abs(), g(m).abs(), g(right).abs());
        best.offer(left, hl);
        best.offer(m, hm);
        best.offer(right, hr);
        if hl <= hr {
            b = m;
        } else {
            a = m;
        }
    }

    Ok(best.x.clamp(0.0, 1.0))
}

#[derive(Clone, Copy)]
struct Best {
    x: f64,
    h: f64,
}

impl Default for Best {
    fn default() -> Self {
        Self {
            x: GAMMA_TIE,
            h: f64::INFINITY,
        }
    }
}

impl Best {
    fn offer(&mut self, x: f64, h: f64) {
        if h < self.h {
            self.x = x;
            self.h = h;
        }
    }
}

/// Lower end of the β search interval.
pub const BETA_MIN: f64 = 1e-3;

/// Mean ETF confidence and accuracy when the logged ETF logits are rescaled
/// from the logging-time β to `beta`.
pub fn etf_conf_acc(log: &ProbPairLog, beta: f64) -> Result<(f64, f64)> {
    ensure!(!log.is_empty(), Empty, "probability log is empty");
    ensure!(beta > 0.0, InvalidArgument, "beta must be positive, got {beta}");
    let scale = beta / log.beta();
    let mut conf = 0.0;
    let mut hits = 0usize;
    let mut scaled = vec![0.0; log.k()];
    for i in 0..log.len() {
        for (s, &l) in scaled.iter_mut().zip(log.etf_logits(i)) {
            *s = l * scale;
        }
        let p = softmax(&scaled)?;
        let c = crate::nn::argmax(&p);
        conf += p[c];
        hits += usize::from(c == log.labels()[i]);
    }
    let n = log.len() as f64;
    Ok((conf / n, hits as f64 / n))
}

/// `β* = argmin_β |conf(β) − δ·acc|` over `[1e-3, 4K]` for the ETF-only model.
///
/// Accuracy does not depend on β and confidence is nondecreasing in it, so
/// the objective has a single root when the endpoints bracket one; otherwise
/// the nearer endpoint is optimal.
pub fn search_beta(log: &ProbPairLog, delta: f64, k: usize) -> Result<f64> {
    ensure!(!log.is_empty(), Empty, "probability log is empty");
    ensure!(delta > 0.0 && delta.is_finite(), InvalidArgument, "delta must be positive, got {delta}");
    ensure!(k >= 2, InvalidArgument, "need at least 2 classes");
    let g = |beta: f64| -> Result<f64> {
        let (conf, acc) = etf_conf_acc(log, beta)?;
        Ok(conf - delta * acc)
    };
    let (mut a, mut b) = (BETA_MIN, 4.0 * k as f64);
    let (ga, gb) = (g(a)?, g(b)?);
    if ga >= 0.0 {
        return Ok(a);
    }
    if gb <= 0.0 {
        return Ok(b);
    }
    let mut best = Best { x: a, h: ga.abs() };
    best.offer(b, gb.abs());
    for _ in 0..60 {
        let m = 0.5 * (a + b);
        let gm = g(m)?;
        best.offer(m, gm.abs());
        if gm == 0.0 {
            break;
        }
        if gm < 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(best.x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_conf_with_perfect_accuracy_hits_endpoint() {
        // p_sta = (0.9, 0.1), p_etf = (0.5, 0.5): conf(γ) = 0.5 + 0.4γ, acc ≡ 1
        let mut log = ProbPairLog::new(2, 1.0);
        for _ in 0..4 {
            log.push(&[0.9, 0.1], &[0.5, 0.5], 0).unwrap();
        }
        let g = search_gamma(&log, 0.9).unwrap();
        assert!((g - 1.0).abs() < 1e-12, "{g}");
    }

    #[test]
    fn flat_objective_returns_half() {
        let mut log = ProbPairLog::new(3, 1.0);
        log.push(&[0.6, 0.3, 0.1], &[0.6, 0.3, 0.1], 0).unwrap();
        log.push(&[0.2, 0.2, 0.6], &[0.2, 0.2, 0.6], 1).unwrap();
        assert_eq!(search_gamma(&log, 0.95).unwrap(), 0.5);
    }

    #[test]
    fn output_in_unit_interval() {
        let mut log = ProbPairLog::new(2, 1.0);
        log.push(&[0.99, 0.01], &[0.55, 0.45], 1).unwrap();
        log.push(&[0.2, 0.8], &[0.45, 0.55], 1).unwrap();
        for delta in [0.1, 0.9, 1.5] {
            let g = search_gamma(&log, delta).unwrap();
            assert!((0.0..=1.0).contains(&g));
        }
    }

    #[test]
    fn overconfident_vs_underconfident_gives_interior_gamma() {
        // standard branch: confident and 80% right; ETF branch: near-uniform, same argmax
        let mut log = ProbPairLog::new(2, 1.0);
        for i in 0..10 {
            let label = if i < 8 { 0 } else { 1 };
            log.push(&[0.99, 0.01], &[0.55, 0.45], label).unwrap();
        }
        let g = search_gamma(&log, 0.95).unwrap();
        assert!(g > 0.0 && g < 1.0, "{g}");
        let (conf, acc) = epoch_conf_acc(&log, g).unwrap();
        assert!((conf - 0.95 * acc).abs() < 1e-9);
    }

    #[test]
    fn empty_log_rejected() {
        assert!(search_gamma(&ProbPairLog::new(2, 1.0), 0.9).is_err());
        assert!(search_beta(&ProbPairLog::new(2, 1.0), 0.9, 2).is_err());
    }

    fn etf_log(k: usize, n: usize) -> ProbPairLog {
        let mut log = ProbPairLog::new(k, 1.0);
        for i in 0..n {
            let mut logits = vec![0.0; k];
            let y = i % k;
            logits[y] = 0.3 + 0.05 * (i % 7) as f64;
            logits[(y + 1) % k] = 0.1;
            let p = softmax(&logits).unwrap();
            log.push_with_logits(&p, &p, &logits, y).unwrap();
        }
        log
    }

    #[test]
    fn beta_search_matches_target_confidence() {
        let log = etf_log(4, 40);
        let beta = search_beta(&log, 0.9, 4).unwrap();
        let (conf, acc) = etf_conf_acc(&log, beta).unwrap();
        assert_eq!(acc, 1.0);
        assert!((0.899..=0.901).contains(&conf), "{conf}");
    }

    #[test]
    fn beta_limits_and_argmax_invariance() {
        let log = etf_log(5, 25);
        let (c_small, a_small) = etf_conf_acc(&log, 1e-6).unwrap();
        let (c_big, a_big) = etf_conf_acc(&log, 1e4).unwrap();
        assert!((c_small - 0.2).abs() < 1e-4);
        assert!(c_big > 1.0 - 1e-6);
        assert_eq!(a_small, a_big);
    }
}

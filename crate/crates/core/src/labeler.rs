//! Stable/volatile regime labels.
//!
//! The window labeler is the max-minus-min fluctuation score of the future
//! target segment compared against a per-target cutoff. A two-state Gaussian
//! HMM over first differences is provided as a per-step alternative.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LabelError {
    #[error("fluctuation score of an empty segment")]
    EmptySegment,
    #[error("no training scores to derive a cutoff from")]
    EmptyScores,
    #[error("HMM fit needs at least 10 observations, got {0}")]
    TooShort(usize),
    #[error("malformed delta table: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeLabel {
    Stable,
    Volatile,
}

impl RegimeLabel {
    pub fn is_volatile(self) -> bool {
        self == RegimeLabel::Volatile
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RegimeLabel::Stable => "stable",
            RegimeLabel::Volatile => "volatile",
        }
    }
}

/// `max(y) − min(y)` over the future segment.
pub fn fluctuation_score(y_future: &[f64]) -> Result<f64, LabelError> {
    let (first, rest) = y_future.split_first().ok_or(LabelError::EmptySegment)?;
    let (lo, hi) = rest
        .iter()
        .fold((*first, *first), |(lo, hi), &y| (lo.min(y), hi.max(y)));
    Ok(hi - lo)
}

/// Volatile iff `score > delta` (strict).
pub fn threshold_label(score: f64, delta: f64) -> RegimeLabel {
    if score > delta {
        RegimeLabel::Volatile
    } else {
        RegimeLabel::Stable
    }
}

/// Nearest-rank 75th percentile of training-window scores.
pub fn default_delta(training_scores: &[f64]) -> Result<f64, LabelError> {
    nearest_rank_percentile(training_scores, 75.0)
}

pub fn nearest_rank_percentile(values: &[f64], pct: f64) -> Result<f64, LabelError> {
    if values.is_empty() {
        return Err(LabelError::EmptyScores);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Per-target cutoffs, as read from `{"delta": {"hr": 10.0, ...}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub delta: BTreeMap<String, f64>,
}

impl DeltaTable {
    pub fn from_json(s: &str) -> Result<Self, LabelError> {
        serde_json::from_str(s).map_err(|e| LabelError::Json(e.to_string()))
    }

    pub fn get(&self, target: &str) -> Option<f64> {
        self.delta.get(target).copied()
    }
}

// ---------------------------------------------------------------------------
// Two-state Gaussian HMM
// ---------------------------------------------------------------------------

const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmParams {
    /// Row-stochastic transition matrix.
    pub transition: [[f64; 2]; 2],
    pub means: [f64; 2],
    pub stds: [f64; 2],
    pub initial: [f64; 2],
}

impl HmmParams {
    /// Index of the state treated as volatile (larger emission variance).
    pub fn volatile_state(&self) -> usize {
        usize::from(self.stds[1] > self.stds[0])
    }

    fn log_emission(&self, state: usize, x: f64) -> f64 {
        let s = self.stds[state];
        let z = (x - self.means[state]) / s;
        -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

#[derive(Debug, Clone)]
pub struct HmmFit {
    pub params: HmmParams,
    /// Log-likelihood under the parameters entering each EM iteration, then the final one.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    /// Set when the signal has no spread; the params then describe a single regime.
    pub degenerate: bool,
}

/// Baum–Welch EM on a differenced signal.
pub fn hmm_fit(diff: &[f64], max_iter: usize, tol: f64, seed: u64) -> Result<HmmFit, LabelError> {
    if diff.len() < 10 {
        return Err(LabelError::TooShort(diff.len()));
    }
    let n = diff.len();
    let mean = diff.iter().sum::<f64>() / n as f64;
    let var = diff.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if var.sqrt() < SIGMA_FLOOR {
        return Ok(HmmFit {
            params: HmmParams {
                transition: [[1.0, 0.0], [0.0, 1.0]],
                means: [mean, mean],
                stds: [SIGMA_FLOOR, SIGMA_FLOOR],
                initial: [1.0, 0.0],
            },
            log_likelihoods: Vec::new(),
            iterations: 0,
            degenerate: true,
        });
    }

    // Initialise from the lower/upper halves of |diff|.
    let mut mags: Vec<f64> = diff.iter().map(|x| x.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let cut = mags[n / 2];
    let mut stats = [(0.0, 0.0, 0usize); 2];
    for &x in diff {
        let s = usize::from(x.abs() > cut);
        stats[s].0 += x;
        stats[s].1 += x * x;
        stats[s].2 += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = [mean; 2];
    let mut stds = [var.sqrt(); 2];
    for s in 0..2 {
        let (sum, sq, cnt) = stats[s];
        if cnt > 0 {
            let m = sum / cnt as f64;
            means[s] = m;
            stds[s] = (sq / cnt as f64 - m * m).max(0.0).sqrt().max(SIGMA_FLOOR);
        }
        means[s] += 1e-3 * var.sqrt() * (rng.random::<f64>() - 0.5);
    }
    if stds[0] == stds[1] {
        stds[1] *= 2.0;
    }
    let mut params = HmmParams {
        transition: [[0.95, 0.05], [0.05, 0.95]],
        means,
        stds,
        initial: [0.5, 0.5],
    };

    let mut lls = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter {
        let (ll, next) = em_step(diff, &params);
        iterations += 1;
        let done = lls.last().is_some_and(|&prev: &f64| ll - prev < tol);
        lls.push(ll);
        if done {
            break;
        }
        params = next;
    }
    // The last step's update was not applied when converged; report the final likelihood.
    let (final_ll, _) = em_step(diff, &params);
    if lls.last() != Some(&final_ll) {
        lls.push(final_ll);
    }
    Ok(HmmFit {
        params,
        log_likelihoods: lls,
        iterations,
        degenerate: false,
    })
}

/// One E+M step: log-likelihood of `params` and the re-estimated parameters.
fn em_step(x: &[f64], p: &HmmParams) -> (f64, HmmParams) {
    let n = x.len();
    let emit: Vec<[f64; 2]> = x
        .iter()
        .map(|&v| [p.log_emission(0, v).exp(), p.log_emission(1, v).exp()])
        .collect();

    // Scaled forward pass.
    let mut alpha = vec![[0.0; 2]; n];
    let mut scale = vec![0.0; n];
    for s in 0..2 {
        alpha[0][s] = p.initial[s] * emit[0][s];
    }
    normalize_step(&mut alpha[0], &mut scale[0]);
    for t in 1..n {
        for s in 0..2 {
            alpha[t][s] = (alpha[t - 1][0] * p.transition[0][s]
                + alpha[t - 1][1] * p.transition[1][s])
                * emit[t][s];
        }
        normalize_step(&mut alpha[t], &mut scale[t]);
    }
    let ll: f64 = scale.iter().map(|c| c.ln()).sum();

    // Scaled backward pass.
    let mut beta = vec![[1.0; 2]; n];
    for t in (0..n - 1).rev() {
        for s in 0..2 {
            beta[t][s] = (0..2)
                .map(|u| p.transition[s][u] * emit[t + 1][u] * beta[t + 1][u])
                .sum::<f64>()
                / scale[t + 1];
        }
    }

    let mut gamma_sum = [0.0; 2];
    let mut xi_sum = [[0.0; 2]; 2];
    let mut wsum = [0.0; 2];
    let mut wsq = [0.0; 2];
    let mut gamma0 = [0.0; 2];
    for t in 0..n {
        let g = [alpha[t][0] * beta[t][0], alpha[t][1] * beta[t][1]];
        let z = g[0] + g[1];
        for s in 0..2 {
            let gs = g[s] / z;
            if t == 0 {
                gamma0[s] = gs;
            }
            gamma_sum[s] += gs;
            wsum[s] += gs * x[t];
            wsq[s] += gs * x[t] * x[t];
        }
        if t + 1 < n {
            for s in 0..2 {
                for u in 0..2 {
                    xi_sum[s][u] +=
                        alpha[t][s] * p.transition[s][u] * emit[t + 1][u] * beta[t + 1][u]
                            / scale[t + 1];
                }
            }
        }
    }

    let mut next = p.clone();
    next.initial = gamma0;
    for s in 0..2 {
        let row: f64 = xi_sum[s][0] + xi_sum[s][1];
        if row > 0.0 {
            next.transition[s] = [xi_sum[s][0] / row, xi_sum[s][1] / row];
        }
        if gamma_sum[s] > 0.0 {
            let m = wsum[s] / gamma_sum[s];
            next.means[s] = m;
            next.stds[s] = (wsq[s] / gamma_sum[s] - m * m)
                .max(0.0)
                .sqrt()
                .max(SIGMA_FLOOR);
        }
    }
    (ll, next)
}

fn normalize_step(a: &mut [f64; 2], c: &mut f64) {
    let z = a[0] + a[1];
    // Underflow of both emissions: fall back to the uniform split.
    let z = if z > 0.0 { z } else { f64::MIN_POSITIVE };
    *c = z;
    a[0] /= z;
    a[1] /= z;
}

/// Viterbi path over the differenced signal. Entry `i` labels `y_{i+1}`.
pub fn hmm_decode(diff: &[f64], params: &HmmParams) -> Vec<RegimeLabel> {
    let n = diff.len();
    if n == 0 {
        return Vec::new();
    }
    let volatile = params.volatile_state();
    if params.stds[0] == params.stds[1] {
        return vec![RegimeLabel::Stable; n];
    }
    let lt = params.transition.map(|r| r.map(f64::ln));
    let mut delta = [0.0; 2];
    let mut back = vec![[0u8; 2]; n];
    for s in 0..2 {
        delta[s] = params.initial[s].ln() + params.log_emission(s, diff[0]);
    }
    for t in 1..n {
        let mut next = [0.0; 2];
        for s in 0..2 {
            let from0 = delta[0] + lt[0][s];
            let from1 = delta[1] + lt[1][s];
            let (best, arg) = if from1 > from0 {
                (from1, 1)
            } else {
                (from0, 0)
            };
            next[s] = best + params.log_emission(s, diff[t]);
            back[t][s] = arg;
        }
        delta = next;
    }
    let mut state = usize::from(delta[1] > delta[0]);
    let mut path = vec![0usize; n];
    for t in (0..n).rev() {
        path[t] = state;
        state = back[t][state] as usize;
    }
    path.into_iter()
        .map(|s| {
            if s == volatile {
                RegimeLabel::Volatile
            } else {
                RegimeLabel::Stable
            }
        })
        .collect()
}

/// Per-step labels for a raw series: fit on first differences, decode, and
/// give `y_0` the label of the first difference.
pub fn hmm_label_series(y: &[f64], seed: u64) -> Result<Vec<RegimeLabel>, LabelError> {
    let diff: Vec<f64> = y.windows(2).map(|w| w[1] - w[0]).collect();
    let fit = hmm_fit(&diff, 50, 1e-6, seed)?;
    let decoded = if fit.degenerate {
        vec![RegimeLabel::Stable; diff.len()]
    } else {
        hmm_decode(&diff, &fit.params)
    };
    let mut out = Vec::with_capacity(y.len());
    out.push(decoded[0]);
    out.extend(decoded);
    Ok(out)
}

//! Forecast metrics, report rendering and interpretability exports.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::model::{ForecastBundle, ModelError, OmniTft};
use crate::par::{self, Execution};
use crate::sampler::WindowSample;
use crate::schema::Schema;
use crate::trainer::pinball;

/// Actuals with `|y|` below this are left out of MAPE and RMBE.
pub const NEAR_ZERO: f64 = 1e-8;

pub const RMBE_DEFINITION: &str =
    "RMBE = 100 * mean(pred - actual) / mean(actual), signed relative mean bias";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("empty series")]
    EmptySeries,
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

fn check(pred: &[f64], actual: &[f64]) -> Result<(), EvalError> {
    if pred.len() != actual.len() {
        return Err(EvalError::LengthMismatch(pred.len(), actual.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::EmptySeries);
    }
    Ok(())
}

pub fn mae(pred: &[f64], actual: &[f64]) -> Result<f64, EvalError> {
    check(pred, actual)?;
    Ok(pred
        .iter()
        .zip(actual)
        .map(|(p, y)| (p - y).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn rmse(pred: &[f64], actual: &[f64]) -> Result<f64, EvalError> {
    check(pred, actual)?;
    Ok((pred
        .iter()
        .zip(actual)
        .map(|(p, y)| (p - y).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
        .sqrt())
}

/// A percentage metric that may be undefined when every actual is near zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentage {
    pub value: Option<f64>,
    /// Points left out because `|y| < 1e-8`.
    pub excluded: usize,
}

/// `100 · mean(|ŷ − y| / |y|)` over points with `|y| ≥ 1e-8`.
pub fn mape(pred: &[f64], actual: &[f64]) -> Result<Percentage, EvalError> {
    check(pred, actual)?;
    let kept: Vec<(f64, f64)> = pred
        .iter()
        .zip(actual)
        .filter(|(_, y)| y.abs() >= NEAR_ZERO)
        .map(|(&p, &y)| (p, y))
        .collect();
    let excluded = pred.len() - kept.len();
    let value = (!kept.is_empty()).then(|| {
        100.0
            * kept
                .iter()
                .map(|(p, y)| (p - y).abs() / y.abs())
                .sum::<f64>()
            / kept.len() as f64
    });
    Ok(Percentage { value, excluded })
}

/// `100 · mean(ŷ − y) / mean(y)` over points with `|y| ≥ 1e-8`.
pub fn rmbe(pred: &[f64], actual: &[f64]) -> Result<Percentage, EvalError> {
    check(pred, actual)?;
    let kept: Vec<(f64, f64)> = pred
        .iter()
        .zip(actual)
        .filter(|(_, y)| y.abs() >= NEAR_ZERO)
        .map(|(&p, &y)| (p, y))
        .collect();
    let excluded = pred.len() - kept.len();
    let n = kept.len() as f64;
    let mean_y = kept.iter().map(|(_, y)| y).sum::<f64>() / n;
    let value = (!kept.is_empty() && mean_y.abs() >= NEAR_ZERO)
        .then(|| 100.0 * (kept.iter().map(|(p, y)| p - y).sum::<f64>() / n) / mean_y);
    Ok(Percentage { value, excluded })
}

/// Mean pinball loss of a single quantile track.
pub fn pinball_at(q: f64, pred_q: &[f64], actual: &[f64]) -> Result<f64, EvalError> {
    check(pred_q, actual)?;
    Ok(pred_q
        .iter()
        .zip(actual)
        .map(|(p, y)| pinball(q, *y, *p))
        .sum::<f64>()
        / actual.len() as f64)
}

/// Fraction of actuals at or below the quantile track.
pub fn coverage_below(pred_q: &[f64], actual: &[f64]) -> Result<f64, EvalError> {
    check(pred_q, actual)?;
    Ok(pred_q.iter().zip(actual).filter(|(p, y)| y <= p).count() as f64 / actual.len() as f64)
}

/// Anything that turns a window into a forecast bundle.
pub trait Forecaster: Sync {
    fn forecast(&self, window: &WindowSample) -> Result<ForecastBundle, ModelError>;
}

impl Forecaster for OmniTft {
    fn forecast(&self, window: &WindowSample) -> Result<ForecastBundle, ModelError> {
        self.predict(window)
    }
}

/// One evaluated window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowForecast {
    pub patient_id: String,
    pub start: usize,
    pub target: usize,
    pub history: Vec<f64>,
    pub actual: Vec<f64>,
    pub bundle: ForecastBundle,
}

impl WindowForecast {
    pub fn mae(&self) -> f64 {
        mae(&self.bundle.track(1), &self.actual).unwrap_or(f64::NAN)
    }
}

pub fn forecast_all<F: Forecaster>(
    model: &F,
    windows: &[WindowSample],
    exec: Execution,
) -> Result<Vec<WindowForecast>, ModelError> {
    par::map(exec, windows, |w| {
        Ok(WindowForecast {
            patient_id: w.patient_id.clone(),
            start: w.start,
            target: w.target,
            history: w.target_history(),
            actual: w.target_future(),
            bundle: model.forecast(w)?,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub target: String,
    pub n_points: usize,
    pub mae: f64,
    pub mape: Percentage,
    pub rmse: f64,
    pub rmbe: Percentage,
    pub p10_coverage: f64,
    pub p10_pinball: f64,
    pub p90_coverage: f64,
    pub p90_pinball: f64,
    /// Horizon steps whose raw quantiles crossed before sorting.
    pub crossed_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmbe_definition: String,
    /// Interval metrics use per-step sorted quantiles.
    pub interval_metrics_sorted: bool,
    pub targets: Vec<TargetMetrics>,
}

/// Point metrics on the median track, interval metrics on the sorted lower
/// and upper tracks, per target in schema order.
pub fn metric_report(
    forecasts: &[WindowForecast],
    schema: &Schema,
    quantiles: &[f64],
) -> Result<MetricReport, EvalError> {
    let mut targets = Vec::new();
    for &target in schema.targets() {
        let mut p50 = Vec::new();
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        let mut actual = Vec::new();
        let mut crossed_steps = 0;
        for f in forecasts.iter().filter(|f| f.target == target) {
            for (q, &y) in f.bundle.quantiles.iter().zip(&f.actual) {
                let mut s = *q;
                s.sort_by(f64::total_cmp);
                crossed_steps += usize::from(s != *q);
                p50.push(q[1]);
                lo.push(s[0]);
                hi.push(s[2]);
                actual.push(y);
            }
        }
        if actual.is_empty() {
            continue;
        }
        targets.push(TargetMetrics {
            target: schema.feature(target).name.clone(),
            n_points: actual.len(),
            mae: mae(&p50, &actual)?,
            mape: mape(&p50, &actual)?,
            rmse: rmse(&p50, &actual)?,
            rmbe: rmbe(&p50, &actual)?,
            p10_coverage: coverage_below(&lo, &actual)?,
            p10_pinball: pinball_at(quantiles[0], &lo, &actual)?,
            p90_coverage: coverage_below(&hi, &actual)?,
            p90_pinball: pinball_at(quantiles[2], &hi, &actual)?,
            crossed_steps,
        });
    }
    Ok(MetricReport {
        rmbe_definition: RMBE_DEFINITION.to_string(),
        interval_metrics_sorted: true,
        targets,
    })
}

/// `"MAE (MAPE)"` with two decimals; an undefined MAPE renders as `>1`.
pub fn format_cell(mae: f64, mape: Option<f64>) -> String {
    match mape {
        Some(p) => format!("{mae:.2} ({p:.2})"),
        None => format!("{mae:.2} (>1)"),
    }
}

fn fmt_pct(p: &Percentage) -> String {
    p.value
        .map_or_else(|| ">1".to_string(), |v| format!("{v:.2}"))
}

/// Aligned text table, one row per target.
pub fn render_table(report: &MetricReport) -> String {
    let header = [
        "target",
        "MAE (MAPE%)",
        "RMSE",
        "RMBE%",
        "P10 cov",
        "P10 pinball",
        "P90 cov",
        "P90 pinball",
        "n",
    ];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for t in &report.targets {
        rows.push(vec![
            t.target.clone(),
            format_cell(t.mae, t.mape.value),
            format!("{:.2}", t.rmse),
            fmt_pct(&t.rmbe),
            format!("{:.3}", t.p10_coverage),
            format!("{:.3}", t.p10_pinball),
            format!("{:.3}", t.p90_coverage),
            format!("{:.3}", t.p90_pinball),
            t.n_points.to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| {
                if c == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out.push_str(&format!("# {}\n", report.rmbe_definition));
    out
}

// ---------------------------------------------------------------------------
// Importance

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub target: String,
    pub feature: String,
    pub score: f64,
    /// 1 = most important within the target.
    pub rank: usize,
    /// Std / mean across runs; `None` for a single run.
    pub cv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub rows: Vec<ImportanceRow>,
}

/// Per-target importance: past selection weights at each encoder step,
/// weighted by the attention mass the decoder rows of `Ā` place on that step,
/// averaged over windows and normalized to sum to 1.
pub fn aggregate_importance(forecasts: &[WindowForecast], schema: &Schema) -> ImportanceTable {
    let e = schema.encoder_len();
    let n = schema.n_past();
    let mut per_target: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for f in forecasts {
        let a = &f.bundle.attention;
        let w = &f.bundle.past_weights;
        let rows = e..a.rows();
        let mass: Vec<f64> = (0..e)
            .map(|tau| rows.clone().map(|r| a.get(r, tau)).sum::<f64>() / rows.len() as f64)
            .collect();
        let total: f64 = mass.iter().sum();
        let entry = per_target
            .entry(f.target)
            .or_insert_with(|| (vec![0.0; n], 0));
        for j in 0..n {
            let s = if total > 0.0 {
                (0..e).map(|tau| mass[tau] * w.get(tau, j)).sum::<f64>() / total
            } else {
                (0..e).map(|tau| w.get(tau, j)).sum::<f64>() / e as f64
            };
            entry.0[j] += s;
        }
        entry.1 += 1;
    }
    let mut rows = Vec::new();
    for (target, (scores, _)) in per_target {
        let total: f64 = scores.iter().sum();
        let norm: Vec<f64> = scores
            .iter()
            .map(|s| {
                if total > 0.0 {
                    s / total
                } else {
                    1.0 / n as f64
                }
            })
            .collect();
        rows.extend(ranked(schema, target, &norm, None));
    }
    ImportanceTable { rows }
}

fn ranked(
    schema: &Schema,
    target: usize,
    scores: &[f64],
    cv: Option<&[f64]>,
) -> Vec<ImportanceRow> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut rank = vec![0; scores.len()];
    for (r, &j) in order.iter().enumerate() {
        rank[j] = r + 1;
    }
    schema
        .past_features()
        .iter()
        .enumerate()
        .map(|(j, &f)| ImportanceRow {
            target: schema.feature(target).name.clone(),
            feature: schema.feature(f).name.clone(),
            score: scores[j],
            rank: rank[j],
            cv: cv.map(|c| c[j]),
        })
        .collect()
}

/// Mean importance across runs (seeds or folds) with the coefficient of
/// variation `std / mean` of each score.
pub fn combine_runs(runs: &[ImportanceTable], schema: &Schema) -> ImportanceTable {
    let mut rows = Vec::new();
    for &target in schema.targets() {
        let name = &schema.feature(target).name;
        let per_run: Vec<Vec<f64>> = runs
            .iter()
            .map(|t| {
                t.rows
                    .iter()
                    .filter(|r| &r.target == name)
                    .map(|r| r.score)
                    .collect::<Vec<_>>()
            })
            .filter(|v| !v.is_empty())
            .collect();
        if per_run.is_empty() {
            continue;
        }
        let k = per_run.len() as f64;
        let n = schema.n_past();
        let mean: Vec<f64> = (0..n)
            .map(|j| per_run.iter().map(|r| r[j]).sum::<f64>() / k)
            .collect();
        let cv: Vec<f64> = (0..n)
            .map(|j| {
                let var = per_run
                    .iter()
                    .map(|r| (r[j] - mean[j]).powi(2))
                    .sum::<f64>()
                    / k;
                if mean[j] > 0.0 {
                    var.sqrt() / mean[j]
                } else {
                    0.0
                }
            })
            .collect();
        rows.extend(ranked(
            schema,
            target,
            &mean,
            (per_run.len() > 1).then_some(&cv[..]),
        ));
    }
    ImportanceTable { rows }
}

pub fn write_importance_csv<W: Write>(out: W, table: &ImportanceTable) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| std::io::Error::other(e);
    w.write_record(["target", "feature", "score", "rank", "cv"])
        .map_err(io)?;
    for r in &table.rows {
        w.write_record([
            r.target.clone(),
            r.feature.clone(),
            format!("{:.6}", r.score),
            r.rank.to_string(),
            r.cv.map_or_else(String::new, |c| format!("{c:.6}")),
        ])
        .map_err(io)?;
    }
    w.flush()
}

// ---------------------------------------------------------------------------
// Trajectories

/// Index of the value nearest the mean (first on ties).
pub fn nearest_to_mean(values: &[f64]) -> Option<usize> {
    if values.is_empty() {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, v)| {
            let d = (v - mean).abs();
            match best {
                Some((_, bd)) if bd <= d => best,
                _ => Some((i, d)),
            }
        })
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub t: usize,
    pub history: Option<f64>,
    pub actual_future: Option<f64>,
    pub p10: Option<f64>,
    pub p50: Option<f64>,
    pub p90: Option<f64>,
}

/// `E + H` plot rows: history over the encoder, actuals and sorted quantiles over the horizon.
pub fn trajectory_rows(f: &WindowForecast) -> Vec<TrajectoryRow> {
    let (sorted, _) = f.bundle.sorted_quantiles();
    let e = f.history.len();
    let mut rows: Vec<TrajectoryRow> = f
        .history
        .iter()
        .enumerate()
        .map(|(t, &y)| TrajectoryRow {
            t,
            history: Some(y),
            actual_future: None,
            p10: None,
            p50: None,
            p90: None,
        })
        .collect();
    rows.extend(
        f.actual
            .iter()
            .zip(&sorted)
            .enumerate()
            .map(|(h, (&y, q))| TrajectoryRow {
                t: e + h,
                history: None,
                actual_future: Some(y),
                p10: Some(q[0]),
                p50: Some(q[1]),
                p90: Some(q[2]),
            }),
    );
    rows
}

/// Per target, the window whose MAE is closest to the cohort mean MAE.
pub fn representative_windows(
    forecasts: &[WindowForecast],
    schema: &Schema,
) -> Vec<(String, usize)> {
    schema
        .targets()
        .iter()
        .filter_map(|&target| {
            let idx: Vec<usize> = (0..forecasts.len())
                .filter(|&i| forecasts[i].target == target)
                .collect();
            let maes: Vec<f64> = idx.iter().map(|&i| forecasts[i].mae()).collect();
            nearest_to_mean(&maes).map(|k| (schema.feature(target).name.clone(), idx[k]))
        })
        .collect()
}

pub fn write_trajectory_csv<W: Write>(out: W, rows: &[TrajectoryRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| std::io::Error::other(e);
    w.write_record(["t", "history", "actual_future", "p10", "p50", "p90"])
        .map_err(io)?;
    let cell = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
    for r in rows {
        w.write_record([
            r.t.to_string(),
            cell(r.history),
            cell(r.actual_future),
            cell(r.p10),
            cell(r.p50),
            cell(r.p90),
        ])
        .map_err(io)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::schema::{DatasetSchema, FeatureSpec, Role};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn point_metric_fixture() {
        let (p, y) = ([1.0, 2.0, 3.0], [2.0, 2.0, 5.0]);
        assert!((mae(&p, &y).unwrap() - 1.0).abs() < 1e-12);
        assert!((rmse(&p, &y).unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((mape(&p, &y).unwrap().value.unwrap() - 30.0).abs() < 1e-9);
        let perfect =
            mae(&y, &y).unwrap() + rmse(&y, &y).unwrap() + mape(&y, &y).unwrap().value.unwrap();
        assert_eq!(perfect, 0.0);
        assert_eq!(rmbe(&y, &y).unwrap().value, Some(0.0));
        assert_eq!(mae(&[], &[]), Err(EvalError::EmptySeries));
    }

    #[test]
    fn shifted_prediction() {
        let y = [2.0, 4.0, 9.0];
        let c = -0.75;
        let p: Vec<f64> = y.iter().map(|v| v + c).collect();
        assert!((mae(&p, &y).unwrap() - 0.75).abs() < 1e-12);
        assert!((rmbe(&p, &y).unwrap().value.unwrap() - 100.0 * c / 5.0).abs() < 1e-12);
    }

    #[test]
    fn near_zero_actuals() {
        let m = mape(&[1.0, 2.0], &[0.0, 4.0]).unwrap();
        assert_eq!(m.excluded, 1);
        assert!((m.value.unwrap() - 50.0).abs() < 1e-12);
        let m = mape(&[1.0], &[1e-9]).unwrap();
        assert_eq!(
            m,
            Percentage {
                value: None,
                excluded: 1
            }
        );
        assert_eq!(format_cell(0.3, m.value), "0.30 (>1)");
    }

    #[test]
    fn cell_format() {
        assert_eq!(format_cell(5.05, Some(6.67)), "5.05 (6.67)");
        let y = [75.0, 76.0, 76.2];
        let p = [80.05, 70.95, 81.25];
        let cell = format_cell(mae(&p, &y).unwrap(), mape(&p, &y).unwrap().value);
        assert_eq!(cell, "5.05 (6.67)");
    }

    #[test]
    fn quantile_metrics() {
        assert_eq!(coverage_below(&[1e300; 3], &[1.0, 5.0, -2.0]).unwrap(), 1.0);
        let (p, y) = ([1.0, 2.0, 3.0], [2.0, 2.0, 5.0]);
        assert!((pinball_at(0.5, &p, &y).unwrap() - 0.5 * mae(&p, &y).unwrap()).abs() < 1e-12);
        // 0.9·1 + 0 + 0.9·2 over three points.
        assert!((pinball_at(0.9, &p, &y).unwrap() - 0.9).abs() < 1e-12);
        assert!((coverage_below(&p, &y).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn calibrated_gaussian_coverage() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = Normal::new(0.0, 1.0).unwrap();
        let y: Vec<f64> = (0..10_000).map(|_| n.sample(&mut rng)).collect();
        let z90 = 1.2815515655446004;
        let c10 = coverage_below(&vec![-z90; y.len()], &y).unwrap();
        let c90 = coverage_below(&vec![z90; y.len()], &y).unwrap();
        assert!((c10 - 0.1).abs() <= 0.03, "{c10}");
        assert!((c90 - 0.9).abs() <= 0.03, "{c90}");
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(v in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..40)) {
            let (p, y): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            prop_assert!(rmse(&p, &y).unwrap() + 1e-12 >= mae(&p, &y).unwrap());
        }

        #[test]
        fn metrics_are_permutation_invariant(
            v in prop::collection::vec((-100.0f64..100.0, 1.0f64..100.0), 2..30),
            rot in 0usize..30,
        ) {
            let (p, y): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let k = rot % p.len();
            let mut p2 = p.clone();
            let mut y2 = y.clone();
            p2.rotate_left(k);
            y2.rotate_left(k);
            prop_assert!((mae(&p, &y).unwrap() - mae(&p2, &y2).unwrap()).abs() < 1e-9);
            prop_assert!((rmse(&p, &y).unwrap() - rmse(&p2, &y2).unwrap()).abs() < 1e-9);
            prop_assert_eq!(coverage_below(&p, &y).unwrap(), coverage_below(&p2, &y2).unwrap());
        }

        #[test]
        fn coverage_is_monotone_in_the_track(
            v in prop::collection::vec((-10.0f64..10.0, 0.0f64..5.0, 0.0f64..5.0, -10.0f64..10.0), 1..30),
        ) {
            let lo: Vec<f64> = v.iter().map(|x| x.0).collect();
            let mid: Vec<f64> = v.iter().map(|x| x.0 + x.1).collect();
            let hi: Vec<f64> = v.iter().map(|x| x.0 + x.1 + x.2).collect();
            let y: Vec<f64> = v.iter().map(|x| x.3).collect();
            let (a, b, c) = (coverage_below(&lo, &y).unwrap(), coverage_below(&mid, &y).unwrap(), coverage_below(&hi, &y).unwrap());
            prop_assert!(a <= b && b <= c);
        }
    }

    #[test]
    fn nearest_to_mean_example() {
        assert_eq!(nearest_to_mean(&[1.0, 2.0, 9.0]), Some(1));
        assert_eq!(nearest_to_mean(&[]), None);
    }

    fn schema(n_obs: usize) -> Schema {
        let mut features = vec![FeatureSpec::continuous("y", Role::Target, "")];
        for j in 0..n_obs {
            features.push(FeatureSpec::continuous(
                &format!("x{j}"),
                Role::ObservedPast,
                "",
            ));
        }
        DatasetSchema {
            features,
            grid_step_min: 60.0,
            encoder_len: 3,
            horizon_len: 2,
        }
        .validate()
        .unwrap()
    }

    fn forecast(weights: Vec<f64>, n: usize, actual: Vec<f64>, q: Vec<[f64; 3]>) -> WindowForecast {
        let mut a = Tensor::zeros(5, 5);
        for r in 0..5 {
            for c in 0..=r {
                a.set(r, c, 1.0 / (r + 1) as f64);
            }
        }
        WindowForecast {
            patient_id: "p".into(),
            start: 0,
            target: 0,
            history: vec![1.0, 2.0, 3.0],
            actual,
            bundle: ForecastBundle {
                target: 0,
                quantiles: q,
                attention: a,
                attention_heads: vec![],
                past_weights: Tensor::new(3, n, weights).unwrap(),
                future_weights: None,
                decoder_states: Tensor::zeros(2, 2),
                anchor_state: Tensor::zeros(1, 2),
            },
        }
    }

    #[test]
    fn importance_single_feature_and_normalization() {
        let s = schema(0);
        let f = forecast(vec![1.0; 3], 1, vec![1.0, 2.0], vec![[0.0; 3]; 2]);
        let t = aggregate_importance(&[f], &s);
        assert_eq!(t.rows.len(), 1);
        assert!((t.rows[0].score - 1.0).abs() < 1e-12);

        let s = schema(2);
        let f1 = forecast(
            vec![0.2, 0.5, 0.3, 0.6, 0.2, 0.2, 0.1, 0.1, 0.8],
            3,
            vec![1.0, 2.0],
            vec![[0.0; 3]; 2],
        );
        let f2 = forecast(
            vec![0.3, 0.3, 0.4, 0.3, 0.3, 0.4, 0.3, 0.3, 0.4],
            3,
            vec![1.0, 2.0],
            vec![[0.0; 3]; 2],
        );
        let t = aggregate_importance(&[f1, f2], &s);
        let total: f64 = t.rows.iter().map(|r| r.score).sum();
        assert!((total - 1.0).abs() < 1e-9);
        let mut ranks: Vec<usize> = t.rows.iter().map(|r| r.rank).collect();
        ranks.sort_unstable();
        assert_eq!(ranks, vec![1, 2, 3]);
        let both = combine_runs(&[t.clone(), t.clone()], &s);
        assert!(both.rows.iter().all(|r| r.cv == Some(0.0)));
        assert_eq!(combine_runs(&[t], &s).rows[0].cv, None);
    }

    #[test]
    fn report_and_trajectories() {
        let s = schema(0);
        let fs = vec![
            forecast(
                vec![1.0; 3],
                1,
                vec![1.0, 2.0],
                vec![[0.5, 1.0, 1.5], [2.5, 2.0, 1.5]],
            ),
            forecast(
                vec![1.0; 3],
                1,
                vec![3.0, 4.0],
                vec![[2.0, 3.0, 4.0], [3.0, 5.0, 6.0]],
            ),
        ];
        let r = metric_report(&fs, &s, &[0.1, 0.5, 0.9]).unwrap();
        let m = &r.targets[0];
        assert_eq!(m.n_points, 4);
        assert_eq!(m.crossed_steps, 1);
        assert!((m.mae - 0.25).abs() < 1e-12);
        assert_eq!(m.p90_coverage, 1.0);
        let table = render_table(&r);
        assert!(table.contains("0.25 (6.25)"), "{table}");
        let rows = trajectory_rows(&fs[0]);
        assert_eq!(rows.len(), 5);
        assert!(rows[3..].iter().all(|r| r.p10 <= r.p50 && r.p50 <= r.p90));
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &rows).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("t,history,actual_future,p10,p50,p90\n0,1,,,,\n"));
        assert_eq!(representative_windows(&fs, &s), vec![("y".to_string(), 0)]);
    }

    struct Oracle;

    impl Forecaster for Oracle {
        fn forecast(&self, w: &WindowSample) -> Result<ForecastBundle, ModelError> {
            let e = w.encoder_len();
            let t = e + w.horizon_len();
            let mut a = Tensor::zeros(t, t);
            for r in 0..t {
                a.set(r, r, 1.0);
            }
            Ok(ForecastBundle {
                target: w.target,
                quantiles: w.target_future().iter().map(|&y| [y; 3]).collect(),
                attention: a,
                attention_heads: vec![],
                past_weights: Tensor::filled(e, 2, 0.5),
                future_weights: None,
                decoder_states: Tensor::zeros(w.horizon_len(), 1),
                anchor_state: Tensor::zeros(1, 1),
            })
        }
    }

    #[test]
    fn perfect_oracle_scores_zero() {
        let s = schema(1);
        let rows: Vec<f64> = (0..5).flat_map(|t| [t as f64 + 1.0, 0.5]).collect();
        let w = WindowSample::from_rows("p", 0, 3, 2, 2, rows, 1.0);
        let fs = forecast_all(&Oracle, &[w.clone(), w], Execution::Sequential).unwrap();
        let r = metric_report(&fs, &s, &[0.1, 0.5, 0.9]).unwrap();
        assert_eq!(r.targets[0].mae, 0.0);
        assert!(render_table(&r).contains("0.00 (0.00)"));
    }
}

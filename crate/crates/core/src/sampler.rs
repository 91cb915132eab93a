//! Sliding-window enumeration and regime-balanced epochs.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::ingest::PatientSeries;
use crate::labeler::{fluctuation_score, threshold_label, RegimeLabel};
use crate::schema::Schema;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SamplerError {
    #[error("series {patient:?} has {len} steps, window needs {needed}")]
    SeriesTooShort {
        patient: String,
        len: usize,
        needed: usize,
    },
    #[error("series {0:?} still has missing values")]
    MissingValues(String),
}

/// One encoder + horizon slice of a patient series, labeled for one target.
///
/// Rows hold every schema feature; the model reads only the columns its role
/// allows (e.g. known-future columns of `future`).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub patient_id: String,
    /// Row index in the (trimmed) series where the encoder segment begins.
    pub start: usize,
    /// Schema index of the target this window is labeled and scored for.
    pub target: usize,
    pub label: RegimeLabel,
    pub score: f64,
    n_features: usize,
    encoder_len: usize,
    horizon_len: usize,
    /// `(E + H) × F`, row-major.
    rows: Vec<f64>,
}

impl WindowSample {
    pub fn encoder_len(&self) -> usize {
        self.encoder_len
    }

    pub fn horizon_len(&self) -> usize {
        self.horizon_len
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Value at window step `t` (`0..E+H`) of feature `f`.
    #[inline]
    pub fn value(&self, t: usize, f: usize) -> f64 {
        self.rows[t * self.n_features + f]
    }

    pub fn encoder_value(&self, t: usize, f: usize) -> f64 {
        debug_assert!(t < self.encoder_len);
        self.value(t, f)
    }

    pub fn future_value(&self, h: usize, f: usize) -> f64 {
        debug_assert!(h < self.horizon_len);
        self.value(self.encoder_len + h, f)
    }

    /// Static value (taken from the first row).
    pub fn static_value(&self, f: usize) -> f64 {
        self.value(0, f)
    }

    pub fn target_history(&self) -> Vec<f64> {
        (0..self.encoder_len)
            .map(|t| self.value(t, self.target))
            .collect()
    }

    pub fn target_future(&self) -> Vec<f64> {
        (0..self.horizon_len)
            .map(|h| self.future_value(h, self.target))
            .collect()
    }

    /// Builds a window directly from rows (tests and synthetic fixtures).
    pub fn from_rows(
        patient_id: impl Into<String>,
        target: usize,
        encoder_len: usize,
        horizon_len: usize,
        n_features: usize,
        rows: Vec<f64>,
        delta: f64,
    ) -> Self {
        assert_eq!(rows.len(), (encoder_len + horizon_len) * n_features);
        let mut w = Self {
            patient_id: patient_id.into(),
            start: 0,
            target,
            label: RegimeLabel::Stable,
            score: 0.0,
            n_features,
            encoder_len,
            horizon_len,
            rows,
        };
        w.score = fluctuation_score(&w.target_future()).expect("horizon is non-empty");
        w.label = threshold_label(w.score, delta);
        w
    }

    pub fn relabel(&mut self, delta: f64) {
        self.label = threshold_label(self.score, delta);
    }
}

/// Fluctuation scores of every window start (stride 1), for cutoff estimation.
pub fn window_scores(series: &PatientSeries, schema: &Schema, target: usize) -> Vec<f64> {
    let (e, t_len) = (schema.encoder_len(), schema.window_len());
    if series.len() < t_len {
        return Vec::new();
    }
    let y = series.column(target);
    (0..=series.len() - t_len)
        .map(|s| fluctuation_score(&y[s + e..s + t_len]).expect("non-empty horizon"))
        .collect()
}

/// One window per start index `0, stride, 2·stride, …` up to `n − T`,
/// labeled by the fluctuation score of its future target slice.
pub fn enumerate_windows(
    series: &PatientSeries,
    schema: &Schema,
    target: usize,
    delta: f64,
    stride: usize,
) -> Result<Vec<WindowSample>, SamplerError> {
    let t_len = schema.window_len();
    if series.len() < t_len {
        return Err(SamplerError::SeriesTooShort {
            patient: series.patient_id.clone(),
            len: series.len(),
            needed: t_len,
        });
    }
    if series.has_missing() {
        return Err(SamplerError::MissingValues(series.patient_id.clone()));
    }
    let nf = series.n_features();
    let stride = stride.max(1);
    Ok((0..=series.len() - t_len)
        .step_by(stride)
        .map(|start| {
            let rows = series.values()[start * nf..(start + t_len) * nf].to_vec();
            let mut w = WindowSample::from_rows(
                series.patient_id.clone(),
                target,
                schema.encoder_len(),
                schema.horizon_len(),
                nf,
                rows,
                delta,
            );
            w.start = start;
            w
        })
        .collect())
}

/// Indices drawn for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub indices: Vec<usize>,
    /// Set when one class was empty and the epoch is every window, unbalanced.
    pub single_class: bool,
}

/// Undersamples the majority class: `m = min(#stable, #volatile)` windows of
/// each class drawn without replacement, then shuffled.
pub fn balanced_epoch<R: Rng + ?Sized>(labels: &[RegimeLabel], rng: &mut R) -> Epoch {
    let (mut stable, mut volatile): (Vec<usize>, Vec<usize>) =
        (0..labels.len()).partition(|&i| !labels[i].is_volatile());
    if stable.is_empty() || volatile.is_empty() {
        let mut indices: Vec<usize> = (0..labels.len()).collect();
        indices.shuffle(rng);
        return Epoch {
            indices,
            single_class: true,
        };
    }
    let m = stable.len().min(volatile.len());
    stable.shuffle(rng);
    volatile.shuffle(rng);
    let mut indices: Vec<usize> = stable[..m].iter().chain(&volatile[..m]).copied().collect();
    indices.shuffle(rng);
    Epoch {
        indices,
        single_class: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{DatasetSchema, FeatureSpec, Role};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn schema(e: usize, h: usize) -> Schema {
        DatasetSchema {
            features: vec![
                FeatureSpec::continuous("y", Role::Target, ""),
                FeatureSpec::continuous("x", Role::ObservedPast, ""),
            ],
            grid_step_min: 10.0,
            encoder_len: e,
            horizon_len: h,
        }
        .validate()
        .unwrap()
    }

    fn series(y: &[f64]) -> PatientSeries {
        let values: Vec<f64> = y.iter().flat_map(|&v| [v, 2.0 * v]).collect();
        PatientSeries::new("p", y.len(), 2, values, vec![true; y.len() * 2])
    }

    #[test]
    fn window_counts() {
        let s = schema(4, 2);
        let w = enumerate_windows(&series(&[1.0; 6]), &s, 0, 0.5, 1).unwrap();
        assert_eq!(w.len(), 1);
        let w = enumerate_windows(&series(&[1.0; 10]), &s, 0, 0.5, 1).unwrap();
        assert_eq!(w.len(), 5);
        assert!(w.iter().all(|w| w.label == RegimeLabel::Stable));
        assert!(matches!(
            enumerate_windows(&series(&[1.0; 5]), &s, 0, 0.5, 1),
            Err(SamplerError::SeriesTooShort { .. })
        ));
    }

    #[test]
    fn slices_and_labels() {
        let s = schema(2, 2);
        let y = [0.0, 1.0, 2.0, 9.0, 4.0];
        let w = enumerate_windows(&series(&y), &s, 0, 5.0, 1).unwrap();
        assert_eq!(w[0].target_history(), vec![0.0, 1.0]);
        assert_eq!(w[0].target_future(), vec![2.0, 9.0]);
        assert_eq!(w[0].label, RegimeLabel::Volatile);
        assert_eq!(w[1].target_future(), vec![9.0, 4.0]);
        assert_eq!(w[1].score, 5.0);
        assert_eq!(w[1].label, RegimeLabel::Stable);
        assert_eq!(w[1].encoder_value(1, 1), 4.0);
        assert_eq!(window_scores(&series(&y), &s, 0), vec![7.0, 5.0]);
    }

    fn labels(stable: usize, volatile: usize) -> Vec<RegimeLabel> {
        let mut l = vec![RegimeLabel::Stable; stable];
        l.extend(vec![RegimeLabel::Volatile; volatile]);
        l
    }

    #[test]
    fn undersampling_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = labels(100, 20);
        let e = balanced_epoch(&l, &mut rng);
        assert_eq!(e.indices.len(), 40);
        assert!(!e.single_class);
        assert_eq!(
            e.indices.iter().filter(|&&i| l[i].is_volatile()).count(),
            20
        );

        let l = labels(50, 50);
        let e = balanced_epoch(&l, &mut rng);
        let mut sorted = e.indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());

        let l = labels(100, 0);
        let e = balanced_epoch(&l, &mut rng);
        assert!(e.single_class);
        assert_eq!(e.indices.len(), 100);
    }

    #[test]
    fn majority_class_is_covered_over_epochs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = labels(100, 20);
        let mut seen = HashSet::new();
        for _ in 0..50 {
            for i in balanced_epoch(&l, &mut rng).indices {
                if !l[i].is_volatile() {
                    seen.insert(i);
                }
            }
        }
        assert!(seen.len() >= 95, "{}", seen.len());
    }
}

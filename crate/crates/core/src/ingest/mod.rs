//! Long-format CSV ingestion: grid alignment, imputation, patient filtering
//! and the patient-level train/validation/test split.

mod synth;

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::par::{self, Execution};
use crate::schema::{Role, Schema};

pub use synth::{generate_synthetic, regime_signal, synthetic_schema, SynthConfig, SyntheticData};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("line {line}: unknown feature {name:?}")]
    UnknownFeature { line: usize, name: String },
    #[error("line {line}: cannot parse value {value:?} for feature {feature:?}")]
    UnparsableValue {
        line: usize,
        feature: String,
        value: String,
    },
    #[error("line {line}: negative time {time_h}")]
    NegativeTime { line: usize, time_h: f64 },
    #[error("patient {0:?} has no events")]
    EmptyPatient(String),
    #[error("patient {patient:?}: feature {feature:?} never observed and no median available")]
    AllMissingFeature { patient: String, feature: String },
    #[error("patient {0:?}: target never observed")]
    UnobservedTarget(String),
    #[error("need at least 10 patients for a 7:2:1 split, got {0}")]
    TooFewPatients(usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One measurement from the long-format input.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEvent {
    pub patient_id: String,
    pub time_h: f64,
    /// Index into the schema's feature list.
    pub feature: usize,
    /// Continuous value, or category index for categorical features.
    pub value: f64,
}

#[derive(Debug, Deserialize)]
struct EventRow {
    patient_id: String,
    time_h: String,
    feature: String,
    value: String,
}

/// Parses `patient_id,time_h,feature,value` rows. Categorical values go through
/// the schema vocabulary (labels or bare indices).
pub fn parse_events<R: Read>(input: R, schema: &Schema) -> Result<Vec<RawEvent>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<EventRow>().enumerate() {
        let line = i + 2;
        let row = row?;
        let feature =
            schema
                .feature_index(&row.feature)
                .map_err(|_| IngestError::UnknownFeature {
                    line,
                    name: row.feature.clone(),
                })?;
        let unparsable = || IngestError::UnparsableValue {
            line,
            feature: row.feature.clone(),
            value: row.value.clone(),
        };
        let time_h: f64 = row
            .time_h
            .parse()
            .map_err(|_| IngestError::UnparsableValue {
                line,
                feature: "time_h".into(),
                value: row.time_h.clone(),
            })?;
        if time_h < 0.0 || !time_h.is_finite() {
            return Err(IngestError::NegativeTime { line, time_h });
        }
        let spec = schema.feature(feature);
        let value = if spec.is_categorical() {
            spec.category_index(&row.value).ok_or_else(unparsable)? as f64
        } else {
            let v: f64 = row.value.parse().map_err(|_| unparsable())?;
            if !v.is_finite() {
                return Err(unparsable());
            }
            v
        };
        out.push(RawEvent {
            patient_id: row.patient_id,
            time_h,
            feature,
            value,
        });
    }
    Ok(out)
}

/// Writes events in the same long format `parse_events` reads.
pub fn write_events<W: Write>(
    out: W,
    events: &[RawEvent],
    schema: &Schema,
) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["patient_id", "time_h", "feature", "value"])?;
    for e in events {
        let spec = schema.feature(e.feature);
        let value = match (&spec.vocab, spec.is_categorical()) {
            (Some(v), true) => v[e.value as usize].clone(),
            (None, true) => format!("{}", e.value as usize),
            _ => format!("{}", e.value),
        };
        w.write_record([
            e.patient_id.as_str(),
            &format!("{}", e.time_h),
            &spec.name,
            &value,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Groups events by patient, sorted by id then time.
pub fn group_by_patient(events: Vec<RawEvent>) -> BTreeMap<String, Vec<RawEvent>> {
    let mut map: BTreeMap<String, Vec<RawEvent>> = BTreeMap::new();
    for e in events {
        map.entry(e.patient_id.clone()).or_default().push(e);
    }
    for v in map.values_mut() {
        v.sort_by(|a, b| a.time_h.total_cmp(&b.time_h));
    }
    map
}

/// One patient's values on the fixed grid.
///
/// Missing cells hold `NaN` until imputation; `mask` keeps the pre-imputation
/// observation pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientSeries {
    pub patient_id: String,
    /// Grid index of row 0 relative to admission (non-zero after leading trim).
    pub start_step: usize,
    n_steps: usize,
    n_features: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl PatientSeries {
    pub fn new(
        patient_id: impl Into<String>,
        n_steps: usize,
        n_features: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
    ) -> Self {
        assert_eq!(values.len(), n_steps * n_features);
        assert_eq!(mask.len(), n_steps * n_features);
        Self {
            patient_id: patient_id.into(),
            start_step: 0,
            n_steps,
            n_features,
            values,
            mask,
        }
    }

    pub fn len(&self) -> usize {
        self.n_steps
    }

    pub fn is_empty(&self) -> bool {
        self.n_steps == 0
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    #[inline]
    pub fn value(&self, t: usize, f: usize) -> f64 {
        self.values[t * self.n_features + f]
    }

    #[inline]
    pub fn observed(&self, t: usize, f: usize) -> bool {
        self.mask[t * self.n_features + f]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_features..(t + 1) * self.n_features]
    }

    pub fn column(&self, f: usize) -> Vec<f64> {
        (0..self.n_steps).map(|t| self.value(t, f)).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    fn set(&mut self, t: usize, f: usize, v: f64) {
        self.values[t * self.n_features + f] = v;
    }
}

/// Bins one patient's events onto the grid: continuous features take the bin
/// mean, categorical features the bin mode (lowest index on ties). Statics are
/// aggregated over the whole stay and broadcast to every row.
pub fn resample_to_grid(
    patient_id: &str,
    events: &[RawEvent],
    schema: &Schema,
) -> Result<PatientSeries, IngestError> {
    if events.is_empty() {
        return Err(IngestError::EmptyPatient(patient_id.into()));
    }
    let step_h = schema.grid_step_min() / 60.0;
    let bin = |t: f64| (t / step_h + 1e-9).floor() as usize;
    let n = events.iter().map(|e| bin(e.time_h)).max().unwrap_or(0) + 1;
    let nf = schema.num_features();

    // Per cell: running sum/count for continuous, category histogram for categorical.
    let mut sums = vec![0.0; n * nf];
    let mut counts = vec![0usize; n * nf];
    let mut cats: BTreeMap<(usize, usize), BTreeMap<usize, usize>> = BTreeMap::new();
    let mut static_vals: Vec<Vec<f64>> = vec![Vec::new(); nf];
    for e in events {
        let spec = schema.feature(e.feature);
        if spec.role == Role::Static {
            static_vals[e.feature].push(e.value);
            continue;
        }
        let t = bin(e.time_h);
        let idx = t * nf + e.feature;
        counts[idx] += 1;
        if spec.is_categorical() {
            *cats
                .entry((t, e.feature))
                .or_default()
                .entry(e.value as usize)
                .or_default() += 1;
        } else {
            sums[idx] += e.value;
        }
    }

    let mut values = vec![f64::NAN; n * nf];
    let mut mask = vec![false; n * nf];
    for (f, spec) in schema.features().iter().enumerate() {
        if spec.role == Role::Static {
            let obs = &static_vals[f];
            if obs.is_empty() {
                continue;
            }
            let v = if spec.is_categorical() {
                mode(obs.iter().map(|&x| x as usize))
            } else {
                obs.iter().sum::<f64>() / obs.len() as f64
            };
            for t in 0..n {
                values[t * nf + f] = v;
                mask[t * nf + f] = true;
            }
            continue;
        }
        for t in 0..n {
            let idx = t * nf + f;
            if counts[idx] == 0 {
                continue;
            }
            values[idx] = if spec.is_categorical() {
                let hist = &cats[&(t, f)];
                mode(
                    hist.iter()
                        .flat_map(|(&k, &c)| std::iter::repeat(k).take(c)),
                )
            } else {
                sums[idx] / counts[idx] as f64
            };
            mask[idx] = true;
        }
    }
    Ok(PatientSeries::new(patient_id, n, nf, values, mask))
}

fn mode(xs: impl Iterator<Item = usize>) -> f64 {
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for x in xs {
        *hist.entry(x).or_default() += 1;
    }
    let mut best = (0usize, 0usize);
    for (&k, &c) in &hist {
        if c > best.1 {
            best = (k, c);
        }
    }
    best.0 as f64
}

fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

/// Per-feature fill values: median for continuous, mode for categorical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMedians {
    pub values: Vec<Option<f64>>,
}

impl FeatureMedians {
    /// Computed over observed (pre-imputation) cells of the given series. Statics
    /// count once per patient.
    pub fn from_series(series: &[PatientSeries], schema: &Schema) -> Self {
        let values = schema
            .features()
            .iter()
            .enumerate()
            .map(|(f, spec)| {
                let mut obs = Vec::new();
                for s in series {
                    if spec.role == Role::Static {
                        if s.len() > 0 && s.observed(0, f) {
                            obs.push(s.value(0, f));
                        }
                    } else {
                        obs.extend(
                            (0..s.len())
                                .filter(|&t| s.observed(t, f))
                                .map(|t| s.value(t, f)),
                        );
                    }
                }
                if spec.is_categorical() {
                    (!obs.is_empty()).then(|| mode(obs.iter().map(|&x| x as usize)))
                } else {
                    median(&mut obs)
                }
            })
            .collect();
        Self { values }
    }
}

/// Forward-fills temporal features for up to `max_gap_h` hours after their last
/// observation and median-fills beyond that; statics are median/mode-filled.
/// Leading rows are trimmed until every target has been observed.
pub fn impute(
    series: &PatientSeries,
    schema: &Schema,
    medians: &FeatureMedians,
    max_gap_h: f64,
) -> Result<PatientSeries, IngestError> {
    let targets = schema.targets();
    let first = (0..series.len())
        .find(|&t| targets.iter().all(|&f| series.observed(t, f)))
        .ok_or_else(|| IngestError::UnobservedTarget(series.patient_id.clone()))?;
    let n = series.len() - first;
    let nf = series.n_features();
    let mut out = PatientSeries {
        patient_id: series.patient_id.clone(),
        start_step: series.start_step + first,
        n_steps: n,
        n_features: nf,
        values: series.values[first * nf..].to_vec(),
        mask: series.mask[first * nf..].to_vec(),
    };
    let step_h = schema.grid_step_min() / 60.0;
    let max_steps = (max_gap_h / step_h + 1e-9).floor() as usize;

    for (f, spec) in schema.features().iter().enumerate() {
        let fill = medians.values[f];
        let need_median = || {
            fill.ok_or_else(|| IngestError::AllMissingFeature {
                patient: series.patient_id.clone(),
                feature: spec.name.clone(),
            })
        };
        if spec.role == Role::Static {
            if n > 0 && !out.observed(0, f) {
                let v = need_median()?;
                for t in 0..n {
                    out.set(t, f, v);
                }
            }
            continue;
        }
        // Last observation before the trim still anchors forward fill.
        let mut last: Option<(usize, f64)> = (0..first)
            .rev()
            .find(|&t| series.observed(t, f))
            .map(|t| (t, series.value(t, f)));
        for t in 0..n {
            let abs_t = first + t;
            if out.observed(t, f) {
                last = Some((abs_t, out.value(t, f)));
                continue;
            }
            let v = match last {
                Some((lt, lv)) if abs_t - lt <= max_steps => lv,
                _ => need_median()?,
            };
            out.set(t, f, v);
        }
    }
    Ok(out)
}

/// Missing fractions used by [`filter_patients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissingStats {
    pub static_fraction: f64,
    pub observed_fraction: f64,
}

pub fn missing_stats(series: &PatientSeries, schema: &Schema) -> MissingStats {
    let statics = schema.static_features();
    let static_fraction = if statics.is_empty() || series.is_empty() {
        0.0
    } else {
        statics.iter().filter(|&&f| !series.observed(0, f)).count() as f64 / statics.len() as f64
    };
    let observed: Vec<usize> = schema
        .features()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.role == Role::ObservedPast)
        .map(|(i, _)| i)
        .collect();
    let cells = observed.len() * series.len();
    let observed_fraction = if cells == 0 {
        0.0
    } else {
        let missing = (0..series.len())
            .flat_map(|t| observed.iter().map(move |&f| (t, f)))
            .filter(|&(t, f)| !series.observed(t, f))
            .count();
        missing as f64 / cells as f64
    };
    MissingStats {
        static_fraction,
        observed_fraction,
    }
}

/// Keeps patients whose static and observed-feature missing fractions are both
/// at most `threshold` (drops only strictly above it).
pub fn filter_patients(
    series: Vec<PatientSeries>,
    schema: &Schema,
    threshold: f64,
) -> (Vec<PatientSeries>, Vec<String>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for s in series {
        let m = missing_stats(&s, schema);
        if m.static_fraction > threshold || m.observed_fraction > threshold {
            dropped.push(s.patient_id.clone());
        } else {
            kept.push(s);
        }
    }
    (kept, dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn get(&self, id: &str) -> Option<Split> {
        self.assignment.get(id).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignment.values().filter(|&&s| s == split).count()
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

/// Shuffles ids under `seed` and cuts them by `ratios`. Validation and test
/// sizes are floors; the remainder goes to training.
pub fn split_by_patient(
    ids: &[String],
    ratios: (u32, u32, u32),
    seed: u64,
) -> Result<SplitAssignment, IngestError> {
    if ids.len() < 10 {
        return Err(IngestError::TooFewPatients(ids.len()));
    }
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    sorted.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let n = sorted.len();
    let total = (ratios.0 + ratios.1 + ratios.2) as usize;
    let n_val = n * ratios.1 as usize / total;
    let n_test = n * ratios.2 as usize / total;
    let n_train = n - n_val - n_test;
    let assignment = sorted
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id.clone(), s)
        })
        .collect();
    Ok(SplitAssignment { assignment })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepConfig {
    pub max_gap_h: f64,
    pub missing_threshold: f64,
    pub ratios: (u32, u32, u32),
    pub split_seed: u64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            max_gap_h: 6.0,
            missing_threshold: 0.8,
            ratios: (7, 2, 1),
            split_seed: 0,
        }
    }
}

/// Summary written next to the grid files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestManifest {
    pub patients_total: usize,
    pub patients_dropped: Vec<String>,
    pub patients_unusable: Vec<String>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Fill value per feature, computed on the training split only.
    pub medians: BTreeMap<String, Option<f64>>,
    pub rows_trimmed: usize,
    pub patients_trimmed: usize,
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub splits: SplitAssignment,
    pub train: Vec<PatientSeries>,
    pub val: Vec<PatientSeries>,
    pub test: Vec<PatientSeries>,
    pub medians: FeatureMedians,
    pub manifest: IngestManifest,
}

impl PreparedData {
    pub fn split(&self, s: Split) -> &[PatientSeries] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Full preprocessing: resample → filter → split → training medians → impute.
///
/// `medians` overrides the training-split medians (evaluation reuses the ones
/// stored with a checkpoint).
pub fn prepare(
    events: Vec<RawEvent>,
    schema: &Schema,
    cfg: &PrepConfig,
    medians: Option<FeatureMedians>,
    exec: Execution,
) -> Result<PreparedData, IngestError> {
    let grouped: Vec<(String, Vec<RawEvent>)> = group_by_patient(events).into_iter().collect();
    let patients_total = grouped.len();
    let resampled = par::map(exec, &grouped, |(id, ev)| resample_to_grid(id, ev, schema))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let (kept, dropped) = filter_patients(resampled, schema, cfg.missing_threshold);
    let ids: Vec<String> = kept.iter().map(|s| s.patient_id.clone()).collect();
    let splits = split_by_patient(&ids, cfg.ratios, cfg.split_seed)?;

    let train_raw: Vec<PatientSeries> = kept
        .iter()
        .filter(|s| splits.get(&s.patient_id) == Some(Split::Train))
        .cloned()
        .collect();
    let medians = medians.unwrap_or_else(|| FeatureMedians::from_series(&train_raw, schema));

    let imputed = par::map(exec, &kept, |s| impute(s, schema, &medians, cfg.max_gap_h));
    let mut out = PreparedData {
        splits,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        medians: medians.clone(),
        manifest: IngestManifest {
            patients_total,
            patients_dropped: dropped,
            patients_unusable: Vec::new(),
            train: 0,
            val: 0,
            test: 0,
            medians: schema
                .features()
                .iter()
                .zip(&medians.values)
                .map(|(f, m)| (f.name.clone(), *m))
                .collect(),
            rows_trimmed: 0,
            patients_trimmed: 0,
        },
    };
    for (raw, res) in kept.iter().zip(imputed) {
        let s = match res {
            Ok(s) => s,
            Err(IngestError::UnobservedTarget(id)) => {
                out.manifest.patients_unusable.push(id);
                continue;
            }
            Err(e) => return Err(e),
        };
        let trimmed = raw.len() - s.len();
        out.manifest.rows_trimmed += trimmed;
        out.manifest.patients_trimmed += usize::from(trimmed > 0);
        match out.splits.get(&s.patient_id) {
            Some(Split::Train) => out.train.push(s),
            Some(Split::Val) => out.val.push(s),
            _ => out.test.push(s),
        }
    }
    out.manifest.train = out.train.len();
    out.manifest.val = out.val.len();
    out.manifest.test = out.test.len();
    Ok(out)
}

/// Grid file: `patient_id,step,<feature...>` with categorical values as indices.
pub fn write_grid_csv<W: Write>(
    out: W,
    series: &[PatientSeries],
    schema: &Schema,
) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["patient_id".to_string(), "step".to_string()];
    header.extend(schema.features().iter().map(|f| f.name.clone()));
    w.write_record(&header)?;
    for s in series {
        for t in 0..s.len() {
            let mut rec = vec![s.patient_id.clone(), (s.start_step + t).to_string()];
            rec.extend(s.row(t).iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

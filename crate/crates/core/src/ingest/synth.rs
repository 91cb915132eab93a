//! Regime-switching synthetic cohorts with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};

use super::{PatientSeries, RawEvent};
use crate::labeler::RegimeLabel;
use crate::schema::{DatasetSchema, FeatureSpec, Role, Schema};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub steps_per_patient: usize,
    /// Stationary probability of the volatile regime.
    pub shock_rate: f64,
    /// Per-step switching intensity; larger means shorter episodes.
    pub switch_intensity: f64,
    /// AR(1) coefficient of the target deviation.
    pub ar_coef: f64,
    pub sigma_stable: f64,
    pub sigma_volatile: f64,
    /// Probability that an observed-past covariate sample is dropped.
    pub drop_prob: f64,
    /// Zipf exponent for categorical draws.
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 50,
            steps_per_patient: 160,
            shock_rate: 0.3,
            switch_intensity: 0.1,
            ar_coef: 0.8,
            sigma_stable: 0.5,
            sigma_volatile: 4.0,
            drop_prob: 0.05,
            zipf_exponent: 1.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Stable→volatile and volatile→stable switching probabilities.
    pub fn transition_probs(&self) -> (f64, f64) {
        let p_up = self.shock_rate * self.switch_intensity;
        let p_down = (1.0 - self.shock_rate) * self.switch_intensity;
        (p_up, p_down)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// Grid-aligned series; dropped covariate samples are `NaN` with a false mask.
    pub series: Vec<PatientSeries>,
    /// True regime per patient per step.
    pub regimes: Vec<Vec<RegimeLabel>>,
}

impl SyntheticData {
    /// Long-format events, one per observed cell, at bin start times.
    pub fn to_events(&self, schema: &Schema) -> Vec<RawEvent> {
        let step_h = schema.grid_step_min() / 60.0;
        let mut out = Vec::new();
        for s in &self.series {
            for (f, spec) in schema.features().iter().enumerate() {
                if spec.role == Role::Static {
                    if s.observed(0, f) {
                        out.push(RawEvent {
                            patient_id: s.patient_id.clone(),
                            time_h: 0.0,
                            feature: f,
                            value: s.value(0, f),
                        });
                    }
                    continue;
                }
                for t in 0..s.len() {
                    if s.observed(t, f) {
                        out.push(RawEvent {
                            patient_id: s.patient_id.clone(),
                            time_h: t as f64 * step_h,
                            feature: f,
                            value: s.value(t, f),
                        });
                    }
                }
            }
        }
        out
    }
}

/// Schema used by the CLI's `synth` command: one target, two lagged covariates,
/// a known time-of-day signal, and two statics (one long-tailed categorical).
pub fn synthetic_schema(encoder_len: usize, horizon_len: usize) -> Schema {
    let mut unit = FeatureSpec::categorical("care_unit", Role::Static, 20);
    unit.unit = "category".into();
    DatasetSchema {
        features: vec![
            FeatureSpec::continuous("hr", Role::Target, "bpm"),
            FeatureSpec::continuous("rr", Role::ObservedPast, "breaths/min"),
            FeatureSpec::continuous("sbp", Role::ObservedPast, "mmHg"),
            FeatureSpec::continuous("hour_sin", Role::KnownFuture, "1"),
            FeatureSpec::continuous("age", Role::Static, "years"),
            unit,
        ],
        grid_step_min: 10.0,
        encoder_len,
        horizon_len,
    }
    .validate()
    .expect("built-in schema is valid")
}

/// Zero-based category drawn from a Zipf law over the vocabulary.
fn draw_category(z: &Zipf<f64>, rng: &mut impl Rng) -> usize {
    z.sample(rng) as usize - 1
}

/// Per target, an AR(1) deviation around a patient level whose innovation
/// variance switches with a two-state Markov chain shared by all targets of a
/// patient. Observed covariates are lagged noisy copies of the first target,
/// known-future inputs are phase-shifted daily sinusoids (which also drive the
/// targets), and categorical draws are Zipf-distributed.
pub fn generate_synthetic(schema: &Schema, cfg: &SynthConfig) -> SyntheticData {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let nf = schema.num_features();
    let n = cfg.steps_per_patient;
    let (p_up, p_down) = cfg.transition_probs();
    let step_h = schema.grid_step_min() / 60.0;
    let day_steps = 24.0 / step_h;

    // Fixed per-category level shifts for the first categorical static.
    let effects: Vec<Vec<f64>> = schema
        .features()
        .iter()
        .map(|f| {
            (0..f.vocab_size.unwrap_or(0))
                .map(|_| 3.0 * std_normal.sample(&mut rng))
                .collect()
        })
        .collect();
    let zipfs: Vec<Option<Zipf<f64>>> = schema
        .features()
        .iter()
        .map(|f| {
            f.vocab_size.map(|v| {
                Zipf::new(v as f64, cfg.zipf_exponent)
                    .expect("vocabulary is non-empty and the exponent non-negative")
            })
        })
        .collect();

    let mut series = Vec::with_capacity(cfg.n_patients);
    let mut regimes = Vec::with_capacity(cfg.n_patients);
    for p in 0..cfg.n_patients {
        let mut values = vec![f64::NAN; n * nf];
        let mut mask = vec![false; n * nf];

        let mut level_shift = 0.0;
        for &f in schema.static_features() {
            let v = match &zipfs[f] {
                Some(z) => {
                    let k = draw_category(z, &mut rng);
                    level_shift += effects[f][k];
                    k as f64
                }
                None => 65.0 + 12.0 * std_normal.sample(&mut rng),
            };
            for t in 0..n {
                values[t * nf + f] = v;
                mask[t * nf + f] = true;
            }
        }

        let mut regime = Vec::with_capacity(n);
        let mut volatile = rng.random::<f64>() < cfg.shock_rate;
        for _ in 0..n {
            regime.push(if volatile {
                RegimeLabel::Volatile
            } else {
                RegimeLabel::Stable
            });
            let u: f64 = rng.random();
            volatile = if volatile { u >= p_down } else { u < p_up };
        }

        let phase = rng.random::<f64>() * day_steps;
        for (j, &f) in schema.future_features().iter().enumerate() {
            if let Some(z) = &zipfs[f] {
                for t in 0..n {
                    values[t * nf + f] = draw_category(z, &mut rng) as f64;
                    mask[t * nf + f] = true;
                }
                continue;
            }
            for t in 0..n {
                let ang = 2.0 * std::f64::consts::PI * (t as f64 + phase) / day_steps
                    + j as f64 * std::f64::consts::FRAC_PI_2;
                values[t * nf + f] = ang.sin();
                mask[t * nf + f] = true;
            }
        }
        let known_signal: Vec<f64> = (0..n)
            .map(|t| {
                schema
                    .future_features()
                    .iter()
                    .filter(|&&f| zipfs[f].is_none())
                    .map(|&f| values[t * nf + f])
                    .sum()
            })
            .collect();

        for (k, &f) in schema.targets().iter().enumerate() {
            let base = 80.0 - 10.0 * k as f64 + level_shift + 5.0 * std_normal.sample(&mut rng);
            let mut z = 0.0;
            for t in 0..n {
                let sigma = if regime[t].is_volatile() {
                    cfg.sigma_volatile
                } else {
                    cfg.sigma_stable
                };
                z = cfg.ar_coef * z + sigma * std_normal.sample(&mut rng);
                values[t * nf + f] = base + 4.0 * known_signal[t] + z;
                mask[t * nf + f] = true;
            }
        }

        let first_target = schema.targets()[0];
        let observed: Vec<usize> = schema
            .features()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.role == Role::ObservedPast)
            .map(|(i, _)| i)
            .collect();
        for (j, &f) in observed.iter().enumerate() {
            let lag = j + 1;
            let gain = 0.5 + 0.25 * j as f64;
            for t in 0..n {
                let v = match &zipfs[f] {
                    Some(z) => draw_category(z, &mut rng) as f64,
                    None => {
                        let src = values[t.saturating_sub(lag) * nf + first_target];
                        gain * src + 20.0 * j as f64 + 0.5 * std_normal.sample(&mut rng)
                    }
                };
                if rng.random::<f64>() >= cfg.drop_prob {
                    values[t * nf + f] = v;
                    mask[t * nf + f] = true;
                }
            }
        }

        series.push(PatientSeries::new(format!("p{p:04}"), n, nf, values, mask));
        regimes.push(regime);
    }
    SyntheticData { series, regimes }
}

/// Random walk whose step std switches between 1 and `sqrt(variance_ratio)`
/// under a symmetric Markov chain. Returns the series and the regime of each
/// step (the regime of the increment that produced `y_t`).
pub fn regime_signal(
    n: usize,
    variance_ratio: f64,
    switch_prob: f64,
    seed: u64,
) -> (Vec<f64>, Vec<RegimeLabel>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let hi = variance_ratio.sqrt();
    let mut volatile = rng.random::<bool>();
    let mut y = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut level = 0.0;
    for _ in 0..n {
        let sigma = if volatile { hi } else { 1.0 };
        level += sigma * normal.sample(&mut rng);
        y.push(level);
        labels.push(if volatile {
            RegimeLabel::Volatile
        } else {
            RegimeLabel::Stable
        });
        if rng.random::<f64>() < switch_prob {
            volatile = !volatile;
        }
    }
    (y, labels)
}

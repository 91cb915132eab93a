//! Feature roles, types and the variable-group partition used by the
//! selection-entropy penalty.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchemaError {
    #[error("duplicate feature name {0:?}")]
    DuplicateFeatureName(String),
    #[error("schema declares no target feature")]
    NoTarget,
    #[error("target feature {0:?} is categorical")]
    CategoricalTarget(String),
    #[error(
        "encoder_len and horizon_len must both be at least 1 (got {encoder_len}, {horizon_len})"
    )]
    ZeroLengthWindow {
        encoder_len: usize,
        horizon_len: usize,
    },
    #[error("feature {name:?}: {reason}")]
    InvalidVocab { name: String, reason: String },
    #[error("grid_step_min must be positive and finite, got {0}")]
    InvalidGridStep(f64),
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("malformed schema document: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Static,
    ObservedPast,
    KnownFuture,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub role: Role,
    pub dtype: DType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    /// Category labels, index = category id. Optional; numeric ids are accepted without it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
    #[serde(default)]
    pub unit: String,
}

impl FeatureSpec {
    pub fn continuous(name: &str, role: Role, unit: &str) -> Self {
        Self {
            name: name.into(),
            role,
            dtype: DType::Continuous,
            vocab_size: None,
            vocab: None,
            unit: unit.into(),
        }
    }

    pub fn categorical(name: &str, role: Role, vocab_size: usize) -> Self {
        Self {
            name: name.into(),
            role,
            dtype: DType::Categorical,
            vocab_size: Some(vocab_size),
            vocab: None,
            unit: String::new(),
        }
    }

    pub fn is_categorical(&self) -> bool {
        self.dtype == DType::Categorical
    }

    /// Category id for a raw CSV token: a vocabulary label or a bare index.
    pub fn category_index(&self, token: &str) -> Option<usize> {
        let size = self.vocab_size?;
        if let Some(vocab) = &self.vocab {
            if let Some(i) = vocab.iter().position(|v| v == token) {
                return Some(i);
            }
        }
        let idx: f64 = token.trim().parse().ok()?;
        (idx >= 0.0 && idx.fract() == 0.0 && (idx as usize) < size).then_some(idx as usize)
    }
}

/// Unvalidated schema document as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub features: Vec<FeatureSpec>,
    pub grid_step_min: f64,
    pub encoder_len: usize,
    pub horizon_len: usize,
}

impl DatasetSchema {
    pub fn from_json(s: &str) -> Result<Self, SchemaError> {
        serde_json::from_str(s).map_err(|e| SchemaError::Json(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn validate(self) -> Result<Schema, SchemaError> {
        Schema::new(self)
    }
}

/// A schema whose invariants hold, with derived index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    doc: DatasetSchema,
    past: Vec<usize>,
    future: Vec<usize>,
    statics: Vec<usize>,
    targets: Vec<usize>,
}

impl Schema {
    fn new(doc: DatasetSchema) -> Result<Self, SchemaError> {
        let mut seen = HashSet::new();
        for f in &doc.features {
            if !seen.insert(f.name.as_str()) {
                return Err(SchemaError::DuplicateFeatureName(f.name.clone()));
            }
            match (f.dtype, f.vocab_size) {
                (DType::Categorical, None) | (DType::Categorical, Some(0)) => {
                    return Err(SchemaError::InvalidVocab {
                        name: f.name.clone(),
                        reason: "categorical features need vocab_size >= 1".into(),
                    })
                }
                (DType::Continuous, Some(_)) => {
                    return Err(SchemaError::InvalidVocab {
                        name: f.name.clone(),
                        reason: "continuous features carry no vocab_size".into(),
                    })
                }
                _ => {}
            }
            if let (Some(v), Some(n)) = (&f.vocab, f.vocab_size) {
                if v.len() != n {
                    return Err(SchemaError::InvalidVocab {
                        name: f.name.clone(),
                        reason: format!("vocab lists {} labels but vocab_size is {n}", v.len()),
                    });
                }
            }
            if f.role == Role::Target && f.is_categorical() {
                return Err(SchemaError::CategoricalTarget(f.name.clone()));
            }
        }
        if doc.encoder_len == 0 || doc.horizon_len == 0 {
            return Err(SchemaError::ZeroLengthWindow {
                encoder_len: doc.encoder_len,
                horizon_len: doc.horizon_len,
            });
        }
        if !(doc.grid_step_min.is_finite() && doc.grid_step_min > 0.0) {
            return Err(SchemaError::InvalidGridStep(doc.grid_step_min));
        }
        let pick = |pred: &dyn Fn(Role) -> bool| -> Vec<usize> {
            doc.features
                .iter()
                .enumerate()
                .filter(|(_, f)| pred(f.role))
                .map(|(i, _)| i)
                .collect()
        };
        let targets = pick(&|r| r == Role::Target);
        if targets.is_empty() {
            return Err(SchemaError::NoTarget);
        }
        let past = pick(&|r| r != Role::Static);
        let future = pick(&|r| r == Role::KnownFuture);
        let statics = pick(&|r| r == Role::Static);
        Ok(Self {
            doc,
            past,
            future,
            statics,
            targets,
        })
    }

    pub fn doc(&self) -> &DatasetSchema {
        &self.doc
    }

    pub fn into_doc(self) -> DatasetSchema {
        self.doc
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.doc.features
    }

    pub fn feature(&self, idx: usize) -> &FeatureSpec {
        &self.doc.features[idx]
    }

    pub fn num_features(&self) -> usize {
        self.doc.features.len()
    }

    pub fn feature_index(&self, name: &str) -> Result<usize, SchemaError> {
        self.doc
            .features
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| SchemaError::UnknownFeature(name.into()))
    }

    pub fn encoder_len(&self) -> usize {
        self.doc.encoder_len
    }

    pub fn horizon_len(&self) -> usize {
        self.doc.horizon_len
    }

    /// `T = E + H`.
    pub fn window_len(&self) -> usize {
        self.doc.encoder_len + self.doc.horizon_len
    }

    pub fn grid_step_min(&self) -> f64 {
        self.doc.grid_step_min
    }

    /// Past-side variables (targets, observed and known inputs) in schema order. `N_h` entries.
    pub fn past_features(&self) -> &[usize] {
        &self.past
    }

    /// Known-future variables in schema order. `N_f` entries.
    pub fn future_features(&self) -> &[usize] {
        &self.future
    }

    pub fn static_features(&self) -> &[usize] {
        &self.statics
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn n_past(&self) -> usize {
        self.past.len()
    }

    pub fn n_future(&self) -> usize {
        self.future.len()
    }

    pub fn group_assignment(&self) -> GroupAssignment {
        GroupAssignment::for_schema(self)
    }
}

/// Row of the assignment matrix a past-side variable belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Unknown = 0,
    Known = 1,
    Observed = 2,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Unknown, Group::Known, Group::Observed];

    pub fn of_role(role: Role) -> Option<Group> {
        match role {
            Role::Target => Some(Group::Unknown),
            Role::KnownFuture => Some(Group::Known),
            Role::ObservedPast => Some(Group::Observed),
            Role::Static => None,
        }
    }
}

/// Binary `3 × N_h` matrix; column `j` is one-hot on the group of past variable `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAssignment {
    columns: Vec<Group>,
}

impl GroupAssignment {
    pub fn for_schema(schema: &Schema) -> Self {
        let columns = schema
            .past_features()
            .iter()
            .map(|&i| Group::of_role(schema.feature(i).role).expect("past features are temporal"))
            .collect();
        Self { columns }
    }

    pub fn from_groups(columns: Vec<Group>) -> Self {
        Self { columns }
    }

    pub fn n_vars(&self) -> usize {
        self.columns.len()
    }

    pub fn group_of(&self, var: usize) -> Group {
        self.columns[var]
    }

    pub fn entry(&self, group: Group, var: usize) -> u8 {
        u8::from(self.columns[var] == group)
    }

    /// Dense `3 × N_h` 0/1 matrix.
    pub fn matrix(&self) -> Vec<Vec<u8>> {
        Group::ALL
            .iter()
            .map(|&g| (0..self.columns.len()).map(|j| self.entry(g, j)).collect())
            .collect()
    }

    /// `Gᵀ` as an `N_h × 3` tensor, so that `w (T×N_h) · Gᵀ` aggregates rows of weights.
    pub fn transposed_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros(self.columns.len(), 3);
        for (j, g) in self.columns.iter().enumerate() {
            t.set(j, *g as usize, 1.0);
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(features: Vec<FeatureSpec>, e: usize, h: usize, step: f64) -> DatasetSchema {
        DatasetSchema {
            features,
            grid_step_min: step,
            encoder_len: e,
            horizon_len: h,
        }
    }

    fn basic() -> Vec<FeatureSpec> {
        vec![
            FeatureSpec::continuous("hr", Role::Target, "bpm"),
            FeatureSpec::continuous("hour", Role::KnownFuture, "h"),
            FeatureSpec::continuous("rr", Role::ObservedPast, "1/min"),
        ]
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut f = basic();
        f.push(FeatureSpec::continuous("hr", Role::ObservedPast, "bpm"));
        assert_eq!(
            doc(f, 72, 12, 10.0).validate().unwrap_err(),
            SchemaError::DuplicateFeatureName("hr".into())
        );
    }

    #[test]
    fn vital_sign_window_is_84_steps() {
        let s = doc(basic(), 72, 12, 10.0).validate().unwrap();
        assert_eq!(s.window_len(), 84);
    }

    #[test]
    fn lab_window_is_24_steps() {
        let s = doc(basic(), 12, 12, 120.0).validate().unwrap();
        assert_eq!(s.window_len(), 24);
    }

    #[test]
    fn validation_errors() {
        let f = vec![FeatureSpec::continuous("rr", Role::ObservedPast, "")];
        assert_eq!(
            doc(f, 1, 1, 10.0).validate().unwrap_err(),
            SchemaError::NoTarget
        );
        let f = vec![FeatureSpec::categorical("hr", Role::Target, 3)];
        assert_eq!(
            doc(f, 1, 1, 10.0).validate().unwrap_err(),
            SchemaError::CategoricalTarget("hr".into())
        );
        assert!(matches!(
            doc(basic(), 0, 1, 10.0).validate(),
            Err(SchemaError::ZeroLengthWindow { .. })
        ));
        let mut f = basic();
        f.push(FeatureSpec::categorical("race", Role::Static, 0));
        assert!(matches!(
            doc(f, 1, 1, 10.0).validate(),
            Err(SchemaError::InvalidVocab { .. })
        ));
    }

    #[test]
    fn derived_counts() {
        let mut f = basic();
        f.push(FeatureSpec::categorical("race", Role::Static, 4));
        f.push(FeatureSpec::continuous("spo2", Role::Target, "%"));
        let s = doc(f, 6, 2, 10.0).validate().unwrap();
        assert_eq!(s.n_past(), 4);
        assert_eq!(s.n_future(), 1);
        assert_eq!(s.targets(), &[0, 4]);
        assert_eq!(s.static_features(), &[3]);
    }

    #[test]
    fn one_variable_per_group_is_identity() {
        let s = doc(basic(), 4, 2, 10.0).validate().unwrap();
        let g = s.group_assignment();
        assert_eq!(
            g.matrix(),
            vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]
        );
    }

    #[test]
    fn empty_known_group_is_allowed() {
        let f = vec![
            FeatureSpec::continuous("a", Role::ObservedPast, ""),
            FeatureSpec::continuous("b", Role::ObservedPast, ""),
            FeatureSpec::continuous("y", Role::Target, ""),
        ];
        let g = doc(f, 4, 2, 10.0).validate().unwrap().group_assignment();
        let m = g.matrix();
        assert_eq!(m[1], vec![0, 0, 0]);
        assert_eq!(m[2], vec![1, 1, 0]);
        assert_eq!(m[0], vec![0, 0, 1]);
    }

    #[test]
    fn json_round_trip_and_vocab_lookup() {
        let json = r#"{"features":[
            {"name":"hr","role":"target","dtype":"continuous","unit":"bpm"},
            {"name":"race","role":"static","dtype":"categorical","vocab_size":3,"vocab":["asian","black","white"],"unit":""}
        ],"grid_step_min":10,"encoder_len":72,"horizon_len":12}"#;
        let d = DatasetSchema::from_json(json).unwrap();
        let s = d.clone().validate().unwrap();
        assert_eq!(s.feature(1).category_index("asian"), Some(0));
        assert_eq!(s.feature(1).category_index("2"), Some(2));
        assert_eq!(s.feature(1).category_index("3"), None);
        assert_eq!(DatasetSchema::from_json(&d.to_json()).unwrap(), d);
    }

    fn arb_role() -> impl Strategy<Value = Role> {
        prop_oneof![
            Just(Role::Static),
            Just(Role::ObservedPast),
            Just(Role::KnownFuture),
            Just(Role::Target)
        ]
    }

    proptest! {
        #[test]
        fn partition_and_idempotence(roles in proptest::collection::vec(arb_role(), 1..12)) {
            let mut features: Vec<FeatureSpec> = roles
                .iter()
                .enumerate()
                .map(|(i, &r)| FeatureSpec::continuous(&format!("f{i}"), r, ""))
                .collect();
            features.push(FeatureSpec::continuous("target", Role::Target, ""));
            let s = doc(features, 3, 2, 5.0).validate().unwrap();
            let m = s.group_assignment().matrix();
            let ones: usize = m.iter().flatten().map(|&x| x as usize).sum();
            prop_assert_eq!(ones, s.n_past());
            for j in 0..s.n_past() {
                prop_assert_eq!(m.iter().map(|row| row[j] as usize).sum::<usize>(), 1);
            }
            let again = s.clone().into_doc().validate().unwrap();
            prop_assert_eq!(again, s);
        }
    }
}

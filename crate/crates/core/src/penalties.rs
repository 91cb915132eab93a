//! The three training regularizers: frequency-aware embedding shrinkage,
//! group-entropy selection, and shock-aligned attention calibration.
//!
//! Every penalty has a tape version (for training) and, where useful, a plain
//! version over values (for reporting and tests).

use serde::{Deserialize, Serialize};

use crate::diffcore::{Axis, DiffError, Tape, Tensor, Var};
use crate::model::CategoryCounts;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PenaltyError {
    #[error("future selection weights of step {0} are all zero")]
    AllZeroFutureWeights(usize),
    #[error("first differences need at least 2 decoder steps, got {0}")]
    TooShortHorizon(usize),
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("{0} embedding tables but counts for {1} features")]
    CountsMismatch(usize, usize),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyWeights {
    pub lambda_embed: f64,
    pub lambda_group: f64,
    pub lambda_shock: f64,
    pub eps_embed: f64,
    pub eps_group: f64,
    pub eps_std: f64,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        Self {
            lambda_embed: 1e-3,
            lambda_group: 1e-2,
            lambda_shock: 1e-1,
            eps_embed: 1e-6,
            eps_group: 1e-6,
            eps_std: 1e-8,
        }
    }
}

impl PenaltyWeights {
    pub fn zero() -> Self {
        Self {
            lambda_embed: 0.0,
            lambda_group: 0.0,
            lambda_shock: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.lambda_embed,
            self.lambda_group,
            self.lambda_shock,
            self.eps_embed,
            self.eps_group,
            self.eps_std,
        ];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err("penalty weights and epsilons must be finite and non-negative".into())
        }
    }
}

// ---------------------------------------------------------------------------
// Frequency-aware embedding shrinkage

/// `‖row‖² / √(p + ε)`.
pub fn embed_row_penalty(row: &[f64], p: f64, eps: f64) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>() / (p + eps).sqrt()
}

/// Closed-form gradient of [`embed_row_penalty`] with respect to the row.
pub fn embed_row_gradient(row: &[f64], p: f64, eps: f64) -> Vec<f64> {
    let k = 2.0 / (p + eps).sqrt();
    row.iter().map(|v| k * v).collect()
}

/// Tape version of [`embed_row_penalty`] for a `1 × d` row node.
pub fn embed_row_penalty_var(t: &mut Tape<'_>, row: Var, p: f64, eps: f64) -> Var {
    let sq = t.square(row);
    let s = t.sum(sq);
    t.scale(s, 1.0 / (p + eps).sqrt())
}

/// Batch frequencies `p_k = c_k / Σ_u c_u`; all zero when the batch saw no category.
pub fn batch_frequencies(counts: &[f64]) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        counts.iter().map(|c| c / total).collect()
    } else {
        vec![0.0; counts.len()]
    }
}

fn row_weights(counts: &[f64], eps: f64) -> Vec<f64> {
    batch_frequencies(counts)
        .into_iter()
        .map(|p| 1.0 / (p + eps).sqrt())
        .collect()
}

/// Mean over features of the mean over vocabulary of the row penalties.
/// Counts are constants of the batch; only the tables receive gradient.
pub fn c_embed(
    t: &mut Tape<'_>,
    tables: &[Var],
    counts: &CategoryCounts,
    eps: f64,
) -> Result<Var, PenaltyError> {
    if tables.len() != counts.0.len() {
        return Err(PenaltyError::CountsMismatch(tables.len(), counts.0.len()));
    }
    if tables.is_empty() {
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let mut per_feature = Vec::with_capacity(tables.len());
    for (&table, c) in tables.iter().zip(&counts.0) {
        let sq = t.square(table);
        let norms = t.reduce_sum(sq, Axis::PerRow);
        let weighted = t.mul_const(norms, &Tensor::column(row_weights(c, eps)))?;
        per_feature.push(t.mean(weighted));
    }
    let stacked = t.concat_rows(&per_feature)?;
    Ok(t.mean(stacked))
}

/// Plain-value [`c_embed`].
pub fn c_embed_value(tables: &[&Tensor], counts: &CategoryCounts, eps: f64) -> f64 {
    if tables.is_empty() {
        return 0.0;
    }
    let total: f64 = tables
        .iter()
        .zip(&counts.0)
        .map(|(table, c)| {
            let w = row_weights(c, eps);
            let s: f64 = (0..table.rows())
                .map(|k| w[k] * table.row_slice(k).iter().map(|v| v * v).sum::<f64>())
                .sum();
            s / table.rows() as f64
        })
        .sum();
    total / tables.len() as f64
}

// ---------------------------------------------------------------------------
// Group-entropy selection

/// `p_t = s_t / (Σ s_t + ε)` with `s_t = G·w_t`; `g_t` is the `N_h × 3`
/// transposed group matrix, so rows of `w` aggregate as `w · Gᵀ`.
pub fn group_distribution_past(
    t: &mut Tape<'_>,
    w: Var,
    g_t: &Tensor,
    eps: f64,
) -> Result<Var, PenaltyError> {
    let g = t.constant(g_t.clone());
    let s = t.matmul(w, g)?;
    let total = t.reduce_sum(s, Axis::PerRow);
    let total = t.add_scalar(total, eps);
    Ok(t.div(s, total)?)
}

/// All future mass sits in the known group: every row is exactly `(0, 1, 0)`.
pub fn group_distribution_future(t: &mut Tape<'_>, w: Var) -> Result<Var, PenaltyError> {
    let vals = t.value(w);
    for r in 0..vals.rows() {
        if vals.row_slice(r).iter().sum::<f64>() <= 0.0 {
            return Err(PenaltyError::AllZeroFutureWeights(r));
        }
    }
    let rows = vals.rows();
    let s = t.reduce_sum(w, Axis::PerRow);
    let known = t.div(s, s)?;
    let zero = t.constant(Tensor::zeros(rows, 1));
    Ok(t.concat_cols(&[zero, known, zero])?)
}

/// Row entropies `−Σ_g p_g ln p_g` with `0·ln 0 = 0`, as a column.
pub fn entropy_rows(t: &mut Tape<'_>, p: Var) -> Result<Var, PenaltyError> {
    let xl = t.xlogx(p)?;
    let s = t.reduce_sum(xl, Axis::PerRow);
    Ok(t.neg(s))
}

/// `½(mean_t H(p^hs_t) + mean_t H(p^fut_t))`. Without known-future inputs the
/// future term is 0.
pub fn c_group(t: &mut Tape<'_>, p_hs: Var, p_fut: Option<Var>) -> Result<Var, PenaltyError> {
    let h_hs = entropy_rows(t, p_hs)?;
    let h_hs = t.mean(h_hs);
    let total = match p_fut {
        Some(p) => {
            let h = entropy_rows(t, p)?;
            let h = t.mean(h);
            t.add(h_hs, h)?
        }
        None => h_hs,
    };
    Ok(t.scale(total, 0.5))
}

/// Entropy of a distribution given as values.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 })
        .sum::<f64>()
}

// ---------------------------------------------------------------------------
// Shock-aligned attention calibration

/// Band mask selecting `Ā(t, t−k)` for `k = 1..=window`.
fn retro_band(n: usize, window: usize) -> Tensor {
    let mut m = Tensor::zeros(n, n);
    for r in 0..n {
        for k in 1..=window.min(r) {
            m.set(r, r - k, 1.0);
        }
    }
    m
}

/// `a_t = Σ_{k=1..W} Ā(t, t−k)` for rows `start..`, as a column.
pub fn retro_mass(
    t: &mut Tape<'_>,
    abar: Var,
    start: usize,
    window: usize,
) -> Result<Var, PenaltyError> {
    let [n, _] = t.shape(abar);
    let masked = t.mul_const(abar, &retro_band(n, window))?;
    let rows = t.slice_rows(masked, start, n - start)?;
    Ok(t.reduce_sum(rows, Axis::PerRow))
}

/// Plain-value [`retro_mass`].
pub fn retro_mass_values(abar: &Tensor, start: usize, window: usize) -> Vec<f64> {
    (start..abar.rows())
        .map(|r| (1..=window.min(r)).map(|k| abar.get(r, r - k)).sum())
        .collect()
}

/// `‖v_t − v_{t−1}‖₂` for consecutive rows of `v`; `v` carries one anchor row
/// before the first decoder step, so `n` rows give `n − 1` differences.
pub fn rep_first_diff(t: &mut Tape<'_>, v: Var) -> Result<Var, PenaltyError> {
    let [n, _] = t.shape(v);
    if n < 3 {
        return Err(PenaltyError::TooShortHorizon(n.saturating_sub(1)));
    }
    let next = t.slice_rows(v, 1, n - 1)?;
    let prev = t.slice_rows(v, 0, n - 1)?;
    let d = t.sub(next, prev)?;
    Ok(t.l2_norm_rows(d))
}

/// Plain-value [`rep_first_diff`].
pub fn rep_first_diff_values(v: &Tensor) -> Vec<f64> {
    (1..v.rows())
        .map(|r| {
            v.row_slice(r)
                .iter()
                .zip(v.row_slice(r - 1))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Population mean and standard deviation.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// `(x − μ)/(σ + ε)`; a series with `σ < ε` comes back as zeros, flagged constant.
pub fn standardize(x: &[f64], eps_std: f64) -> (Vec<f64>, bool) {
    let (mu, sd) = mean_std(x);
    if sd < eps_std {
        return (vec![0.0; x.len()], true);
    }
    (x.iter().map(|v| (v - mu) / (sd + eps_std)).collect(), false)
}

/// Tape version of [`standardize`] over an `n × 1` column.
pub fn standardize_var(
    t: &mut Tape<'_>,
    x: Var,
    eps_std: f64,
) -> Result<(Var, bool), PenaltyError> {
    let (_, sd) = mean_std(t.value(x).data());
    let n = t.shape(x)[0];
    if sd < eps_std {
        return Ok((t.constant(Tensor::zeros(n, 1)), true));
    }
    let mu = t.mean(x);
    let xc = t.sub(x, mu)?;
    let sq = t.square(xc);
    let var = t.mean(sq);
    let sd = t.sqrt(var)?;
    let denom = t.add_scalar(sd, eps_std);
    Ok((t.div(xc, denom)?, false))
}

/// `mean_t (ã_t − ŝ_t)²` over standardized series; 0 if either is constant.
pub fn c_shock(t: &mut Tape<'_>, a: Var, s: Var, eps_std: f64) -> Result<Var, PenaltyError> {
    let (na, ns) = (t.shape(a)[0], t.shape(s)[0]);
    if na != ns {
        return Err(PenaltyError::LengthMismatch(na, ns));
    }
    let (za, ca) = standardize_var(t, a, eps_std)?;
    let (zs, cs) = standardize_var(t, s, eps_std)?;
    if ca || cs {
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let d = t.sub(za, zs)?;
    let sq = t.square(d);
    Ok(t.mean(sq))
}

/// Values behind one window's shock-alignment term.
#[derive(Debug, Clone, PartialEq)]
pub struct ShockTrace {
    pub retro_mass: Vec<f64>,
    pub first_diff: Vec<f64>,
    pub retro_std: Vec<f64>,
    pub first_diff_std: Vec<f64>,
    pub mean_a: f64,
    pub std_a: f64,
    pub mean_s: f64,
    pub std_s: f64,
    pub constant: bool,
}

impl ShockTrace {
    /// `abar` is `T × T`, `v` has one anchor row plus `H` decoder rows.
    pub fn new(abar: &Tensor, v: &Tensor, start: usize, window: usize, eps_std: f64) -> Self {
        let a = retro_mass_values(abar, start, window);
        let s = rep_first_diff_values(v);
        let (mean_a, std_a) = mean_std(&a);
        let (mean_s, std_s) = mean_std(&s);
        let (ra, ca) = standardize(&a, eps_std);
        let (rs, cs) = standardize(&s, eps_std);
        Self {
            retro_mass: a,
            first_diff: s,
            retro_std: ra,
            first_diff_std: rs,
            mean_a,
            std_a,
            mean_s,
            std_s,
            constant: ca || cs,
        }
    }

    pub fn loss(&self) -> f64 {
        if self.constant {
            return 0.0;
        }
        self.retro_std
            .iter()
            .zip(&self.first_diff_std)
            .map(|(a, s)| (a - s).powi(2))
            .sum::<f64>()
            / self.retro_std.len() as f64
    }
}

/// Pearson correlation; `None` if either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mx, sx) = mean_std(x);
    let (my, sy) = mean_std(y);
    if sx == 0.0 || sy == 0.0 {
        return None;
    }
    let cov = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / x.len() as f64;
    Some(cov / (sx * sy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, Tape};
    use crate::schema::{Group, GroupAssignment};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn row_penalty_examples() {
        assert_eq!(embed_row_penalty(&[3.0, 4.0], 0.25, 0.0), 50.0);
        assert_eq!(embed_row_penalty(&[0.0, 0.0], 0.7, 1e-6), 0.0);
        let r = embed_row_penalty(&[3.0, 4.0], 0.0, 1e-6);
        assert!((r - 25_000.0).abs() < 1e-6);
    }

    #[test]
    fn c_embed_examples() {
        let table = Tensor::row(vec![3.0, 4.0]);
        let counts = CategoryCounts(vec![vec![5.0]]);
        assert_eq!(c_embed_value(&[&table], &counts, 0.0), 25.0);
        let mut t = Tape::new();
        let v = t.leaf(table.clone(), true);
        let c = c_embed(&mut t, &[v], &counts, 0.0).unwrap();
        assert_eq!(t.value(c).item(), 25.0);
        let zeros = Tensor::zeros(4, 3);
        let counts = CategoryCounts(vec![vec![1.0, 0.0, 2.0, 0.0]]);
        assert_eq!(c_embed_value(&[&zeros], &counts, 1e-6), 0.0);
        // No categories in the batch: every row sits at the cap.
        let counts = CategoryCounts(vec![vec![0.0]]);
        assert!((c_embed_value(&[&table], &counts, 1e-6) - 25_000.0).abs() < 1e-6);
    }

    #[test]
    fn c_embed_ignores_an_empty_zero_feature_only_through_averaging() {
        let a = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = Tensor::zeros(3, 2);
        let c1 = CategoryCounts(vec![vec![1.0, 1.0]]);
        let c2 = CategoryCounts(vec![vec![1.0, 1.0], vec![0.0, 0.0, 0.0]]);
        let one = c_embed_value(&[&a], &c1, 1e-6);
        let two = c_embed_value(&[&a, &z], &c2, 1e-6);
        assert!((two - one / 2.0).abs() < 1e-12);
    }

    #[test]
    fn c_embed_gradient_is_scaled_weight_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let table = Tensor::new(4, 3, data).unwrap();
        let counts = CategoryCounts(vec![vec![3.0, 1.0, 0.0, 4.0]]);
        let mut t = Tape::new();
        let v = t.leaf(table.clone(), true);
        let c = c_embed(&mut t, &[v], &counts, 1e-6).unwrap();
        let g = t.backward(c).unwrap();
        let g = g.wrt(v).unwrap();
        let p = batch_frequencies(&counts.0[0]);
        for k in 0..4 {
            let expect = embed_row_gradient(table.row_slice(k), p[k], 1e-6);
            for (a, b) in g.row_slice(k).iter().zip(expect) {
                // One feature, V = 4: the averaging factor is 1/4.
                assert!((a - b / 4.0).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
        let rep = grad_check(
            |t, x| {
                c_embed(t, &[x], &counts, 1e-6).map_err(|e| match e {
                    PenaltyError::Diff(d) => d,
                    _ => unreachable!(),
                })
            },
            &table,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{}", rep.max_rel_err);
    }

    fn groups() -> Tensor {
        GroupAssignment::from_groups(vec![Group::Unknown, Group::Known, Group::Observed])
            .transposed_tensor()
    }

    fn past_dist(w: Vec<f64>, g: &Tensor) -> Vec<f64> {
        let mut t = Tape::new();
        let n = w.len();
        let w = t.constant(Tensor::new(1, n, w).unwrap());
        let p = group_distribution_past(&mut t, w, g, 1e-6).unwrap();
        t.value(p).data().to_vec()
    }

    #[test]
    fn group_distribution_examples() {
        let g = groups();
        let p = past_dist(vec![0.0, 0.0, 1.0], &g);
        assert!(p[0] == 0.0 && p[1] == 0.0 && (p[2] - 1.0).abs() < 1e-6);
        let p = past_dist(vec![1.0 / 3.0; 3], &g);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-6));
        assert_eq!(past_dist(vec![0.0; 3], &g), vec![0.0; 3]);

        let mut t = Tape::new();
        let w = t.constant(Tensor::new(2, 2, vec![0.2, 0.8, 1e-3, 5.0]).unwrap());
        let p = group_distribution_future(&mut t, w).unwrap();
        assert_eq!(t.value(p).data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let h = entropy_rows(&mut t, p).unwrap();
        assert_eq!(t.value(h).data(), &[0.0, 0.0]);
        let z = t.constant(Tensor::zeros(1, 2));
        assert_eq!(
            group_distribution_future(&mut t, z).unwrap_err(),
            PenaltyError::AllZeroFutureWeights(0)
        );
    }

    fn c_group_of(p_hs: Vec<f64>, rows: usize, p_fut: Option<Vec<f64>>) -> f64 {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(rows, 3, p_hs).unwrap());
        let b = p_fut.map(|p| {
            let n = p.len() / 3;
            t.constant(Tensor::new(n, 3, p).unwrap())
        });
        let c = c_group(&mut t, a, b).unwrap();
        t.value(c).item()
    }

    #[test]
    fn c_group_examples() {
        assert_eq!(
            c_group_of(
                vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
                2,
                Some(vec![0.0, 1.0, 0.0])
            ),
            0.0
        );
        let v = c_group_of(vec![1.0 / 3.0; 3], 1, Some(vec![0.0, 1.0, 0.0]));
        assert!((v - 0.5 * 3f64.ln()).abs() < 1e-9);
        assert!((v - 0.5493).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn c_group_is_bounded(raw in prop::collection::vec(0.0f64..1.0, 3..30)) {
            let rows = raw.len() / 3;
            let mut p = Vec::new();
            for r in 0..rows {
                let s: f64 = raw[3 * r..3 * r + 3].iter().sum::<f64>() + 1e-12;
                p.extend(raw[3 * r..3 * r + 3].iter().map(|x| x / s));
            }
            let v = c_group_of(p.clone(), rows, Some(p));
            prop_assert!(v >= -1e-15 && v <= 3f64.ln() + 1e-12);
        }

        #[test]
        fn standardize_is_affine_invariant(
            x in prop::collection::vec(-10.0f64..10.0, 3..20),
            a in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
            b in -10.0f64..10.0,
        ) {
            let (zx, cx) = standardize(&x, 1e-8);
            prop_assume!(!cx && mean_std(&x).1 > 1e-3);
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let (zy, _) = standardize(&y, 1e-8);
            for (p, q) in zx.iter().zip(&zy) {
                prop_assert!((q - a.signum() * p).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn retro_mass_examples() {
        let n = 6;
        let mut a = Tensor::zeros(n, n);
        a.set(5, 5, 1.0);
        a.set(4, 3, 1.0 / 3.0);
        a.set(4, 2, 1.0 / 3.0);
        a.set(4, 1, 1.0 / 3.0);
        a.set(3, 3, 1.0);
        for r in 0..3 {
            a.set(r, 0, 1.0);
        }
        let mut lag4 = a.clone();
        lag4.set(5, 5, 0.0);
        lag4.set(5, 1, 1.0);
        assert_eq!(retro_mass_values(&a, 3, 3), vec![0.0, 1.0, 0.0]);
        assert_eq!(retro_mass_values(&lag4, 5, 3), vec![0.0]);
        let mut t = Tape::new();
        let v = t.constant(a);
        let m = retro_mass(&mut t, v, 3, 3).unwrap();
        assert_eq!(t.value(m).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn first_difference_examples() {
        let v = Tensor::new(3, 3, vec![1.0, 1.0, 1.0, 4.0, 5.0, 1.0, 4.0, 5.0, 1.0]).unwrap();
        assert_eq!(rep_first_diff_values(&v), vec![5.0, 0.0]);
        let mut t = Tape::new();
        let x = t.constant(v);
        let d = rep_first_diff(&mut t, x).unwrap();
        assert_eq!(t.value(d).data(), &[5.0, 0.0]);
        let short = t.constant(Tensor::zeros(2, 3));
        assert!(matches!(
            rep_first_diff(&mut t, short),
            Err(PenaltyError::TooShortHorizon(1))
        ));
    }

    #[test]
    fn standardize_examples() {
        let (z, c) = standardize(&[1.0, 2.0, 3.0], 0.0);
        assert!(!c);
        let (m, s) = mean_std(&z);
        assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
        // ε in the denominator shrinks the std by σ/(σ + ε).
        let (z, _) = standardize(&[1.0, 2.0, 3.0], 1e-8);
        let (m, s) = mean_std(&z);
        assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-6);
        assert_eq!(standardize(&[2.0; 4], 1e-8), (vec![0.0; 4], true));
    }

    #[test]
    fn c_shock_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::column(vec![1.0, -1.0]));
        let s = t.constant(Tensor::column(vec![-1.0, 1.0]));
        let c = c_shock(&mut t, a, s, 0.0).unwrap();
        assert_eq!(t.value(c).item(), 4.0);
        let c = c_shock(&mut t, a, a, 1e-8).unwrap();
        assert_eq!(t.value(c).item(), 0.0);
        let k = t.constant(Tensor::column(vec![3.0, 3.0]));
        let c = c_shock(&mut t, a, k, 1e-8).unwrap();
        assert_eq!(t.value(c).item(), 0.0);
        let short = t.constant(Tensor::column(vec![1.0]));
        assert!(matches!(
            c_shock(&mut t, a, short, 1e-8),
            Err(PenaltyError::LengthMismatch(2, 1))
        ));
    }

    #[test]
    fn c_shock_full_chain_gradient() {
        // attention logits → causal softmax → retro mass, and states → first differences.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, start, d) = (7, 3, 3);
        let data: Vec<f64> = (0..n * n + (n - start + 1) * d)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let x = Tensor::row(data);
        let f = |t: &mut Tape<'_>, x: Var| -> Result<Var, DiffError> {
            let logits = t.slice_cols(x, 0, n * n)?;
            let states = t.slice_cols(x, n * n, (n - start + 1) * d)?;
            let rows: Vec<Var> = (0..n)
                .map(|r| t.slice_cols(logits, r * n, n))
                .collect::<Result<_, _>>()?;
            let logits = t.concat_rows(&rows)?;
            let mask: Vec<bool> = (0..n * n).map(|i| i % n > i / n).collect();
            let masked = t.masked_fill(logits, &mask, f64::NEG_INFINITY)?;
            let abar = t.softmax(masked, Axis::PerRow);
            let rows: Vec<Var> = (0..n - start + 1)
                .map(|r| t.slice_cols(states, r * d, d))
                .collect::<Result<_, _>>()?;
            let v = t.concat_rows(&rows)?;
            let a = retro_mass(t, abar, start, 3).map_err(unwrap_diff)?;
            let s = rep_first_diff(t, v).map_err(unwrap_diff)?;
            c_shock(t, a, s, 1e-8).map_err(unwrap_diff)
        };
        let rep = grad_check(f, &x, 1e-5).unwrap();
        assert!(rep.is_smooth());
        assert!(rep.max_rel_err < 1e-4, "{}", rep.max_rel_err);
    }

    fn unwrap_diff(e: PenaltyError) -> DiffError {
        match e {
            PenaltyError::Diff(d) => d,
            other => panic!("{other}"),
        }
    }

    #[test]
    fn shock_trace_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        let mut abar = Tensor::zeros(n, n);
        for r in 0..n {
            let w: Vec<f64> = (0..=r).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = w.iter().sum();
            for (c, x) in w.iter().enumerate() {
                abar.set(r, c, x / s);
            }
        }
        let v = Tensor::new(4, 2, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let trace = ShockTrace::new(&abar, &v, 3, 3, 1e-8);
        let mut t = Tape::new();
        let a = t.constant(abar);
        let vv = t.constant(v);
        let a = retro_mass(&mut t, a, 3, 3).unwrap();
        let s = rep_first_diff(&mut t, vv).unwrap();
        let c = c_shock(&mut t, a, s, 1e-8).unwrap();
        assert!((t.value(c).item() - trace.loss()).abs() < 1e-12);
        assert!(trace
            .retro_mass
            .iter()
            .all(|a| (0.0..=1.0 + 1e-12).contains(a)));
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_none());
    }
}

//! Objective, optimizer and the training loop.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::ingest::PatientSeries;
use crate::labeler::{default_delta, DeltaTable, LabelError};
use crate::model::{CategoryCounts, ForwardMode, ForwardOutput, ModelError, OmniTft};
use crate::par::{self, Execution};
use crate::penalties::{self, PenaltyError, PenaltyWeights};
use crate::sampler::{
    balanced_epoch, enumerate_windows, window_scores, SamplerError, WindowSample,
};
use crate::schema::Schema;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} split has no windows")]
    EmptySplit(&'static str),
    #[error("every target step is masked")]
    AllMasked,
    #[error("non-finite objective at epoch {epoch}")]
    Diverged {
        epoch: usize,
        /// Best-validation model so far (the initial model if no epoch finished).
        last_good: Box<OmniTft>,
        history: Vec<EpochRecord>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Penalty(#[from] PenaltyError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<DiffError> for TrainError {
    fn from(e: DiffError) -> Self {
        TrainError::Model(ModelError::Diff(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub clip: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Drives epoch sampling and dropout masks.
    pub seed: u64,
    pub penalties: PenaltyWeights,
    pub quantiles: Vec<f64>,
    /// Undersample the majority regime each epoch; off uses every window.
    pub balance: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch: 64,
            clip: 1.0,
            max_epochs: 300,
            patience: 10,
            seed: 0,
            penalties: PenaltyWeights::default(),
            quantiles: vec![0.1, 0.5, 0.9],
            balance: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive".into());
        }
        self.penalties.validate().map_err(TrainError::InvalidConfig)
    }
}

// ---------------------------------------------------------------------------
// Loss

/// `ρ_q(e) = max(q·e, (q − 1)·e)` with `e = y − ŷ`.
pub fn pinball(q: f64, y: f64, yhat: f64) -> f64 {
    let e = y - yhat;
    (q * e).max((q - 1.0) * e)
}

/// Mean pinball loss over unmasked horizon steps and all quantiles.
/// `pred[h][k]` is the quantile-`k` forecast at step `h`.
pub fn quantile_loss(
    pred: &[[f64; 3]],
    actual: &[f64],
    mask: &[bool],
    quantiles: &[f64],
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for ((p, &y), &m) in pred.iter().zip(actual).zip(mask) {
        if !m {
            continue;
        }
        for (k, &q) in quantiles.iter().enumerate() {
            total += pinball(q, y, p[k]);
        }
        n += quantiles.len();
    }
    if n == 0 {
        return Err(TrainError::AllMasked);
    }
    Ok(total / n as f64)
}

/// Tape version of [`quantile_loss`]; `pred` is `H × Q`, `actual` is `H × 1`.
/// Written as `(q − 1)·e + relu(e)` so the subgradient at `e = 0` is `q − 1`.
pub fn quantile_loss_var(
    t: &mut Tape<'_>,
    pred: Var,
    actual: &Tensor,
    mask: &[bool],
    quantiles: &[f64],
) -> Result<Var, TrainError> {
    let [h, nq] = t.shape(pred);
    let kept = mask.iter().filter(|&&m| m).count();
    if kept == 0 {
        return Err(TrainError::AllMasked);
    }
    let y = t.constant(actual.clone());
    let d = t.sub(pred, y)?;
    let e = t.neg(d);
    let slopes = Tensor::new(
        h,
        nq,
        (0..h)
            .flat_map(|_| quantiles.iter().map(|q| q - 1.0))
            .collect(),
    )?;
    let lin = t.mul_const(e, &slopes)?;
    let hinge = t.relu(e);
    let l = t.add(lin, hinge)?;
    let l = if kept < h {
        let m = Tensor::new(
            h,
            nq,
            mask.iter()
                .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, nq))
                .collect(),
        )?;
        t.mul_const(l, &m)?
    } else {
        l
    };
    let s = t.sum(l);
    Ok(t.scale(s, 1.0 / (kept * nq) as f64))
}

/// The terms of the training objective for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ObjectiveBreakdown {
    pub l_quantile: f64,
    pub c_embed: f64,
    pub c_group: f64,
    pub c_shock: f64,
    pub l_total: f64,
}

impl ObjectiveBreakdown {
    pub fn compose(
        l_quantile: f64,
        c_embed: f64,
        c_group: f64,
        c_shock: f64,
        w: &PenaltyWeights,
    ) -> Self {
        Self {
            l_quantile,
            c_embed,
            c_group,
            c_shock,
            l_total: l_quantile
                + w.lambda_embed * c_embed
                + w.lambda_group * c_group
                + w.lambda_shock * c_shock,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_quantile,
            self.c_embed,
            self.c_group,
            self.c_shock,
            self.l_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Per-window terms on a live tape.
pub struct WindowTerms {
    pub l_quantile: Var,
    pub c_group: Var,
    pub c_shock: Var,
    pub output: ForwardOutput,
}

/// Builds the per-window loss terms (everything except the batch-level `C_embed`).
pub fn window_terms(
    model: &OmniTft,
    t: &mut Tape<'_>,
    w: &WindowSample,
    mode: ForwardMode,
    weights: &PenaltyWeights,
) -> Result<WindowTerms, TrainError> {
    let out = model.forward(t, w, mode)?;
    let h = out.target.rows();
    let l_quantile = quantile_loss_var(
        t,
        out.quantiles,
        &out.target,
        &vec![true; h],
        &model.config().quantiles,
    )?;
    let g = model.schema().group_assignment().transposed_tensor();
    let p_hs = penalties::group_distribution_past(t, out.past_weights, &g, weights.eps_group)?;
    let p_fut = match out.future_weights {
        Some(wf) => Some(penalties::group_distribution_future(t, wf)?),
        None => None,
    };
    let c_group = penalties::c_group(t, p_hs, p_fut)?;
    let e = model.schema().encoder_len();
    let a = penalties::retro_mass(t, out.attention, e, model.config().retro_window)?;
    let s = penalties::rep_first_diff(t, out.representation)?;
    let c_shock = penalties::c_shock(t, a, s, weights.eps_std)?;
    Ok(WindowTerms {
        l_quantile,
        c_group,
        c_shock,
        output: out,
    })
}

/// `C_embed` over the model's embedding tables for the given batch counts.
pub fn embed_term(
    model: &OmniTft,
    t: &mut Tape<'_>,
    counts: &CategoryCounts,
    eps: f64,
) -> Result<Var, TrainError> {
    let tables: Vec<Var> = model
        .embedding_tables()
        .into_iter()
        .map(|id| t.param(id))
        .collect();
    Ok(penalties::c_embed(t, &tables, counts, eps)?)
}

struct WindowResult {
    lq: f64,
    cg: f64,
    cs: f64,
    counts: CategoryCounts,
    grads: Option<Vec<Tensor>>,
}

/// Objective over a batch and, when `with_grad`, its gradient aligned with
/// the model's parameter store. `seeds[i]` is the dropout seed of window `i`
/// (`None` evaluates without dropout).
pub fn batch_objective(
    model: &OmniTft,
    batch: &[&WindowSample],
    seeds: Option<&[u64]>,
    weights: &PenaltyWeights,
    with_grad: bool,
    exec: Execution,
) -> Result<(ObjectiveBreakdown, Option<Vec<Tensor>>), TrainError> {
    let n = batch.len();
    if n == 0 {
        return Err(TrainError::EmptySplit("batch"));
    }
    let inv = 1.0 / n as f64;
    let results = par::map_range(exec, n, |i| -> Result<WindowResult, TrainError> {
        let mode = match seeds {
            Some(s) => ForwardMode::Train { seed: s[i] },
            None => ForwardMode::Eval,
        };
        let mut t = Tape::with_params(model.params());
        let terms = window_terms(model, &mut t, batch[i], mode, weights)?;
        let lq = t.value(terms.l_quantile).item();
        let cg = t.value(terms.c_group).item();
        let cs = t.value(terms.c_shock).item();
        let grads = if with_grad {
            let g = t.scale(terms.c_group, weights.lambda_group);
            let s = t.scale(terms.c_shock, weights.lambda_shock);
            let l = t.add(terms.l_quantile, g)?;
            let l = t.add(l, s)?;
            let l = t.scale(l, inv);
            let grads = t.backward(l)?;
            Some(grads.param_grads(&t, model.params()))
        } else {
            None
        };
        Ok(WindowResult {
            lq,
            cg,
            cs,
            counts: terms.output.counts,
            grads,
        })
    });
    let mut counts = CategoryCounts::default();
    let (mut lq, mut cg, mut cs) = (0.0, 0.0, 0.0);
    let mut acc: Option<Vec<Tensor>> = None;
    for r in results {
        let r = r?;
        lq += r.lq;
        cg += r.cg;
        cs += r.cs;
        counts.add(&r.counts);
        if let Some(g) = r.grads {
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => {
                    for (x, y) in a.iter_mut().zip(&g) {
                        for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                            *p += q;
                        }
                    }
                }
            }
        }
    }
    let mut t = Tape::with_params(model.params());
    let ce_var = embed_term(model, &mut t, &counts, weights.eps_embed)?;
    let ce = t.value(ce_var).item();
    if let Some(a) = acc.as_mut() {
        if !model.embedding_tables().is_empty() {
            let l = t.scale(ce_var, weights.lambda_embed);
            let g = t.backward(l)?;
            g.accumulate_params(&t, a, 1.0);
        }
    }
    let breakdown = ObjectiveBreakdown::compose(lq * inv, ce, cg * inv, cs * inv, weights);
    Ok((breakdown, acc))
}

// ---------------------------------------------------------------------------
// Optimizer

/// Global-norm clipping; returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Data plumbing

/// Per-target cutoffs: overrides where given, else the 75th percentile of
/// training-window fluctuation scores.
pub fn estimate_deltas(
    train: &[PatientSeries],
    schema: &Schema,
    overrides: &DeltaTable,
) -> Result<BTreeMap<String, f64>, TrainError> {
    let mut out = BTreeMap::new();
    for &target in schema.targets() {
        let name = schema.feature(target).name.clone();
        let delta = match overrides.get(&name) {
            Some(d) => d,
            None => {
                let scores: Vec<f64> = train
                    .iter()
                    .flat_map(|s| window_scores(s, schema, target))
                    .collect();
                default_delta(&scores)?
            }
        };
        out.insert(name, delta);
    }
    Ok(out)
}

/// Every window of every target; series shorter than one window are skipped.
pub fn build_windows(
    series: &[PatientSeries],
    schema: &Schema,
    deltas: &BTreeMap<String, f64>,
    stride: usize,
) -> Result<Vec<WindowSample>, TrainError> {
    let mut out = Vec::new();
    for &target in schema.targets() {
        let delta = deltas
            .get(&schema.feature(target).name)
            .copied()
            .ok_or_else(|| {
                TrainError::InvalidConfig(format!("no delta for {}", schema.feature(target).name))
            })?;
        for s in series {
            match enumerate_windows(s, schema, target, delta, stride) {
                Ok(w) => out.extend(w),
                Err(SamplerError::SeriesTooShort { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_quantile: f64,
    pub c_embed: f64,
    pub c_group: f64,
    pub c_shock: f64,
    pub l_total: f64,
    pub val_loss: f64,
    pub single_class: bool,
}

pub fn write_history_csv<W: Write>(out: W, history: &[EpochRecord]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "epoch",
        "L_quantile",
        "C_embed",
        "C_group",
        "C_shock",
        "L_total",
        "val_loss",
    ])
    .map_err(csv_io)?;
    for r in history {
        w.write_record(&[
            r.epoch.to_string(),
            format!("{:e}", r.l_quantile),
            format!("{:e}", r.c_embed),
            format!("{:e}", r.c_group),
            format!("{:e}", r.c_shock),
            format!("{:e}", r.l_total),
            format!("{:e}", r.val_loss),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> TrainError {
    TrainError::Io(std::io::Error::other(e))
}

/// Patience-based early stopping on a loss to minimise.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> StopSignal {
        if loss < self.best {
            self.best = loss;
            self.since_best = 0;
            return StopSignal::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopSignal::Stop
        } else {
            StopSignal::Continue
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation epoch.
    pub model: OmniTft,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Mean evaluation-mode quantile loss over `windows`.
pub fn validation_loss(
    model: &OmniTft,
    windows: &[WindowSample],
    exec: Execution,
) -> Result<f64, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let losses = par::map(exec, windows, |w| -> Result<f64, TrainError> {
        let mut t = Tape::with_params(model.params());
        let out = model.forward(&mut t, w, ForwardMode::Eval)?;
        let h = out.target.rows();
        let l = quantile_loss_var(
            &mut t,
            out.quantiles,
            &out.target,
            &vec![true; h],
            &model.config().quantiles,
        )?;
        Ok(t.value(l).item())
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / windows.len() as f64)
}

/// Batches for one epoch: a balanced draw per target, chunked, then
/// interleaved round-robin across targets.
fn epoch_batches(
    windows: &[WindowSample],
    targets: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<usize>>, bool) {
    let mut per_target = Vec::new();
    let mut single = false;
    for &target in targets {
        let idx: Vec<usize> = (0..windows.len())
            .filter(|&i| windows[i].target == target)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let chosen: Vec<usize> = if cfg.balance {
            let labels: Vec<_> = idx.iter().map(|&i| windows[i].label).collect();
            let epoch = balanced_epoch(&labels, rng);
            single |= epoch.single_class;
            epoch.indices.iter().map(|&k| idx[k]).collect()
        } else {
            use rand::seq::SliceRandom;
            let mut all = idx;
            all.shuffle(rng);
            all
        };
        per_target.push(
            chosen
                .chunks(cfg.batch)
                .map(<[usize]>::to_vec)
                .collect::<Vec<_>>(),
        );
    }
    let rounds = per_target.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for r in 0..rounds {
        for t in &per_target {
            if let Some(b) = t.get(r) {
                out.push(b.clone());
            }
        }
    }
    (out, single)
}

/// Optimizes the full objective; returns the best-validation model.
pub fn train(
    model: OmniTft,
    train_windows: &[WindowSample],
    val_windows: &[WindowSample],
    cfg: &TrainConfig,
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if cfg.quantiles != model.config().quantiles {
        return Err(TrainError::InvalidConfig(
            "training quantiles differ from the model's".into(),
        ));
    }
    if train_windows.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if val_windows.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let targets = model.schema().targets().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = model;
    let mut adam = Adam::new(cfg.lr, model.params().tensors());
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let (batches, single_class) = epoch_batches(train_windows, &targets, cfg, &mut rng);
        let mut sum = ObjectiveBreakdown::default();
        for b in &batches {
            let seeds: Vec<u64> = b.iter().map(|_| rng.random()).collect();
            let refs: Vec<&WindowSample> = b.iter().map(|&i| &train_windows[i]).collect();
            let (obj, grads) =
                batch_objective(&model, &refs, Some(&seeds), &cfg.penalties, true, exec)?;
            let mut grads = grads.expect("gradients requested");
            if !obj.is_finite() || !grads.iter().all(Tensor::is_finite) {
                return Err(TrainError::Diverged {
                    epoch,
                    last_good: Box::new(best),
                    history,
                });
            }
            clip_gradients(&mut grads, cfg.clip);
            adam.update(model.params_mut().tensors_mut(), &grads);
            sum.l_quantile += obj.l_quantile;
            sum.c_embed += obj.c_embed;
            sum.c_group += obj.c_group;
            sum.c_shock += obj.c_shock;
        }
        let nb = batches.len().max(1) as f64;
        let mean = ObjectiveBreakdown::compose(
            sum.l_quantile / nb,
            sum.c_embed / nb,
            sum.c_group / nb,
            sum.c_shock / nb,
            &cfg.penalties,
        );
        let val = validation_loss(&model, val_windows, exec)?;
        if !val.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                last_good: Box::new(best),
                history,
            });
        }
        let record = EpochRecord {
            epoch,
            l_quantile: mean.l_quantile,
            c_embed: mean.c_embed,
            c_group: mean.c_group,
            c_shock: mean.c_shock,
            l_total: mean.l_total,
            val_loss: val,
            single_class,
        };
        on_epoch(&record);
        history.push(record);
        match stopper.observe(val) {
            StopSignal::Improved => {
                best_epoch = epoch;
                best = model.clone();
            }
            StopSignal::Continue => {}
            StopSignal::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        best_val_loss: stopper.best,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Normalizer};
    use crate::schema::{DatasetSchema, FeatureSpec, Role};

    #[test]
    fn pinball_examples() {
        assert!((pinball(0.9, 1.0, 0.0) - 0.9).abs() < 1e-15);
        assert!((pinball(0.9, 0.0, 1.0) - 0.1).abs() < 1e-15);
        let pred = [[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]];
        assert_eq!(
            quantile_loss(&pred, &[1.0, 2.0], &[true, true], &[0.1, 0.5, 0.9]).unwrap(),
            0.0
        );
        assert!(matches!(
            quantile_loss(&pred, &[1.0, 2.0], &[false, false], &[0.1, 0.5, 0.9]),
            Err(TrainError::AllMasked)
        ));
    }

    #[test]
    fn tape_loss_matches_plain_and_masks() {
        let q = [0.1, 0.5, 0.9];
        let pred = [[0.5, 1.0, 3.0], [2.0, -1.0, 0.0], [7.0, 7.0, 7.0]];
        let y = [1.0, 0.5, 100.0];
        let mask = [true, true, false];
        let plain = quantile_loss(&pred, &y, &mask, &q).unwrap();
        let mut t = Tape::new();
        let p = t.constant(
            Tensor::from_rows(&pred.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
        );
        let l = quantile_loss_var(&mut t, p, &Tensor::column(y.to_vec()), &mask, &q).unwrap();
        assert!((t.value(l).item() - plain).abs() < 1e-15);
    }

    #[test]
    fn kink_subgradient_is_the_under_branch() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::row(vec![1.0, 1.0, 1.0]), true);
        let l = quantile_loss_var(
            &mut t,
            p,
            &Tensor::column(vec![1.0]),
            &[true],
            &[0.1, 0.5, 0.9],
        )
        .unwrap();
        let g = t.backward(l).unwrap();
        // d/dŷ of (q − 1)(y − ŷ) is 1 − q, averaged over 3 quantiles.
        let g = g.wrt(p).unwrap().data().to_vec();
        for (gi, q) in g.iter().zip([0.1, 0.5, 0.9]) {
            assert!((gi - (1.0 - q) / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn breakdown_identity() {
        let w = PenaltyWeights::default();
        let b = ObjectiveBreakdown::compose(0.7, 3.0, 1.1, 0.4, &w);
        assert!((b.l_total - (0.7 + 1e-3 * 3.0 + 1e-2 * 1.1 + 1e-1 * 0.4)).abs() <= 1e-12);
        let b = ObjectiveBreakdown::compose(0.7, 3.0, 1.1, 0.4, &PenaltyWeights::zero());
        assert_eq!(b.l_total, 0.7);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::row(vec![0.3, 0.4])];
        assert_eq!(clip_gradients(&mut g, 1.0), 0.5);
        assert_eq!(g[0].data(), &[0.3, 0.4]);
        let mut g = vec![Tensor::row(vec![0.0, 4.0]), Tensor::zeros(1, 1)];
        let norm = clip_gradients(&mut g, 1.0);
        assert_eq!(norm, 4.0);
        let after: f64 = g.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-9);
        let mut g = vec![Tensor::row(vec![3.0, -4.0, 12.0])];
        clip_gradients(&mut g, 1.0);
        let d = g[0].data();
        let cos = (3.0 * d[0] - 4.0 * d[1] + 12.0 * d[2]) / 13.0;
        assert!((cos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![Tensor::row(vec![1.0, -2.0])];
        let mut adam = Adam::new(1e-3, &p);
        adam.update(&mut p, &[Tensor::zeros(1, 2)]);
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(adam.step, 1);

        let mut p = vec![Tensor::row(vec![0.0, 0.0])];
        let mut adam = Adam::new(1e-3, &p);
        adam.update(&mut p, &[Tensor::row(vec![0.5, -50.0])]);
        assert!((p[0].get(0, 0) + 1e-3).abs() < 1e-9);
        assert!((p[0].get(0, 1) - 1e-3).abs() < 1e-9);

        let run = || {
            let mut p = vec![Tensor::row(vec![0.5, 0.1])];
            let mut a = Adam::new(1e-2, &p);
            for k in 0..5 {
                a.update(&mut p, &[Tensor::row(vec![k as f64, -1.0])]);
            }
            p
        };
        assert_eq!(run(), run());
    }

    fn schema() -> Schema {
        DatasetSchema {
            features: vec![
                FeatureSpec::continuous("y", Role::Target, ""),
                FeatureSpec::continuous("k", Role::KnownFuture, ""),
                FeatureSpec::categorical("c", Role::Static, 3),
            ],
            grid_step_min: 60.0,
            encoder_len: 4,
            horizon_len: 3,
        }
        .validate()
        .unwrap()
    }

    fn windows(n: usize, seed: u64) -> Vec<WindowSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let cat = (i % 3) as f64;
                let rows = (0..7)
                    .flat_map(|t| {
                        let k = (t as f64 * 0.7).sin();
                        [k + cat + rng.random_range(-0.1..0.1), k, cat]
                    })
                    .collect();
                WindowSample::from_rows(format!("p{i}"), 0, 4, 3, 3, rows, 0.5)
            })
            .collect()
    }

    fn toy_model(seed: u64) -> OmniTft {
        let s = schema();
        let cfg = ModelConfig {
            init_seed: seed,
            ..ModelConfig::tiny(8, 2)
        };
        OmniTft::new(s.clone(), cfg, Normalizer::identity(3)).unwrap()
    }

    #[test]
    fn batch_objective_is_exec_independent() {
        let m = toy_model(1);
        let ws = windows(6, 1);
        let refs: Vec<&WindowSample> = ws.iter().collect();
        let seeds = [1, 2, 3, 4, 5, 6];
        let w = PenaltyWeights::default();
        let (a, ga) =
            batch_objective(&m, &refs, Some(&seeds), &w, true, Execution::Parallel).unwrap();
        let (b, gb) =
            batch_objective(&m, &refs, Some(&seeds), &w, true, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        assert!(
            (a.l_total - (a.l_quantile + 1e-3 * a.c_embed + 1e-2 * a.c_group + 1e-1 * a.c_shock))
                .abs()
                <= 1e-12
        );
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let ws = windows(12, 2);
        let cfg = TrainConfig {
            lr: 3e-3,
            batch: 4,
            max_epochs: 6,
            patience: 100,
            ..TrainConfig::default()
        };
        let run = || train(toy_model(3), &ws, &ws, &cfg, Execution::default(), |_| {}).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params(), b.model.params());
        assert!(a.history.last().unwrap().val_loss < a.history[0].val_loss);
    }

    #[test]
    fn patience_rule() {
        let mut s = EarlyStopping::new(10);
        assert_eq!(s.observe(1.0), StopSignal::Improved);
        for k in 0..9 {
            assert_eq!(s.observe(1.0 + k as f64), StopSignal::Continue);
        }
        assert_eq!(s.observe(20.0), StopSignal::Stop);
        let mut s = EarlyStopping::new(2);
        s.observe(1.0);
        s.observe(2.0);
        assert_eq!(s.observe(0.5), StopSignal::Improved);
        assert_eq!(s.since_best, 0);
    }

    #[test]
    fn history_csv_header() {
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &[]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap().trim(),
            "epoch,L_quantile,C_embed,C_group,C_shock,L_total,val_loss"
        );
    }
}

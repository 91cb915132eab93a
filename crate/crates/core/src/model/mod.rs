//! The forecasting network: per-variable embeddings, variable selection,
//! static covariate contexts, LSTM encoder/decoder, stacked interpretable
//! attention blocks and a quantile head.
//!
//! All inputs and targets are standardized with a [`Normalizer`] fitted on
//! the training split; [`ForecastBundle`] quantiles are mapped back to
//! physical units.

mod checkpoint;
pub(crate) mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::ingest::PatientSeries;
use crate::sampler::WindowSample;
use crate::schema::Schema;
use layers::{
    average_heads, Dropout, GateAddNorm, Grn, Init, InterpretableAttention, Linear, LstmLayer,
    VariableSelection,
};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("feature {feature:?}: value {value} is not a category index below {vocab}")]
    CategoryOutOfVocab {
        feature: String,
        value: f64,
        vocab: usize,
    },
    #[error("window does not match the model schema: {0}")]
    WindowMismatch(String),
    #[error("feature {0:?} is not a target")]
    NotATarget(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which hidden state serves as the per-step decoder representation `v_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Output of the last attention block's GRN.
    #[default]
    PostAttention,
    /// Raw top-layer LSTM state.
    LstmDecoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub attention_blocks: usize,
    pub dropout: f64,
    pub quantiles: Vec<f64>,
    pub lstm_layers: usize,
    pub retro_window: usize,
    pub representation: Representation,
    /// Seed of the parameter initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            heads: 6,
            attention_blocks: 4,
            dropout: 0.3,
            quantiles: vec![0.1, 0.5, 0.9],
            lstm_layers: 2,
            retro_window: 3,
            representation: Representation::PostAttention,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and desk-scale experiments.
    pub fn tiny(hidden: usize, heads: usize) -> Self {
        Self {
            hidden,
            heads,
            attention_blocks: 1,
            dropout: 0.0,
            lstm_layers: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.hidden == 0 || self.heads == 0 {
            return bad("hidden width and head count must be positive");
        }
        // The head dimension is floor(d / M); d = 128 with 6 heads gives 21.
        if self.heads > self.hidden {
            return bad("more heads than hidden units");
        }
        if self.attention_blocks == 0 || self.lstm_layers == 0 {
            return bad("need at least one attention block and one LSTM layer");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.quantiles.len() != 3 {
            return bad("exactly three quantiles (P10, P50, P90 style) are supported");
        }
        if self.quantiles.iter().any(|&q| !(q > 0.0 && q < 1.0))
            || self.quantiles.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("quantiles must be strictly increasing in (0, 1)");
        }
        if self.retro_window == 0 {
            return bad("retro window must be at least 1");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Per-feature affine standardization. Categorical features keep mean 0, std 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(n_features: usize) -> Self {
        Self {
            mean: vec![0.0; n_features],
            std: vec![1.0; n_features],
        }
    }

    /// Population mean and std of every continuous feature over `series`.
    pub fn fit(series: &[PatientSeries], schema: &Schema) -> Self {
        let nf = schema.num_features();
        let mut out = Self::identity(nf);
        for f in 0..nf {
            if schema.feature(f).is_categorical() {
                continue;
            }
            let vals: Vec<f64> = series
                .iter()
                .flat_map(|s| s.column(f))
                .filter(|v| v.is_finite())
                .collect();
            out.set_from(f, &vals);
        }
        out
    }

    /// Same as [`Normalizer::fit`] but over window rows.
    pub fn fit_windows(windows: &[WindowSample], schema: &Schema) -> Self {
        let nf = schema.num_features();
        let mut out = Self::identity(nf);
        for f in 0..nf {
            if schema.feature(f).is_categorical() {
                continue;
            }
            let vals: Vec<f64> = windows
                .iter()
                .flat_map(|w| (0..w.encoder_len() + w.horizon_len()).map(move |t| w.value(t, f)))
                .collect();
            out.set_from(f, &vals);
        }
        out
    }

    fn set_from(&mut self, f: usize, vals: &[f64]) {
        if vals.is_empty() {
            return;
        }
        let n = vals.len() as f64;
        let mu = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        self.mean[f] = mu;
        self.std[f] = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
    }

    #[inline]
    pub fn scale(&self, f: usize, x: f64) -> f64 {
        (x - self.mean[f]) / self.std[f]
    }

    #[inline]
    pub fn unscale(&self, f: usize, z: f64) -> f64 {
        z * self.std[f] + self.mean[f]
    }
}

/// Dropout on (`Train`) or off (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    Train { seed: u64 },
}

/// Category occurrence counts per categorical feature, in
/// [`OmniTft::categorical_features`] order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CategoryCounts(pub Vec<Vec<f64>>);

impl CategoryCounts {
    pub fn add(&mut self, other: &CategoryCounts) {
        if self.0.is_empty() {
            self.0 = other.0.clone();
            return;
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `H × 3` raw quantile outputs in standardized target units.
    pub quantiles: Var,
    /// Per-head `T × T` surfaces of the final attention block.
    pub attention_heads: Vec<Var>,
    /// Head average `Ā`.
    pub attention: Var,
    /// `E × N_h` past selection weights.
    pub past_weights: Var,
    /// `H × N_f` known-future selection weights, absent without known inputs.
    pub future_weights: Option<Var>,
    /// `1 × N_s` static selection weights.
    pub static_weights: Option<Var>,
    /// `(H + 1) × d`: rows `E − 1 ..= T − 1`. Row 0 anchors the first difference.
    pub representation: Var,
    pub counts: CategoryCounts,
    /// Standardized future targets, `H × 1`.
    pub target: Tensor,
}

/// Plain-value forecast for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastBundle {
    pub target: usize,
    /// Raw (possibly crossing) quantiles in physical units, one row per horizon step.
    pub quantiles: Vec<[f64; 3]>,
    pub attention: Tensor,
    pub attention_heads: Vec<Tensor>,
    pub past_weights: Tensor,
    pub future_weights: Option<Tensor>,
    /// `H × d` decoder representations.
    pub decoder_states: Tensor,
    /// `1 × d` representation at the last encoder step.
    pub anchor_state: Tensor,
}

impl ForecastBundle {
    /// Quantiles sorted per step; the flag reports whether any step crossed.
    pub fn sorted_quantiles(&self) -> (Vec<[f64; 3]>, bool) {
        let mut crossed = false;
        let sorted = self
            .quantiles
            .iter()
            .map(|q| {
                let mut s = *q;
                s.sort_by(f64::total_cmp);
                crossed |= s != *q;
                s
            })
            .collect();
        (sorted, crossed)
    }

    pub fn track(&self, k: usize) -> Vec<f64> {
        self.quantiles.iter().map(|q| q[k]).collect()
    }

    /// Retro mass and representation differences over the decoder steps.
    pub fn shock_trace(&self, window: usize, eps_std: f64) -> crate::penalties::ShockTrace {
        let d = self.decoder_states.cols();
        let mut v = self.anchor_state.data().to_vec();
        v.extend_from_slice(self.decoder_states.data());
        let v = Tensor::new(self.decoder_states.rows() + 1, d, v).expect("consistent shapes");
        let start = self.attention.rows() - self.decoder_states.rows();
        crate::penalties::ShockTrace::new(&self.attention, &v, start, window, eps_std)
    }
}

#[derive(Debug, Clone, Copy)]
enum Embedding {
    Continuous {
        w: ParamId,
        b: ParamId,
    },
    Categorical {
        table: ParamId,
        slot: usize,
        vocab: usize,
    },
}

#[derive(Debug, Clone)]
struct StaticEncoder {
    selection: VariableSelection,
    selection_ctx: Grn,
    enrichment_ctx: Grn,
    state_h: Grn,
    state_c: Grn,
}

#[derive(Debug, Clone)]
struct AttentionBlock {
    attention: InterpretableAttention,
    post_attention: GateAddNorm,
    feed_forward: Grn,
}

#[derive(Debug, Clone)]
struct Network {
    embeddings: Vec<Embedding>,
    statics: Option<StaticEncoder>,
    past_vsn: VariableSelection,
    future_vsn: Option<VariableSelection>,
    encoder: Vec<LstmLayer>,
    decoder: Vec<LstmLayer>,
    post_lstm: GateAddNorm,
    enrichment: Grn,
    blocks: Vec<AttentionBlock>,
    output_skip: GateAddNorm,
    head: Linear,
}

/// Parameters plus everything needed to run them on a window.
#[derive(Debug, Clone)]
pub struct OmniTft {
    config: ModelConfig,
    schema: Schema,
    normalizer: Normalizer,
    params: ParamStore,
    net: Network,
    categorical: Vec<usize>,
}

impl OmniTft {
    pub fn new(
        schema: Schema,
        config: ModelConfig,
        normalizer: Normalizer,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if normalizer.mean.len() != schema.num_features()
            || normalizer.std.len() != schema.num_features()
        {
            return Err(ModelError::InvalidConfig(
                "normalizer length differs from the schema".into(),
            ));
        }
        let d = config.hidden;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, config.init_seed);
        let mut categorical = Vec::new();
        let embeddings = schema
            .features()
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let name = format!("embed.{}", spec.name);
                if spec.is_categorical() {
                    let vocab = spec.vocab_size.unwrap_or(0);
                    categorical.push(i);
                    Embedding::Categorical {
                        table: init.xavier(format!("{name}.table"), vocab, d),
                        slot: categorical.len() - 1,
                        vocab,
                    }
                } else {
                    Embedding::Continuous {
                        w: init.xavier(format!("{name}.w"), 1, d),
                        b: init.constant(format!("{name}.b"), 1, d, 0.0),
                    }
                }
            })
            .collect();
        let n_static = schema.static_features().len();
        let statics = (n_static > 0).then(|| StaticEncoder {
            selection: VariableSelection::new(&mut init, "static_vsn", n_static, d, false),
            selection_ctx: Grn::new(&mut init, "ctx.selection", d, d, d, false),
            enrichment_ctx: Grn::new(&mut init, "ctx.enrichment", d, d, d, false),
            state_h: Grn::new(&mut init, "ctx.state_h", d, d, d, false),
            state_c: Grn::new(&mut init, "ctx.state_c", d, d, d, false),
        });
        let has_ctx = statics.is_some();
        let past_vsn = VariableSelection::new(&mut init, "past_vsn", schema.n_past(), d, has_ctx);
        let future_vsn = (schema.n_future() > 0).then(|| {
            VariableSelection::new(&mut init, "future_vsn", schema.n_future(), d, has_ctx)
        });
        let encoder = (0..config.lstm_layers)
            .map(|l| LstmLayer::new(&mut init, &format!("encoder.l{l}"), d, d))
            .collect();
        let decoder = (0..config.lstm_layers)
            .map(|l| LstmLayer::new(&mut init, &format!("decoder.l{l}"), d, d))
            .collect();
        let post_lstm = GateAddNorm::new(&mut init, "post_lstm", d, d);
        let enrichment = Grn::new(&mut init, "enrichment", d, d, d, has_ctx);
        let blocks = (0..config.attention_blocks)
            .map(|b| AttentionBlock {
                attention: InterpretableAttention::new(
                    &mut init,
                    &format!("block{b}.attn"),
                    d,
                    config.heads,
                ),
                post_attention: GateAddNorm::new(&mut init, &format!("block{b}.post_attn"), d, d),
                feed_forward: Grn::new(&mut init, &format!("block{b}.grn"), d, d, d, false),
            })
            .collect();
        let output_skip = GateAddNorm::new(&mut init, "output_skip", d, d);
        let head = init.linear("head", d, 3 * schema.targets().len());
        let net = Network {
            embeddings,
            statics,
            past_vsn,
            future_vsn,
            encoder,
            decoder,
            post_lstm,
            enrichment,
            blocks,
            output_skip,
            head,
        };
        Ok(Self {
            config,
            schema,
            normalizer,
            params,
            net,
            categorical,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Schema indices of categorical features, the order used by
    /// [`CategoryCounts`] and [`OmniTft::embedding_tables`].
    pub fn categorical_features(&self) -> &[usize] {
        &self.categorical
    }

    /// Embedding table parameter of each categorical feature.
    pub fn embedding_tables(&self) -> Vec<ParamId> {
        self.net
            .embeddings
            .iter()
            .filter_map(|e| match e {
                Embedding::Categorical { table, .. } => Some(*table),
                Embedding::Continuous { .. } => None,
            })
            .collect()
    }

    /// Embedding parameters of the continuous feature `f`, `(w, b)`.
    pub fn continuous_embedding(&self, f: usize) -> Option<(ParamId, ParamId)> {
        match self.net.embeddings.get(f)? {
            Embedding::Continuous { w, b } => Some((*w, *b)),
            Embedding::Categorical { .. } => None,
        }
    }

    /// Head column block of a target (schema index).
    pub fn target_slot(&self, target: usize) -> Result<usize, ModelError> {
        self.schema
            .targets()
            .iter()
            .position(|&t| t == target)
            .ok_or_else(|| ModelError::NotATarget(self.schema.feature(target).name.clone()))
    }

    /// The quantile head parameters `(W, b)`.
    pub fn head_params(&self) -> (ParamId, ParamId) {
        (self.net.head.w, self.net.head.b)
    }

    fn check_window(&self, w: &WindowSample) -> Result<(), ModelError> {
        if w.encoder_len() != self.schema.encoder_len()
            || w.horizon_len() != self.schema.horizon_len()
            || w.n_features() != self.schema.num_features()
        {
            return Err(ModelError::WindowMismatch(format!(
                "window is E={} H={} F={}, model expects E={} H={} F={}",
                w.encoder_len(),
                w.horizon_len(),
                w.n_features(),
                self.schema.encoder_len(),
                self.schema.horizon_len(),
                self.schema.num_features()
            )));
        }
        Ok(())
    }

    /// Embeds feature `f` at window steps `steps` into `steps.len() × d`.
    fn embed(
        &self,
        t: &mut Tape<'_>,
        w: &WindowSample,
        f: usize,
        steps: std::ops::Range<usize>,
        counts: &mut CategoryCounts,
    ) -> Result<Var, ModelError> {
        match self.net.embeddings[f] {
            Embedding::Continuous { w: pw, b: pb } => {
                let col: Vec<f64> = steps
                    .map(|s| self.normalizer.scale(f, w.value(s, f)))
                    .collect();
                let x = t.constant(Tensor::column(col));
                let pw = t.param(pw);
                let pb = t.param(pb);
                let y = t.matmul(x, pw)?;
                Ok(t.add(y, pb)?)
            }
            Embedding::Categorical { table, slot, vocab } => {
                let mut idx = Vec::with_capacity(steps.len());
                for s in steps {
                    let v = w.value(s, f);
                    if !(v >= 0.0 && v.fract() == 0.0 && (v as usize) < vocab) {
                        return Err(ModelError::CategoryOutOfVocab {
                            feature: self.schema.feature(f).name.clone(),
                            value: v,
                            vocab,
                        });
                    }
                    let k = v as usize;
                    counts.0[slot][k] += 1.0;
                    idx.push(k);
                }
                let table = t.param(table);
                Ok(t.gather_rows(table, &idx)?)
            }
        }
    }

    /// Builds the graph for one window on `tape`, which must borrow [`OmniTft::params`].
    pub fn forward(
        &self,
        t: &mut Tape<'_>,
        w: &WindowSample,
        mode: ForwardMode,
    ) -> Result<ForwardOutput, ModelError> {
        self.check_window(w)?;
        let slot = self.target_slot(w.target)?;
        let (e, h) = (self.schema.encoder_len(), self.schema.horizon_len());
        let d = self.config.hidden;
        let net = &self.net;
        let mut drop = Dropout {
            rate: self.config.dropout,
            rng: match mode {
                ForwardMode::Eval => None,
                ForwardMode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            },
        };
        let mut counts = CategoryCounts(
            self.categorical
                .iter()
                .map(|&f| vec![0.0; self.schema.feature(f).vocab_size.unwrap_or(0)])
                .collect(),
        );

        // Static covariate encoder.
        let mut static_weights = None;
        let (mut ctx_sel, mut ctx_enr, mut h0, mut c0) = (None, None, None, None);
        if let Some(st) = &net.statics {
            let mut emb = Vec::new();
            for &f in self.schema.static_features() {
                emb.push(self.embed(t, w, f, 0..1, &mut counts)?);
            }
            let (ws, zeta) = st.selection.forward(t, &emb, None, &mut drop)?;
            static_weights = Some(ws);
            ctx_sel = Some(st.selection_ctx.forward(t, zeta, None, &mut drop)?);
            ctx_enr = Some(st.enrichment_ctx.forward(t, zeta, None, &mut drop)?);
            h0 = Some(st.state_h.forward(t, zeta, None, &mut drop)?);
            c0 = Some(st.state_c.forward(t, zeta, None, &mut drop)?);
        }

        // Variable selection.
        let mut emb = Vec::new();
        for &f in self.schema.past_features() {
            emb.push(self.embed(t, w, f, 0..e, &mut counts)?);
        }
        let (past_weights, past_fused) = net.past_vsn.forward(t, &emb, ctx_sel, &mut drop)?;
        let (future_weights, future_fused) = match &net.future_vsn {
            Some(vsn) => {
                let mut emb = Vec::new();
                for &f in self.schema.future_features() {
                    emb.push(self.embed(t, w, f, e..e + h, &mut counts)?);
                }
                let (wf, fused) = vsn.forward(t, &emb, ctx_sel, &mut drop)?;
                (Some(wf), fused)
            }
            None => (None, t.constant(Tensor::zeros(h, d))),
        };

        // LSTM encoder/decoder.
        let zero = t.constant(Tensor::zeros(1, d));
        let h0 = h0.unwrap_or(zero);
        let c0 = c0.unwrap_or(zero);
        let mut x = past_fused;
        let mut last = Vec::new();
        for layer in &net.encoder {
            let (out, hl, cl) = layer.forward(t, x, h0, c0)?;
            last.push((hl, cl));
            x = out;
        }
        let enc_out = x;
        let mut x = future_fused;
        for (layer, &(hl, cl)) in net.decoder.iter().zip(&last) {
            let (out, _, _) = layer.forward(t, x, hl, cl)?;
            x = out;
        }
        let dec_out = x;
        let lstm_out = t.concat_rows(&[enc_out, dec_out])?;
        let fused = t.concat_rows(&[past_fused, future_fused])?;
        let temporal = net.post_lstm.forward(t, lstm_out, fused)?;

        // Static enrichment and attention blocks.
        let mut x = net.enrichment.forward(t, temporal, ctx_enr, &mut drop)?;
        let mut heads = Vec::new();
        for block in &net.blocks {
            let (attn, surfaces) = block.attention.forward(t, x)?;
            let attn = drop.apply(t, attn)?;
            let y = block.post_attention.forward(t, attn, x)?;
            x = block.feed_forward.forward(t, y, None, &mut drop)?;
            heads = surfaces;
        }
        let attention = average_heads(t, &heads)?;
        let representation = match self.config.representation {
            Representation::PostAttention => t.slice_rows(x, e - 1, h + 1)?,
            Representation::LstmDecoder => t.slice_rows(lstm_out, e - 1, h + 1)?,
        };

        // Quantile head on decoder rows.
        let out = net.output_skip.forward(t, x, temporal)?;
        let dec = t.slice_rows(out, e, h)?;
        let all = net.head.forward(t, dec)?;
        let quantiles = t.slice_cols(all, 3 * slot, 3)?;

        let target = Tensor::column(
            (0..h)
                .map(|k| self.normalizer.scale(w.target, w.future_value(k, w.target)))
                .collect(),
        );
        Ok(ForwardOutput {
            quantiles,
            attention_heads: heads,
            attention,
            past_weights,
            future_weights,
            static_weights,
            representation,
            counts,
            target,
        })
    }

    /// Evaluation-mode forecast in physical units.
    pub fn predict(&self, w: &WindowSample) -> Result<ForecastBundle, ModelError> {
        let mut t = Tape::with_params(&self.params);
        let out = self.forward(&mut t, w, ForwardMode::Eval)?;
        let q = t.value(out.quantiles);
        let quantiles = (0..q.rows())
            .map(|r| {
                let row = q.row_slice(r);
                [0, 1, 2].map(|k| self.normalizer.unscale(w.target, row[k]))
            })
            .collect();
        let rep = t.value(out.representation);
        let decoder_states = Tensor::new(
            rep.rows() - 1,
            rep.cols(),
            rep.data()[rep.cols()..].to_vec(),
        )?;
        Ok(ForecastBundle {
            target: w.target,
            quantiles,
            attention: t.value(out.attention).clone(),
            attention_heads: out
                .attention_heads
                .iter()
                .map(|&v| t.value(v).clone())
                .collect(),
            past_weights: t.value(out.past_weights).clone(),
            future_weights: out.future_weights.map(|v| t.value(v).clone()),
            decoder_states,
            anchor_state: Tensor::row(rep.row_slice(0).to_vec()),
        })
    }
}

//! Building blocks: dense maps, gated residual networks, gate-add-norm,
//! LSTM stacks and interpretable multi-head attention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Axis, DiffError, ParamId, ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Registers parameters with deterministic Xavier-uniform initialisation.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn xavier(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.random_range(-a..a))
            .collect();
        self.store
            .insert(name, Tensor::new(rows, cols, data).unwrap())
    }

    pub fn constant(&mut self, name: String, rows: usize, cols: usize, v: f64) -> ParamId {
        self.store.insert(name, Tensor::filled(rows, cols, v))
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize) -> Linear {
        Linear {
            w: self.xavier(format!("{name}.w"), input, output),
            b: self.constant(format!("{name}.b"), 1, output, 0.0),
        }
    }
}

/// Per-forward dropout state. `None` rng means evaluation mode.
pub(crate) struct Dropout {
    pub rate: f64,
    pub rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn apply(&mut self, t: &mut Tape<'_>, x: Var) -> Result<Var, DiffError> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let [r, c] = t.shape(x);
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..r * c)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        t.mul_const(x, &Tensor::new(r, c, mask)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var, DiffError> {
        let w = t.param(self.w);
        let b = t.param(self.b);
        let y = t.matmul(x, w)?;
        t.add(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        Self {
            gain: init.constant(format!("{name}.gain"), 1, dim, 1.0),
            bias: init.constant(format!("{name}.bias"), 1, dim, 0.0),
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var, DiffError> {
        layer_norm(t, x, Some((self.gain, self.bias)))
    }
}

/// Row-wise layer normalisation, optionally with learned gain and bias.
pub(crate) fn layer_norm(
    t: &mut Tape<'_>,
    x: Var,
    affine: Option<(ParamId, ParamId)>,
) -> Result<Var, DiffError> {
    let mu = t.reduce_mean(x, Axis::PerRow);
    let xc = t.sub(x, mu)?;
    let sq = t.square(xc);
    let var = t.reduce_mean(sq, Axis::PerRow);
    let var = t.add_scalar(var, LN_EPS);
    let sd = t.sqrt(var)?;
    let y = t.div(xc, sd)?;
    match affine {
        Some((g, b)) => {
            let g = t.param(g);
            let b = t.param(b);
            let y = t.mul(y, g)?;
            t.add(y, b)
        }
        None => Ok(y),
    }
}

/// Gated linear unit followed by residual add and layer norm:
/// `LN(residual + σ(x·Wg) ⊙ (x·Wv))`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GateAddNorm {
    pub gate: Linear,
    pub value: Linear,
    pub norm: LayerNorm,
}

impl GateAddNorm {
    pub fn new(init: &mut Init<'_>, name: &str, input: usize, output: usize) -> Self {
        Self {
            gate: init.linear(&format!("{name}.gate"), input, output),
            value: init.linear(&format!("{name}.value"), input, output),
            norm: LayerNorm::new(init, &format!("{name}.norm"), output),
        }
    }

    pub fn glu(&self, t: &mut Tape<'_>, x: Var) -> Result<Var, DiffError> {
        let g = self.gate.forward(t, x)?;
        let g = t.sigmoid(g);
        let v = self.value.forward(t, x)?;
        t.mul(g, v)
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var, residual: Var) -> Result<Var, DiffError> {
        let gated = self.glu(t, x)?;
        let s = t.add(gated, residual)?;
        self.norm.forward(t, s)
    }
}

/// Gated residual network:
/// `LN(skip(a) + GLU(W₁·ELU(W₂·a + W₃·c + b₂) + b₁))`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Grn {
    pub hidden: Linear,
    pub context: Option<ParamId>,
    pub inner: Linear,
    pub skip: Option<Linear>,
    pub out: GateAddNorm,
}

impl Grn {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        with_context: bool,
    ) -> Self {
        Self {
            hidden: init.linear(&format!("{name}.hidden"), input, hidden),
            context: with_context.then(|| init.xavier(format!("{name}.context.w"), hidden, hidden)),
            inner: init.linear(&format!("{name}.inner"), hidden, hidden),
            skip: (input != output).then(|| init.linear(&format!("{name}.skip"), input, output)),
            out: GateAddNorm::new(init, &format!("{name}.out"), hidden, output),
        }
    }

    /// `context` is a `1 × hidden` row broadcast over every input row.
    pub fn forward(
        &self,
        t: &mut Tape<'_>,
        a: Var,
        context: Option<Var>,
        drop: &mut Dropout,
    ) -> Result<Var, DiffError> {
        let mut h = self.hidden.forward(t, a)?;
        if let (Some(wc), Some(c)) = (self.context, context) {
            let wc = t.param(wc);
            let cc = t.matmul(c, wc)?;
            h = t.add(h, cc)?;
        }
        let h = t.elu(h, 1.0);
        let h = drop.apply(t, h)?;
        let h = self.inner.forward(t, h)?;
        let residual = match &self.skip {
            Some(l) => l.forward(t, a)?,
            None => a,
        };
        self.out.forward(t, h, residual)
    }
}

/// Soft selection over `n` variables, each already embedded to `d` columns.
#[derive(Debug, Clone)]
pub(crate) struct VariableSelection {
    pub selector: Grn,
    pub per_var: Vec<Grn>,
}

impl VariableSelection {
    pub fn new(init: &mut Init<'_>, name: &str, n: usize, d: usize, with_context: bool) -> Self {
        Self {
            selector: Grn::new(init, &format!("{name}.selector"), n * d, d, n, with_context),
            per_var: (0..n)
                .map(|j| Grn::new(init, &format!("{name}.var{j}"), d, d, d, false))
                .collect(),
        }
    }

    /// Returns `(weights rows × n, fused rows × d)`.
    pub fn forward(
        &self,
        t: &mut Tape<'_>,
        embedded: &[Var],
        context: Option<Var>,
        drop: &mut Dropout,
    ) -> Result<(Var, Var), DiffError> {
        let flat = t.concat_cols(embedded)?;
        let logits = self.selector.forward(t, flat, context, drop)?;
        let weights = t.softmax(logits, Axis::PerRow);
        let mut processed = Vec::with_capacity(embedded.len());
        for (grn, &e) in self.per_var.iter().zip(embedded) {
            processed.push(grn.forward(t, e, None, drop)?);
        }
        let fused = mix(t, weights, &processed)?;
        Ok((weights, fused))
    }
}

/// `Σ_j weights[:, j] ⊙ parts[j]`.
pub(crate) fn mix(t: &mut Tape<'_>, weights: Var, parts: &[Var]) -> Result<Var, DiffError> {
    let mut acc: Option<Var> = None;
    for (j, &p) in parts.iter().enumerate() {
        let wj = t.slice_cols(weights, j, 1)?;
        let term = t.mul(p, wj)?;
        acc = Some(match acc {
            Some(a) => t.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one variable"))
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LstmLayer {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new(init: &mut Init<'_>, name: &str, input: usize, hidden: usize) -> Self {
        let w_x = init.xavier(format!("{name}.w_x"), input, 4 * hidden);
        let w_h = init.xavier(format!("{name}.w_h"), hidden, 4 * hidden);
        // Forget-gate bias starts at 1.
        let mut bias = vec![0.0; 4 * hidden];
        for v in &mut bias[hidden..2 * hidden] {
            *v = 1.0;
        }
        let b = init.store.insert(format!("{name}.b"), Tensor::row(bias));
        Self {
            w_x,
            w_h,
            b,
            hidden,
        }
    }

    /// Runs over the rows of `x`; returns `(outputs rows × hidden, h_last, c_last)`.
    pub fn forward(
        &self,
        t: &mut Tape<'_>,
        x: Var,
        h0: Var,
        c0: Var,
    ) -> Result<(Var, Var, Var), DiffError> {
        let d = self.hidden;
        let steps = t.shape(x)[0];
        let w_x = t.param(self.w_x);
        let w_h = t.param(self.w_h);
        let b = t.param(self.b);
        let xw = t.matmul(x, w_x)?;
        let xw = t.add(xw, b)?;
        let (mut h, mut c) = (h0, c0);
        let mut outs = Vec::with_capacity(steps);
        for s in 0..steps {
            let xs = t.slice_rows(xw, s, 1)?;
            let hw = t.matmul(h, w_h)?;
            let z = t.add(xs, hw)?;
            let i = t.slice_cols(z, 0, d)?;
            let f = t.slice_cols(z, d, d)?;
            let g = t.slice_cols(z, 2 * d, d)?;
            let o = t.slice_cols(z, 3 * d, d)?;
            let i = t.sigmoid(i);
            let f = t.sigmoid(f);
            let g = t.tanh(g);
            let o = t.sigmoid(o);
            let fc = t.mul(f, c)?;
            let ig = t.mul(i, g)?;
            c = t.add(fc, ig)?;
            let tc = t.tanh(c);
            h = t.mul(o, tc)?;
            outs.push(h);
        }
        Ok((t.concat_rows(&outs)?, h, c))
    }
}

/// Interpretable multi-head attention: per-head queries and keys, one value
/// projection shared by all heads, head outputs averaged before the output map.
#[derive(Debug, Clone)]
pub(crate) struct InterpretableAttention {
    pub queries: Vec<ParamId>,
    pub keys: Vec<ParamId>,
    pub value: ParamId,
    pub output: ParamId,
    pub head_dim: usize,
}

impl InterpretableAttention {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, heads: usize) -> Self {
        let head_dim = d / heads;
        Self {
            queries: (0..heads)
                .map(|m| init.xavier(format!("{name}.q{m}"), d, head_dim))
                .collect(),
            keys: (0..heads)
                .map(|m| init.xavier(format!("{name}.k{m}"), d, head_dim))
                .collect(),
            value: init.xavier(format!("{name}.v"), d, head_dim),
            output: init.xavier(format!("{name}.o"), head_dim, d),
            head_dim,
        }
    }

    /// Returns `(output rows × d, per-head attention surfaces)`.
    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<(Var, Vec<Var>), DiffError> {
        let n = t.shape(x)[0];
        let causal: Vec<bool> = (0..n * n).map(|i| i % n > i / n).collect();
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let wv = t.param(self.value);
        let v = t.matmul(x, wv)?;
        let mut surfaces = Vec::with_capacity(self.queries.len());
        let mut head_sum: Option<Var> = None;
        for (&wq, &wk) in self.queries.iter().zip(&self.keys) {
            let wq = t.param(wq);
            let wk = t.param(wk);
            let q = t.matmul(x, wq)?;
            let k = t.matmul(x, wk)?;
            let s = t.matmul_bt(q, k)?;
            let s = t.scale(s, scale);
            let s = t.masked_fill(s, &causal, f64::NEG_INFINITY)?;
            let a = t.softmax(s, Axis::PerRow);
            let h = t.matmul(a, v)?;
            head_sum = Some(match head_sum {
                Some(acc) => t.add(acc, h)?,
                None => h,
            });
            surfaces.push(a);
        }
        let heads = t.scale(
            head_sum.expect("at least one head"),
            1.0 / self.queries.len() as f64,
        );
        let wo = t.param(self.output);
        Ok((t.matmul(heads, wo)?, surfaces))
    }
}

/// `Ā = (1/M) Σ_m A⁽ᵐ⁾`.
pub(crate) fn average_heads(t: &mut Tape<'_>, heads: &[Var]) -> Result<Var, DiffError> {
    let mut acc = heads[0];
    for &h in &heads[1..] {
        acc = t.add(acc, h)?;
    }
    if heads.len() == 1 {
        return Ok(acc);
    }
    Ok(t.scale(acc, 1.0 / heads.len() as f64))
}

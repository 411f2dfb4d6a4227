//! Sequence forecasters mapping a `context_len x n` window onto the next
//! `horizon x n` samples in one shot.
//!
//! Every architecture stacks `layers` hidden layers and finishes with one
//! linear readout emitting the whole horizon. Linear maps follow the
//! row-vector convention `x W^T + b`, with `W` stored as `(out, in)`.
//!
//! Parameter counts, with `H = hidden`, `n` channels, `O = horizon * n`:
//!
//! | kind        | layer `l` (input width `I`)                    | readout input |
//! |-------------|------------------------------------------------|---------------|
//! | rnn         | `H (I + H + 2)`                                | `H`           |
//! | gru         | `3 H (I + H + 2)`                              | `H`           |
//! | lstm        | `4 H (I + H + 2)`                              | `H`           |
//! | cnn         | `H (I K + 1)`, kernel `K`                      | `H T_out`     |
//! | transformer | `4 d D + 4 D^2 + 3 D`, `d = heads d_k`, `D = H` | `H`           |
//!
//! plus the readout `O (input + 1)`. The transformer adds an input
//! embedding of `H (n + 1)`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Cnn,
    Rnn,
    Lstm,
    Gru,
    Transformer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Cnn,
        ModelKind::Rnn,
        ModelKind::Lstm,
        ModelKind::Gru,
        ModelKind::Transformer,
    ];

    pub fn tag(self) -> u32 {
        match self {
            ModelKind::Cnn => 0,
            ModelKind::Rnn => 1,
            ModelKind::Lstm => 2,
            ModelKind::Gru => 3,
            ModelKind::Transformer => 4,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Cnn => "cnn",
            ModelKind::Rnn => "rnn",
            ModelKind::Lstm => "lstm",
            ModelKind::Gru => "gru",
            ModelKind::Transformer => "transformer",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown model kind {s:?}")))
    }
}

/// Hidden sizes swept in the benchmark table.
pub const HIDDEN_SWEEP: [usize; 4] = [8, 32, 128, 512];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForecasterConfig {
    pub kind: ModelKind,
    pub hidden: usize,
    pub n_channels: usize,
    pub context_len: usize,
    pub horizon: usize,
    pub layers: usize,
    /// Temporal kernel width (cnn).
    pub kernel: usize,
    /// Attention heads (transformer).
    pub heads: usize,
    /// Per-head query/key width; 0 means `hidden / heads`.
    pub d_k: usize,
}

impl ForecasterConfig {
    pub fn new(kind: ModelKind, hidden: usize, n_channels: usize) -> Self {
        Self {
            kind,
            hidden,
            n_channels,
            context_len: 76,
            horizon: 24,
            layers: 2,
            kernel: 5,
            heads: 1,
            d_k: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("hidden", self.hidden),
            ("n_channels", self.n_channels),
            ("context_len", self.context_len),
            ("horizon", self.horizon),
            ("layers", self.layers),
            ("kernel", self.kernel),
            ("heads", self.heads),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        if self.d_k > 0 {
            self.d_k
        } else {
            (self.hidden / self.heads).max(1)
        }
    }

    fn conv_pad(&self) -> usize {
        self.kernel / 2
    }

    fn conv_len(&self) -> usize {
        self.context_len + 2 * self.conv_pad() - self.kernel + 1
    }

    fn readout_in(&self) -> usize {
        match self.kind {
            ModelKind::Cnn => self.hidden * self.conv_len(),
            _ => self.hidden,
        }
    }

    /// Named parameter tensors as `(name, shape, fan_in)`.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let h = self.hidden;
        let n = self.n_channels;
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, fan_in: usize| out.push((name, shape, fan_in));
        match self.kind {
            ModelKind::Rnn | ModelKind::Lstm | ModelKind::Gru => {
                let gates: &[&str] = match self.kind {
                    ModelKind::Rnn => &[""],
                    ModelKind::Lstm => &["i", "f", "g", "o"],
                    _ => &["r", "z", "n"],
                };
                for l in 0..self.layers {
                    let input = if l == 0 { n } else { h };
                    for g in gates {
                        let (wi, wh) = if g.is_empty() {
                            ("w_ih".to_string(), "w_hh".to_string())
                        } else {
                            (format!("w_i{g}"), format!("w_h{g}"))
                        };
                        push(format!("layer{l}.{wi}"), vec![h, input], h);
                        push(format!("layer{l}.{wh}"), vec![h, h], h);
                    }
                    for g in gates {
                        let (bi, bh) = if g.is_empty() {
                            ("b_ih".to_string(), "b_hh".to_string())
                        } else {
                            (format!("b_i{g}"), format!("b_h{g}"))
                        };
                        push(format!("layer{l}.{bi}"), vec![h], h);
                        push(format!("layer{l}.{bh}"), vec![h], h);
                    }
                }
            }
            ModelKind::Cnn => {
                for l in 0..self.layers {
                    let input = if l == 0 { n } else { h };
                    push(format!("conv{l}.weight"), vec![h, input, self.kernel], input * self.kernel);
                    push(format!("conv{l}.bias"), vec![h], input * self.kernel);
                }
            }
            ModelKind::Transformer => {
                let d = self.heads * self.head_dim();
                push("embed.weight".into(), vec![h, n], n);
                push("embed.bias".into(), vec![h], n);
                for l in 0..self.layers {
                    push(format!("block{l}.w_q"), vec![d, h], h);
                    push(format!("block{l}.w_k"), vec![d, h], h);
                    push(format!("block{l}.w_v"), vec![d, h], h);
                    push(format!("block{l}.w_o"), vec![h, d], d);
                    push(format!("block{l}.ff1.weight"), vec![2 * h, h], h);
                    push(format!("block{l}.ff1.bias"), vec![2 * h], h);
                    push(format!("block{l}.ff2.weight"), vec![h, 2 * h], 2 * h);
                    push(format!("block{l}.ff2.bias"), vec![h], 2 * h);
                }
            }
        }
        let o = self.horizon * n;
        let fan = self.readout_in();
        push("readout.weight".into(), vec![o, fan], fan);
        push("readout.bias".into(), vec![o], fan);
        out
    }

    /// Closed-form parameter count (see the module table).
    pub fn param_count(&self) -> usize {
        let (h, n) = (self.hidden, self.n_channels);
        let readout = self.horizon * n * (self.readout_in() + 1);
        let layer_in = |l: usize| if l == 0 { n } else { h };
        let body: usize = match self.kind {
            ModelKind::Rnn => (0..self.layers).map(|l| h * (layer_in(l) + h + 2)).sum(),
            ModelKind::Gru => (0..self.layers).map(|l| 3 * h * (layer_in(l) + h + 2)).sum(),
            ModelKind::Lstm => (0..self.layers).map(|l| 4 * h * (layer_in(l) + h + 2)).sum(),
            ModelKind::Cnn => (0..self.layers)
                .map(|l| h * (layer_in(l) * self.kernel + 1))
                .sum(),
            ModelKind::Transformer => {
                let d = self.heads * self.head_dim();
                h * (n + 1) + self.layers * (4 * d * h + 4 * h * h + 3 * h)
            }
        };
        body + readout
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RnnWeights {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

/// Affine map `x W^T + b`.
fn linear<T: Scalar>(g: &Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    g.add(g.matmul_t(x, w)?, b)
}

/// `h_t = tanh(x W_ih^T + b_ih + h W_hh^T + b_hh)`.
pub fn rnn_cell<T: Scalar>(g: &Graph<T>, x: Var, h: Var, w: &RnnWeights) -> Result<Var> {
    let pre = g.add(linear(g, x, w.w_ih, w.b_ih)?, linear(g, h, w.w_hh, w.b_hh)?)?;
    Ok(g.tanh(pre))
}

/// Input and recurrent weights of one gate.
#[derive(Debug, Clone, Copy)]
pub struct Gate {
    pub w_i: Var,
    pub w_h: Var,
    pub b_i: Var,
    pub b_h: Var,
}

impl Gate {
    fn pre<T: Scalar>(&self, g: &Graph<T>, x: Var, h: Var) -> Result<Var> {
        g.add(linear(g, x, self.w_i, self.b_i)?, linear(g, h, self.w_h, self.b_h)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub input: Gate,
    pub forget: Gate,
    pub cell: Gate,
    pub output: Gate,
}

/// Returns `(h_t, c_t)`.
pub fn lstm_cell<T: Scalar>(
    g: &Graph<T>,
    x: Var,
    h: Var,
    c: Var,
    w: &LstmWeights,
) -> Result<(Var, Var)> {
    let i = g.sigmoid(w.input.pre(g, x, h)?);
    let f = g.sigmoid(w.forget.pre(g, x, h)?);
    let cand = g.tanh(w.cell.pre(g, x, h)?);
    let o = g.sigmoid(w.output.pre(g, x, h)?);
    let c_next = g.add(g.mul(f, c)?, g.mul(i, cand)?)?;
    let h_next = g.mul(o, g.tanh(c_next))?;
    Ok((h_next, c_next))
}

#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    pub reset: Gate,
    pub update: Gate,
    pub candidate: Gate,
}

/// `h_t = (1 - z) n + z h_prev`, with the reset gate applied to the
/// recurrent part of the candidate only.
pub fn gru_cell<T: Scalar>(g: &Graph<T>, x: Var, h: Var, w: &GruWeights) -> Result<Var> {
    let r = g.sigmoid(w.reset.pre(g, x, h)?);
    let z = g.sigmoid(w.update.pre(g, x, h)?);
    let c = &w.candidate;
    let recur = linear(g, h, c.w_h, c.b_h)?;
    let n = g.tanh(g.add(linear(g, x, c.w_i, c.b_i)?, g.mul(r, recur)?)?);
    // (1 - z) n + z h = n + z (h - n)
    g.add(n, g.mul(z, g.sub(h, n)?)?)
}

/// `softmax(Q K^T / sqrt(d_k)) V` over the last two axes; inputs are
/// `(..., len, d)` with matching leading axes.
pub fn attention<T: Scalar>(g: &Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let weights = attention_weights(g, q, k)?;
    g.matmul(weights, v)
}

/// Row-stochastic attention matrix `softmax(Q K^T / sqrt(d_k))`.
pub fn attention_weights<T: Scalar>(g: &Graph<T>, q: Var, k: Var) -> Result<Var> {
    let (qs, ks) = (g.shape(q), g.shape(k));
    if qs.last() != ks.last() || qs.len() != ks.len() {
        return Err(Error::Shape {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let d_k = *qs.last().unwrap() as f64;
    let scores = g.scale(g.matmul_t(q, k)?, 1.0 / d_k.sqrt());
    Ok(g.softmax(scores))
}

/// Fixed sinusoidal position code, `(len, width)`.
pub fn positional_encoding<T: Scalar>(len: usize, width: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, width], |i| {
        let (pos, dim) = ((i / width) as f64, i % width);
        let freq = 10_000f64.powf(-((dim - dim % 2) as f64) / width as f64);
        T::from_f64(if dim % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        })
    })
}

/// A forecaster: configuration plus its named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster<T> {
    config: ForecasterConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Forecaster<T> {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
    pub fn new(config: ForecasterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = config.layout();
        let mut names = Vec::with_capacity(layout.len());
        let mut params = Vec::with_capacity(layout.len());
        for (name, shape, fan_in) in layout {
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.push(Tensor::from_fn(&shape, |_| {
                T::from_f64(rng.random_range(-bound..bound))
            }));
            names.push(name);
        }
        Self::from_parts(config, names, params)
    }

    pub fn from_parts(
        config: ForecasterConfig,
        names: Vec<String>,
        params: Vec<Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != names.len() || names.len() != params.len() {
            return Err(Error::invalid(format!(
                "{} parameter tensors for a layout of {}",
                params.len(),
                layout.len()
            )));
        }
        for ((name, shape, _), (given, t)) in layout.iter().zip(names.iter().zip(&params)) {
            if name != given || shape.as_slice() != t.shape() {
                return Err(Error::invalid(format!(
                    "parameter {given} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let index = names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        Ok(Self {
            config,
            names,
            params,
            index,
        })
    }

    pub fn config(&self) -> &ForecasterConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|i| &self.params[*i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|i| &mut self.params[*i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Forecaster<U> {
        Forecaster {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Inserts every parameter into `g` as a trainable leaf.
    pub fn bind(&self, g: &Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p)).collect()
    }

    /// Builds the forward pass for a `(batch, context_len, n)` input and
    /// returns `(batch, horizon, n)`.
    pub fn forward(&self, g: &Graph<T>, bound: &[Var], context: Var) -> Result<Var> {
        let cfg = &self.config;
        let shape = g.shape(context);
        if shape.len() != 3 || shape[1] != cfg.context_len || shape[2] != cfg.n_channels {
            return Err(Error::Shape {
                op: "forecaster input",
                lhs: vec![0, cfg.context_len, cfg.n_channels],
                rhs: shape,
            });
        }
        let batch = shape[0];
        let p = |name: &str| bound[self.index[name]];
        let features = match cfg.kind {
            ModelKind::Cnn => self.encode_cnn(g, &p, context, batch)?,
            ModelKind::Rnn | ModelKind::Lstm | ModelKind::Gru => {
                self.encode_recurrent(g, &p, context, batch)?
            }
            ModelKind::Transformer => self.encode_transformer(g, &p, context, batch)?,
        };
        let out = linear(g, features, p("readout.weight"), p("readout.bias"))?;
        g.reshape(out, &[batch, cfg.horizon, cfg.n_channels])
    }

    fn encode_cnn(
        &self,
        g: &Graph<T>,
        p: &dyn Fn(&str) -> Var,
        context: Var,
        batch: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        let mut h = g.transpose(context, 1, 2)?;
        for l in 0..cfg.layers {
            let conv = g.conv1d(
                h,
                p(&format!("conv{l}.weight")),
                Some(p(&format!("conv{l}.bias"))),
                1,
                cfg.conv_pad(),
            )?;
            h = g.tanh(conv);
        }
        g.reshape(h, &[batch, cfg.readout_in()])
    }

    fn encode_recurrent(
        &self,
        g: &Graph<T>,
        p: &dyn Fn(&str) -> Var,
        context: Var,
        batch: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        let zeros = Tensor::zeros(&[batch, cfg.hidden]);
        let mut inputs: Vec<Var> = (0..cfg.context_len)
            .map(|t| {
                let x = g.slice(context, 1, t, 1)?;
                g.reshape(x, &[batch, cfg.n_channels])
            })
            .collect::<Result<_>>()?;
        for l in 0..cfg.layers {
            let name = |s: &str| p(&format!("layer{l}.{s}"));
            let gate = |k: &str| Gate {
                w_i: name(&format!("w_i{k}")),
                w_h: name(&format!("w_h{k}")),
                b_i: name(&format!("b_i{k}")),
                b_h: name(&format!("b_h{k}")),
            };
            let mut h = g.constant(&zeros);
            let mut c = g.constant(&zeros);
            let mut outputs = Vec::with_capacity(inputs.len());
            for x in &inputs {
                h = match cfg.kind {
                    ModelKind::Rnn => rnn_cell(
                        g,
                        *x,
                        h,
                        &RnnWeights {
                            w_ih: name("w_ih"),
                            w_hh: name("w_hh"),
                            b_ih: name("b_ih"),
                            b_hh: name("b_hh"),
                        },
                    )?,
                    ModelKind::Lstm => {
                        let w = LstmWeights {
                            input: gate("i"),
                            forget: gate("f"),
                            cell: gate("g"),
                            output: gate("o"),
                        };
                        let (h_next, c_next) = lstm_cell(g, *x, h, c, &w)?;
                        c = c_next;
                        h_next
                    }
                    _ => gru_cell(
                        g,
                        *x,
                        h,
                        &GruWeights {
                            reset: gate("r"),
                            update: gate("z"),
                            candidate: gate("n"),
                        },
                    )?,
                };
                outputs.push(h);
            }
            inputs = outputs;
        }
        Ok(*inputs.last().expect("context_len > 0"))
    }

    fn encode_transformer(
        &self,
        g: &Graph<T>,
        p: &dyn Fn(&str) -> Var,
        context: Var,
        batch: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (len, width) = (cfg.context_len, cfg.hidden);
        let pe = g.constant_owned(positional_encoding(len, width));
        let mut h = g.add(linear(g, context, p("embed.weight"), p("embed.bias"))?, pe)?;
        let dk = cfg.head_dim();
        for l in 0..cfg.layers {
            let name = |s: &str| p(&format!("block{l}.{s}"));
            let q = g.matmul_t(h, name("w_q"))?;
            let k = g.matmul_t(h, name("w_k"))?;
            let v = g.matmul_t(h, name("w_v"))?;
            let heads = (0..cfg.heads)
                .map(|i| {
                    attention(
                        g,
                        g.slice(q, 2, i * dk, dk)?,
                        g.slice(k, 2, i * dk, dk)?,
                        g.slice(v, 2, i * dk, dk)?,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let mixed = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat(&heads, 2)?
            };
            h = g.add(h, g.matmul_t(mixed, name("w_o"))?)?;
            let ff = g.tanh(linear(g, h, name("ff1.weight"), name("ff1.bias"))?);
            h = g.add(h, linear(g, ff, name("ff2.weight"), name("ff2.bias"))?)?;
        }
        let last = g.slice(h, 1, len - 1, 1)?;
        g.reshape(last, &[batch, width])
    }

    /// Gradient-free prediction for `batch` contexts laid out row-major as
    /// `(batch, context_len, n)`.
    pub fn predict(&self, contexts: &[T], batch: usize) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let input = Tensor::new(vec![batch, cfg.context_len, cfg.n_channels], contexts.to_vec())?;
        let g = Graph::no_grad();
        let bound: Vec<Var> = self.params.iter().map(|t| g.constant(t)).collect();
        let x = g.constant_owned(input);
        let out = self.forward(&g, &bound, x)?;
        let value = g.value(out).clone();
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} forecaster output", cfg.kind)));
        }
        Ok(value)
    }
}

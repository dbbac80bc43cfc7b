//! Layers, activations, output distributions and recurrent cells.
//!
//! Graph-building helpers take a batch of row vectors (`batch x width`) so
//! that one call processes a whole minibatch. Weight matrices are stored
//! `d_out x d_in`, so an affine map over a batch is `x W^T + b`.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Sigmoid,
    Tanh,
    Rectifier,
    /// Max over consecutive groups of `k` inputs.
    Maxout(usize),
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ActivationKind {
    pub fn maxout(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid(format!("maxout rank must be at least 2, got {k}")));
        }
        Ok(ActivationKind::Maxout(k))
    }

    /// Scalar value. Maxout acts on groups and is treated as the identity here.
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => sigmoid(x),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Rectifier => x.max(0.0),
            ActivationKind::Maxout(_) => x,
        }
    }

    /// Scalar derivative at `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => sigmoid(x) * sigmoid(-x),
            ActivationKind::Tanh => {
                let c = x.cosh();
                1.0 / (c * c)
            }
            ActivationKind::Rectifier => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Maxout(_) => 1.0,
        }
    }

    /// Supremum of the derivative, used by the spectral explosion check.
    pub fn derivative_bound(self) -> f64 {
        match self {
            ActivationKind::Sigmoid => 0.25,
            _ => 1.0,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "tanh" => Ok(ActivationKind::Tanh),
            "rectifier" | "relu" => Ok(ActivationKind::Rectifier),
            other => match other.strip_prefix("maxout") {
                Some(k) => ActivationKind::maxout(
                    k.parse()
                        .map_err(|_| Error::invalid(format!("bad maxout rank in `{other}`")))?,
                ),
                None => Err(Error::invalid(format!("unknown activation `{other}`"))),
            },
        }
    }

    pub fn name(self) -> String {
        match self {
            ActivationKind::Sigmoid => "sigmoid".into(),
            ActivationKind::Tanh => "tanh".into(),
            ActivationKind::Rectifier => "rectifier".into(),
            ActivationKind::Maxout(k) => format!("maxout{k}"),
        }
    }

    pub(crate) fn forward(self, x: &Tensor) -> Result<Tensor> {
        match self {
            ActivationKind::Maxout(k) => {
                if x.rank() == 0 {
                    return Err(Error::shape("maxout", "scalar input"));
                }
                let (r, c) = x.dims2();
                if c % k != 0 {
                    return Err(Error::shape("maxout", format!("width {c} not divisible by rank {k}")));
                }
                let groups = c / k;
                let data = (0..r)
                    .flat_map(|i| {
                        x.row(i)
                            .chunks(k)
                            .map(|g| g.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                            .collect::<Vec<_>>()
                    })
                    .collect();
                let shape = if x.rank() == 1 { vec![groups] } else { vec![r, groups] };
                Tensor::new(shape, data)
            }
            kind => Ok(x.map(|v| kind.apply(v))),
        }
    }

    pub(crate) fn backward(self, x: &Tensor, y: &Tensor, grad: &Tensor) -> Tensor {
        match self {
            ActivationKind::Sigmoid => grad.zip_map(y, |g, s| g * s * (1.0 - s)),
            ActivationKind::Tanh => grad.zip_map(y, |g, t| g * (1.0 - t * t)),
            ActivationKind::Rectifier => grad.zip_map(x, |g, v| if v > 0.0 { g } else { 0.0 }),
            ActivationKind::Maxout(k) => {
                let mut dx = Tensor::zeros(x.shape());
                let (r, c) = x.dims2();
                let groups = c / k;
                for i in 0..r {
                    for j in 0..groups {
                        let group = &x.row(i)[j * k..(j + 1) * k];
                        let mut best = 0;
                        for (m, &v) in group.iter().enumerate() {
                            if v > group[best] {
                                best = m;
                            }
                        }
                        dx.data_mut()[i * c + j * k + best] = grad.data()[i * groups + j];
                    }
                }
                dx
            }
        }
    }
}

/// `W x + b` for a single column vector `x` given as a flat tensor.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out = Tensor::matmul(w, &x.clone().reshape(vec![x.len(), 1])?, false, false)?;
    if out.len() != b.len() {
        return Err(Error::shape("affine", format!("output {} vs bias {}", out.len(), b.len())));
    }
    Ok(Tensor::vector(out.data().iter().zip(b.data()).map(|(a, c)| a + c).collect()))
}

/// Row `id` of an embedding matrix.
pub fn embed(table: &Tensor, id: usize) -> Result<Tensor> {
    if id >= table.rows() {
        return Err(Error::OutOfRange {
            what: "embedding table",
            index: id,
            size: table.rows(),
        });
    }
    Ok(Tensor::vector(table.row(id).to_vec()))
}

/// Uniform initialization in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_weight(d_out: usize, d_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(&[d_out, d_in], 1.0 / (d_in.max(1) as f64).sqrt(), rng)
}

/// Affine layer over a batch: `x W^T + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.W"), init_weight(d_out, d_in, rng))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Linear { w, b, d_in, d_out })
    }

    /// Look up an existing layer by name, e.g. after loading a checkpoint.
    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        let w = store
            .id(&format!("{name}.W"))
            .ok_or_else(|| Error::UnknownParameter(format!("{name}.W")))?;
        let b = store.id(&format!("{name}.b"));
        let (d_out, d_in) = store.value(w).dims2();
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let y = g.matmul_t(x, w, false, true)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Embedding matrix with one row per vocabulary entry.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let scale = 1.0 / (dim.max(1) as f64).sqrt();
        let table = store.add(format!("{name}.E"), Tensor::uniform(&[vocab_size, dim], scale, rng))?;
        Ok(Embedding { table, vocab_size, dim })
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        let key = format!("{name}.E");
        let table = store.id(&key).ok_or(Error::UnknownParameter(key))?;
        let (vocab_size, dim) = store.value(table).dims2();
        Ok(Embedding { table, vocab_size, dim })
    }

    /// Rows for `ids`, one per output row.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<NodeId> {
        let t = g.param(store, self.table);
        g.gather_rows(t, ids.to_vec())
    }
}

/// `(1 - u) * h_prev + u * h_tilde`
pub fn gru_combine(g: &mut Graph, h_prev: NodeId, u: NodeId, h_tilde: NodeId) -> Result<NodeId> {
    let keep = g.one_minus(u)?;
    let old = g.mul(keep, h_prev)?;
    let new = g.mul(u, h_tilde)?;
    g.add(old, new)
}

/// `f * c_prev + i * c_tilde`
pub fn lstm_combine(g: &mut Graph, f: NodeId, c_prev: NodeId, i: NodeId, c_tilde: NodeId) -> Result<NodeId> {
    let old = g.mul(f, c_prev)?;
    let new = g.mul(i, c_tilde)?;
    g.add(old, new)
}

/// `a W^T + h U^T + b`, the pre-activation shared by every gate.
fn gate_input(
    g: &mut Graph,
    store: &ParamStore,
    w: &Linear,
    u: ParamId,
    x: NodeId,
    h: NodeId,
) -> Result<NodeId> {
    let wx = w.forward(g, store, x)?;
    let u = g.param(store, u);
    let uh = g.matmul_t(h, u, false, true)?;
    g.add(wx, uh)
}

fn recurrent_weight(store: &mut ParamStore, name: &str, d_h: usize, rng: &mut impl Rng) -> Result<ParamId> {
    store.add(format!("{name}.U"), init_weight(d_h, d_h, rng))
}

#[derive(Clone, Debug)]
pub struct RnnParams {
    pub w: Linear,
    pub u: ParamId,
    pub activation: ActivationKind,
}

#[derive(Clone, Debug)]
pub struct GruParams {
    pub w: Linear,
    pub u: ParamId,
    pub w_r: Linear,
    pub u_r: ParamId,
    pub w_u: Linear,
    pub u_u: ParamId,
    /// Compute the update gate from `h_prev` instead of `r * h_prev`, so both
    /// gates can be evaluated at once.
    pub parallel_gates: bool,
}

#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_c: Linear,
    pub u_c: ParamId,
    pub w_f: Linear,
    pub u_f: ParamId,
    pub w_i: Linear,
    pub u_i: ParamId,
    pub w_o: Linear,
    pub u_o: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct GruStep {
    pub h: NodeId,
    pub u: NodeId,
    pub r: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmStep {
    pub h: NodeId,
    pub c: NodeId,
    pub f: NodeId,
    pub i: NodeId,
    pub o: NodeId,
}

impl RnnParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_h: usize,
        activation: ActivationKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if let ActivationKind::Maxout(_) = activation {
            return Err(Error::invalid("maxout changes the state width and cannot drive a recurrence"));
        }
        Ok(RnnParams {
            w: Linear::new(store, name, d_in, d_h, true, rng)?,
            u: recurrent_weight(store, name, d_h, rng)?,
            activation,
        })
    }

    fn load(store: &ParamStore, name: &str, activation: ActivationKind) -> Result<Self> {
        Ok(RnnParams {
            w: Linear::from_store(store, name)?,
            u: lookup(store, &format!("{name}.U"))?,
            activation,
        })
    }
}

/// `g(W x + U h_prev + b)`
pub fn rnn_step(g: &mut Graph, store: &ParamStore, p: &RnnParams, x: NodeId, h_prev: NodeId) -> Result<NodeId> {
    let pre = gate_input(g, store, &p.w, p.u, x, h_prev)?;
    g.activation(pre, p.activation)
}

impl GruParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_h: usize,
        parallel_gates: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cand = format!("{name}.cand");
        let reset = format!("{name}.reset");
        let update = format!("{name}.update");
        Ok(GruParams {
            w: Linear::new(store, &cand, d_in, d_h, true, rng)?,
            u: recurrent_weight(store, &cand, d_h, rng)?,
            w_r: Linear::new(store, &reset, d_in, d_h, true, rng)?,
            u_r: recurrent_weight(store, &reset, d_h, rng)?,
            w_u: Linear::new(store, &update, d_in, d_h, true, rng)?,
            u_u: recurrent_weight(store, &update, d_h, rng)?,
            parallel_gates,
        })
    }

    fn load(store: &ParamStore, name: &str, parallel_gates: bool) -> Result<Self> {
        let part = |p: &str| format!("{name}.{p}");
        Ok(GruParams {
            w: Linear::from_store(store, &part("cand"))?,
            u: lookup(store, &part("cand.U"))?,
            w_r: Linear::from_store(store, &part("reset"))?,
            u_r: lookup(store, &part("reset.U"))?,
            w_u: Linear::from_store(store, &part("update"))?,
            u_u: lookup(store, &part("update.U"))?,
            parallel_gates,
        })
    }
}

pub fn gru_step(g: &mut Graph, store: &ParamStore, p: &GruParams, x: NodeId, h_prev: NodeId) -> Result<GruStep> {
    let r_pre = gate_input(g, store, &p.w_r, p.u_r, x, h_prev)?;
    let r = g.sigmoid(r_pre)?;
    let rh = g.mul(r, h_prev)?;
    let u_src = if p.parallel_gates { h_prev } else { rh };
    let u_pre = gate_input(g, store, &p.w_u, p.u_u, x, u_src)?;
    let u = g.sigmoid(u_pre)?;
    let cand_pre = gate_input(g, store, &p.w, p.u, x, rh)?;
    let h_tilde = g.tanh(cand_pre)?;
    let h = gru_combine(g, h_prev, u, h_tilde)?;
    Ok(GruStep { h, u, r })
}

impl LstmParams {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_h: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut part = |p: &str, rng: &mut _| -> Result<(Linear, ParamId)> {
            let n = format!("{name}.{p}");
            Ok((
                Linear::new(store, &n, d_in, d_h, true, rng)?,
                recurrent_weight(store, &n, d_h, rng)?,
            ))
        };
        let (w_c, u_c) = part("cell", rng)?;
        let (w_f, u_f) = part("forget", rng)?;
        let (w_i, u_i) = part("input", rng)?;
        let (w_o, u_o) = part("output", rng)?;
        Ok(LstmParams { w_c, u_c, w_f, u_f, w_i, u_i, w_o, u_o })
    }

    fn load(store: &ParamStore, name: &str) -> Result<Self> {
        let part = |p: &str| -> Result<(Linear, ParamId)> {
            let n = format!("{name}.{p}");
            Ok((Linear::from_store(store, &n)?, lookup(store, &format!("{n}.U"))?))
        };
        let (w_c, u_c) = part("cell")?;
        let (w_f, u_f) = part("forget")?;
        let (w_i, u_i) = part("input")?;
        let (w_o, u_o) = part("output")?;
        Ok(LstmParams { w_c, u_c, w_f, u_f, w_i, u_i, w_o, u_o })
    }
}

pub fn lstm_step(
    g: &mut Graph,
    store: &ParamStore,
    p: &LstmParams,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<LstmStep> {
    let f_pre = gate_input(g, store, &p.w_f, p.u_f, x, h_prev)?;
    let f = g.sigmoid(f_pre)?;
    let i_pre = gate_input(g, store, &p.w_i, p.u_i, x, h_prev)?;
    let i = g.sigmoid(i_pre)?;
    let o_pre = gate_input(g, store, &p.w_o, p.u_o, x, h_prev)?;
    let o = g.sigmoid(o_pre)?;
    let c_pre = gate_input(g, store, &p.w_c, p.u_c, x, h_prev)?;
    let c_tilde = g.tanh(c_pre)?;
    let c = lstm_combine(g, f, c_prev, i, c_tilde)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok(LstmStep { h, c, f, i, o })
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store.id(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Simple,
    Gru,
    Lstm,
}

impl CellKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "simple" | "rnn" => Ok(CellKind::Simple),
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::invalid(format!("unknown cell `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Simple => "simple",
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        }
    }
}

/// Recurrent state of a batch; `c` is the LSTM memory cell.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: NodeId,
    pub c: Option<NodeId>,
}

/// Any of the three recurrent cells behind one interface.
#[derive(Clone, Debug)]
pub enum Cell {
    Simple(RnnParams),
    Gru(GruParams),
    Lstm(LstmParams),
}

impl Cell {
    /// A new cell with a tanh simple RNN, main-text GRU or LSTM.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: CellKind,
        d_in: usize,
        d_h: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match kind {
            CellKind::Simple => Cell::Simple(RnnParams::new(store, name, d_in, d_h, ActivationKind::Tanh, rng)?),
            CellKind::Gru => Cell::Gru(GruParams::new(store, name, d_in, d_h, false, rng)?),
            CellKind::Lstm => Cell::Lstm(LstmParams::new(store, name, d_in, d_h, rng)?),
        })
    }

    pub fn load(store: &ParamStore, name: &str, kind: CellKind) -> Result<Self> {
        Ok(match kind {
            CellKind::Simple => Cell::Simple(RnnParams::load(store, name, ActivationKind::Tanh)?),
            CellKind::Gru => Cell::Gru(GruParams::load(store, name, false)?),
            CellKind::Lstm => Cell::Lstm(LstmParams::load(store, name)?),
        })
    }

    pub fn kind(&self) -> CellKind {
        match self {
            Cell::Simple(_) => CellKind::Simple,
            Cell::Gru(_) => CellKind::Gru,
            Cell::Lstm(_) => CellKind::Lstm,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        match self {
            Cell::Simple(p) => p.w.d_out,
            Cell::Gru(p) => p.w.d_out,
            Cell::Lstm(p) => p.w_c.d_out,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Cell::Simple(p) => p.w.d_in,
            Cell::Gru(p) => p.w.d_in,
            Cell::Lstm(p) => p.w_c.d_in,
        }
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> CellState {
        let h = g.constant(Tensor::zeros(&[batch, self.hidden_dim()]));
        let c = match self {
            Cell::Lstm(_) => Some(g.constant(Tensor::zeros(&[batch, self.hidden_dim()]))),
            _ => None,
        };
        CellState { h, c }
    }

    /// State whose hidden part is `h` (LSTM memory starts at zero).
    pub fn state_from(&self, g: &mut Graph, h: NodeId) -> CellState {
        let c = match self {
            Cell::Lstm(_) => {
                let rows = g.try_value(h).map_or(1, Tensor::rows);
                Some(g.constant(Tensor::zeros(&[rows, self.hidden_dim()])))
            }
            _ => None,
        };
        CellState { h, c }
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: NodeId, state: CellState) -> Result<CellState> {
        match self {
            Cell::Simple(p) => Ok(CellState {
                h: rnn_step(g, store, p, x, state.h)?,
                c: None,
            }),
            Cell::Gru(p) => Ok(CellState {
                h: gru_step(g, store, p, x, state.h)?.h,
                c: None,
            }),
            Cell::Lstm(p) => {
                let c_prev = state
                    .c
                    .ok_or_else(|| Error::invalid("LSTM step needs a memory cell"))?;
                let s = lstm_step(g, store, p, x, state.h, c_prev)?;
                Ok(CellState { h: s.h, c: Some(s.c) })
            }
        }
    }

    /// One step where rows with `active[i] == false` keep their previous state.
    pub fn step_masked(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        state: CellState,
        active: &[bool],
    ) -> Result<CellState> {
        let next = self.step(g, store, x, state)?;
        if active.iter().all(|&a| a) {
            return Ok(next);
        }
        let m = g.constant(Tensor::matrix(
            active.len(),
            1,
            active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect(),
        ));
        let blend = |g: &mut Graph, old: NodeId, new: NodeId| -> Result<NodeId> {
            let diff = g.sub(new, old)?;
            let diff = g.scale_rows(diff, m)?;
            g.add(old, diff)
        };
        let h = blend(g, state.h, next.h)?;
        let c = match (state.c, next.c) {
            (Some(old), Some(new)) => Some(blend(g, old, new)?),
            _ => None,
        };
        Ok(CellState { h, c })
    }
}

/// Distribution emitted by an output layer.
#[derive(Clone, Debug, PartialEq)]
pub enum OutputDistribution {
    Bernoulli { means: Vec<f64> },
    Categorical { probs: Vec<f64> },
    Gaussian { means: Vec<f64>, stddevs: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Binary(Vec<f64>),
    Class(usize),
    Real(Vec<f64>),
}

/// A loss value and how many probabilities had to be clamped to compute it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub clamped: usize,
}

impl OutputDistribution {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: &[f64]| v.iter().all(|&p| (0.0..=1.0).contains(&p));
        match self {
            OutputDistribution::Bernoulli { means } if !in_unit(means) => {
                Err(Error::invalid("Bernoulli means must lie in [0, 1]"))
            }
            OutputDistribution::Categorical { probs } => {
                if !in_unit(probs) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    Err(Error::invalid("categorical probabilities must form a distribution"))
                } else {
                    Ok(())
                }
            }
            OutputDistribution::Gaussian { means, stddevs } => {
                if means.len() != stddevs.len() {
                    Err(Error::shape("gaussian", "means and stddevs differ in length"))
                } else if stddevs.iter().any(|&s| !(s > 0.0)) {
                    Err(Error::invalid("standard deviations must be positive"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Negative log-likelihood of `target` (up to an additive constant for
    /// the Gaussian).
    pub fn loss(&self, target: &Target) -> Result<LossValue> {
        let mut clamped = 0;
        let mut clamp = |p: f64| {
            if p < PROB_FLOOR {
                clamped += 1;
                PROB_FLOOR
            } else if p > 1.0 - PROB_FLOOR {
                clamped += 1;
                1.0 - PROB_FLOOR
            } else {
                p
            }
        };
        let value = match (self, target) {
            (OutputDistribution::Bernoulli { means }, Target::Binary(ys)) => {
                if means.len() != ys.len() {
                    return Err(Error::shape("bernoulli", "target length"));
                }
                means
                    .iter()
                    .zip(ys)
                    .map(|(&m, &y)| {
                        let m = clamp(m);
                        -y * m.ln() - (1.0 - y) * (1.0 - m).ln()
                    })
                    .sum()
            }
            (OutputDistribution::Categorical { probs }, &Target::Class(k)) => {
                let p = *probs.get(k).ok_or(Error::OutOfRange {
                    what: "class index",
                    index: k,
                    size: probs.len(),
                })?;
                -clamp(p).ln()
            }
            (OutputDistribution::Gaussian { means, stddevs }, Target::Real(ys)) => {
                if means.len() != ys.len() {
                    return Err(Error::shape("gaussian", "target length"));
                }
                means
                    .iter()
                    .zip(stddevs)
                    .zip(ys)
                    .map(|((m, s), y)| (y - m) * (y - m) / (2.0 * s * s) + s.ln())
                    .sum()
            }
            _ => return Err(Error::invalid("target type does not match the distribution")),
        };
        Ok(LossValue { value, clamped })
    }
}

/// `softmax(V_out h + c)` for a single hidden vector.
pub fn categorical_head(h: &Tensor, v_out: &Tensor, c: &Tensor) -> Result<OutputDistribution> {
    let logits = affine(h, v_out, c)?;
    Ok(OutputDistribution::Categorical {
        probs: tensor::softmax(logits.data()),
    })
}

//! Encoder-decoder translation: a single-vector encoder, a bidirectional
//! encoder with attention, the teacher-forced training loss, and sampling,
//! greedy and beam-search decoding.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Loss, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::nn::{Cell, CellKind, CellState, Embedding, Linear};
use crate::optim::Trainable;
use crate::tensor::{log_sum_exp, softmax, Tensor};
use crate::text::{TokenId, Vocabulary};

const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    /// The encoder's final state is the only view of the source.
    Simple,
    /// Bidirectional encoder plus attention over all source positions.
    Attention,
}

impl Arch {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(Arch::Simple),
            "attention" => Ok(Arch::Attention),
            _ => Err(Error::invalid(format!("unknown architecture `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Simple => "simple",
            Arch::Attention => "attention",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NmtConfig {
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub arch: Arch,
    pub cell: CellKind,
    /// Hidden size of the encoder (per direction) and the decoder.
    pub dim: usize,
    pub emb_dim: usize,
    /// Hidden size of the attention scorer.
    pub att_dim: usize,
}

/// `e_j = v . tanh(W_z z + W_y y + U_h h_j + b)`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_z: Linear,
    pub w_y: Linear,
    pub u_h: Linear,
    pub v: Linear,
}

#[derive(Clone, Debug)]
pub struct NmtModel {
    pub config: NmtConfig,
    pub store: ParamStore,
    pub src_emb: Embedding,
    pub tgt_emb: Embedding,
    pub enc_fwd: Cell,
    pub enc_bwd: Option<Cell>,
    pub init: Linear,
    pub attention: Option<AttentionParams>,
    pub dec: Cell,
    pub out: Linear,
}

/// A source/target pair in token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl EncodedPair {
    pub fn encode(src_vocab: &Vocabulary, tgt_vocab: &Vocabulary, source: &[String], target: &[String]) -> Self {
        EncodedPair {
            source: src_vocab.encode(source),
            target: tgt_vocab.encode(target),
        }
    }
}

/// Context-dependent source vectors, one `1 x 2d` row per source token.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSet {
    pub vectors: Vec<Tensor>,
}

impl ContextSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub context: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub z: Tensor,
    /// LSTM memory cell.
    pub memory: Option<Tensor>,
    pub t: usize,
    /// The token consumed by the step that produced this state.
    pub prev_token: TokenId,
}

/// Everything the decoder needs from one encoded source sentence.
#[derive(Clone, Debug)]
pub struct EncodedSource {
    /// Final encoder state (simple model) or mean context vector.
    pub summary: Tensor,
    pub context: Option<ContextSet>,
    /// `U_h h_j` for every position, cached for decoding.
    projections: Vec<Tensor>,
}

/// Graph handles for an encoded batch.
struct EncNodes {
    hs: Vec<NodeId>,
    proj: Vec<NodeId>,
    /// Row-major `batch x positions` validity.
    mask: Vec<bool>,
    summary: NodeId,
}

struct AttNodes {
    scores: NodeId,
    weights: NodeId,
    context: NodeId,
}

struct TeacherForced {
    logits: NodeId,
    targets: Vec<usize>,
    valid: Vec<bool>,
    tokens: usize,
    /// Attention handles per decoder step.
    attention: Vec<AttNodes>,
}

fn check_ids(ids: &[TokenId], size: usize, what: &'static str) -> Result<()> {
    match ids.iter().find(|t| t.index() >= size) {
        Some(t) => Err(Error::OutOfRange {
            what,
            index: t.index(),
            size,
        }),
        None => Ok(()),
    }
}

fn row_vector(t: &Tensor) -> Tensor {
    Tensor::matrix(1, t.len(), t.data().to_vec())
}

impl NmtModel {
    pub fn new(config: NmtConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let src_emb = Embedding::new(&mut store, "src_emb", c.src_vocab_size, c.emb_dim, &mut rng)?;
        let tgt_emb = Embedding::new(&mut store, "tgt_emb", c.tgt_vocab_size, c.emb_dim, &mut rng)?;
        let enc_fwd = Cell::new(&mut store, "enc_fwd", c.cell, c.emb_dim, c.dim, &mut rng)?;
        let (enc_bwd, ctx_dim) = match c.arch {
            Arch::Simple => (None, c.dim),
            Arch::Attention => (
                Some(Cell::new(&mut store, "enc_bwd", c.cell, c.emb_dim, c.dim, &mut rng)?),
                2 * c.dim,
            ),
        };
        let init = Linear::new(&mut store, "init", ctx_dim, c.dim, true, &mut rng)?;
        let attention = match c.arch {
            Arch::Simple => None,
            Arch::Attention => Some(AttentionParams {
                w_z: Linear::new(&mut store, "att_z", c.dim, c.att_dim, true, &mut rng)?,
                w_y: Linear::new(&mut store, "att_y", c.emb_dim, c.att_dim, false, &mut rng)?,
                u_h: Linear::new(&mut store, "att_h", ctx_dim, c.att_dim, false, &mut rng)?,
                v: Linear::new(&mut store, "att_v", c.att_dim, 1, false, &mut rng)?,
            }),
        };
        let dec = Cell::new(&mut store, "dec", c.cell, c.emb_dim + ctx_dim, c.dim, &mut rng)?;
        let out = Linear::new(&mut store, "out", c.dim, c.tgt_vocab_size, true, &mut rng)?;
        Ok(NmtModel {
            config,
            store,
            src_emb,
            tgt_emb,
            enc_fwd,
            enc_bwd,
            init,
            attention,
            dec,
            out,
        })
    }

    fn check_source(&self, s: &[TokenId]) -> Result<()> {
        if s.is_empty() {
            return Err(Error::Empty("source sentence"));
        }
        check_ids(s, self.config.src_vocab_size, "source vocabulary")
    }

    fn encode_nodes(&self, g: &mut Graph, sources: &[&[TokenId]]) -> Result<EncNodes> {
        for s in sources {
            self.check_source(s)?;
        }
        let b = sources.len();
        let tx = sources.iter().map(|s| s.len()).max().unwrap_or(0);
        let ids = |j: usize| -> Vec<usize> {
            sources
                .iter()
                .map(|s| s.get(j).copied().unwrap_or(TokenId::PAD).index())
                .collect()
        };
        let active = |j: usize| -> Vec<bool> { sources.iter().map(|s| j < s.len()).collect() };
        let mut mask = Vec::with_capacity(b * tx);
        for s in sources {
            mask.extend((0..tx).map(|j| j < s.len()));
        }

        let mut state = self.enc_fwd.zero_state(g, b);
        let mut fwd = Vec::with_capacity(tx);
        for j in 0..tx {
            let x = self.src_emb.forward(g, &self.store, &ids(j))?;
            state = self.enc_fwd.step_masked(g, &self.store, x, state, &active(j))?;
            fwd.push(state.h);
        }
        let Some(bwd_cell) = &self.enc_bwd else {
            return Ok(EncNodes {
                hs: fwd,
                proj: Vec::new(),
                mask,
                summary: state.h,
            });
        };

        let mut state = bwd_cell.zero_state(g, b);
        let mut bwd = vec![state.h; tx];
        for j in (0..tx).rev() {
            let x = self.src_emb.forward(g, &self.store, &ids(j))?;
            state = bwd_cell.step_masked(g, &self.store, x, state, &active(j))?;
            bwd[j] = state.h;
        }
        let mut hs = Vec::with_capacity(tx);
        let mut proj = Vec::with_capacity(tx);
        let att = self.attention.as_ref().ok_or_else(|| Error::invalid("missing attention parameters"))?;
        let mut summary = None;
        for j in 0..tx {
            let h = g.concat_cols(&[fwd[j], bwd[j]])?;
            proj.push(att.u_h.forward(g, &self.store, h)?);
            let w = g.constant(Tensor::matrix(
                b,
                1,
                sources
                    .iter()
                    .map(|s| if j < s.len() { 1.0 / s.len() as f64 } else { 0.0 })
                    .collect(),
            ));
            let part = g.scale_rows(h, w)?;
            summary = Some(match summary {
                None => part,
                Some(acc) => g.add(acc, part)?,
            });
            hs.push(h);
        }
        Ok(EncNodes {
            hs,
            proj,
            mask,
            summary: summary.ok_or(Error::Empty("source sentence"))?,
        })
    }

    fn encoded_constants(g: &mut Graph, enc: &EncodedSource) -> EncNodes {
        let (hs, mask) = match &enc.context {
            Some(ctx) => (
                ctx.vectors.iter().map(|h| g.constant(h.clone())).collect(),
                vec![true; ctx.len()],
            ),
            None => (Vec::new(), Vec::new()),
        };
        EncNodes {
            hs,
            proj: enc.projections.iter().map(|p| g.constant(p.clone())).collect(),
            mask,
            summary: g.constant(enc.summary.clone()),
        }
    }

    fn init_nodes(&self, g: &mut Graph, enc: &EncNodes) -> Result<CellState> {
        let z = self.init.forward(g, &self.store, enc.summary)?;
        let z = g.tanh(z)?;
        Ok(self.dec.state_from(g, z))
    }

    fn attend_nodes(&self, g: &mut Graph, enc: &EncNodes, z_prev: NodeId, y_emb: NodeId) -> Result<AttNodes> {
        let att = self.attention.as_ref().ok_or_else(|| Error::invalid("model has no attention"))?;
        let q = att.w_z.forward(g, &self.store, z_prev)?;
        let qy = att.w_y.forward(g, &self.store, y_emb)?;
        let q = g.add(q, qy)?;
        let mut es = Vec::with_capacity(enc.proj.len());
        for &p in &enc.proj {
            let s = g.add(p, q)?;
            let s = g.tanh(s)?;
            es.push(att.v.forward(g, &self.store, s)?);
        }
        let scores = g.concat_cols(&es)?;
        let weights = g.masked_softmax(scores, enc.mask.clone())?;
        let mut context = None;
        for (j, &h) in enc.hs.iter().enumerate() {
            let a = g.slice_cols(weights, j, 1)?;
            let part = g.scale_rows(h, a)?;
            context = Some(match context {
                None => part,
                Some(acc) => g.add(acc, part)?,
            });
        }
        Ok(AttNodes {
            scores,
            weights,
            context: context.ok_or(Error::Empty("context set"))?,
        })
    }

    fn step_nodes(
        &self,
        g: &mut Graph,
        enc: &EncNodes,
        state: CellState,
        y_prev: &[usize],
    ) -> Result<(CellState, Option<AttNodes>)> {
        let y = self.tgt_emb.forward(g, &self.store, y_prev)?;
        let (context, att) = match self.attention {
            None => (enc.summary, None),
            Some(_) => {
                let a = self.attend_nodes(g, enc, state.h, y)?;
                (a.context, Some(a))
            }
        };
        let input = g.concat_cols(&[y, context])?;
        Ok((self.dec.step(g, &self.store, input, state)?, att))
    }

    fn teacher_forced(&self, g: &mut Graph, pairs: &[&EncodedPair]) -> Result<TeacherForced> {
        for p in pairs {
            if p.target.is_empty() {
                return Err(Error::Empty("target sentence"));
            }
            check_ids(&p.target, self.config.tgt_vocab_size, "target vocabulary")?;
        }
        let sources: Vec<&[TokenId]> = pairs.iter().map(|p| p.source.as_slice()).collect();
        let enc = self.encode_nodes(g, &sources)?;
        let mut state = self.init_nodes(g, &enc)?;
        let steps = pairs.iter().map(|p| p.target.len()).max().unwrap_or(0) + 1;
        let mut zs = Vec::with_capacity(steps);
        let mut attention = Vec::new();
        let mut targets = Vec::with_capacity(steps * pairs.len());
        let mut valid = Vec::with_capacity(steps * pairs.len());
        for t in 0..steps {
            let y_prev: Vec<usize> = pairs
                .iter()
                .map(|p| match t {
                    0 => TokenId::BOS,
                    _ => p.target.get(t - 1).copied().unwrap_or(TokenId::PAD),
                })
                .map(TokenId::index)
                .collect();
            let (next, att) = self.step_nodes(g, &enc, state, &y_prev)?;
            state = next;
            zs.push(state.h);
            attention.extend(att);
            for p in pairs {
                let (target, ok) = match t.cmp(&p.target.len()) {
                    std::cmp::Ordering::Less => (p.target[t], true),
                    std::cmp::Ordering::Equal => (TokenId::EOS, true),
                    std::cmp::Ordering::Greater => (TokenId::PAD, false),
                };
                targets.push(target.index());
                valid.push(ok);
            }
        }
        let z = g.concat_rows(&zs)?;
        let logits = self.out.forward(g, &self.store, z)?;
        let tokens = valid.iter().filter(|&&v| v).count();
        Ok(TeacherForced {
            logits,
            targets,
            valid,
            tokens,
            attention,
        })
    }

    /// Per-pair negative log-likelihoods (target tokens plus EOS), batched.
    pub fn batch_losses(&self, pairs: &[&EncodedPair]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let tf = self.teacher_forced(&mut g, pairs)?;
        let logits = g.value(tf.logits);
        let b = pairs.len();
        let mut out = vec![0.0; b];
        for row in 0..logits.rows() {
            if tf.valid[row] {
                let r = logits.row(row);
                out[row % b] += log_sum_exp(r) - r[tf.targets[row]];
            }
        }
        Ok(out)
    }

    /// Teacher-forced negative log-likelihood of one pair.
    pub fn nmt_loss(&self, pair: &EncodedPair) -> Result<f64> {
        Ok(self.batch_losses(&[pair])?[0])
    }

    /// Graph-level batch loss (mean per target token) for gradient checks and
    /// custom training loops.
    pub fn loss_node(&self, g: &mut Graph, pairs: &[&EncodedPair]) -> Result<NodeId> {
        let tf = self.teacher_forced(g, pairs)?;
        let scale = 1.0 / tf.tokens as f64;
        g.loss(
            &[tf.logits],
            Loss::SoftmaxCrossEntropy {
                targets: tf.targets,
                weights: tf.valid.iter().map(|&v| if v { scale } else { 0.0 }).collect(),
            },
        )
    }

    /// Left-to-right encoder run from a zero state; returns the final state.
    pub fn encode_simple(&self, source: &[TokenId]) -> Result<Tensor> {
        self.check_source(source)?;
        let mut g = Graph::new();
        let mut state = self.enc_fwd.zero_state(&mut g, 1);
        for &w in source {
            let x = self.src_emb.forward(&mut g, &self.store, &[w.index()])?;
            state = self.enc_fwd.step(&mut g, &self.store, x, state)?;
        }
        Ok(g.value(state.h).clone())
    }

    /// Forward and reverse states concatenated per source position.
    pub fn encode_bidirectional(&self, source: &[TokenId]) -> Result<ContextSet> {
        if self.enc_bwd.is_none() {
            return Err(Error::invalid("the simple model has no bidirectional encoder"));
        }
        Ok(self.encode(source)?.context.unwrap_or(ContextSet { vectors: Vec::new() }))
    }

    pub fn encode(&self, source: &[TokenId]) -> Result<EncodedSource> {
        let mut g = Graph::new();
        let enc = self.encode_nodes(&mut g, &[source])?;
        let context = self.enc_bwd.as_ref().map(|_| ContextSet {
            vectors: enc.hs.iter().map(|&h| g.value(h).clone()).collect(),
        });
        Ok(EncodedSource {
            summary: g.value(enc.summary).clone(),
            context,
            projections: enc.proj.iter().map(|&p| g.value(p).clone()).collect(),
        })
    }

    pub fn init_decoder(&self, enc: &EncodedSource) -> Result<DecoderState> {
        let mut g = Graph::new();
        let nodes = Self::encoded_constants(&mut g, enc);
        let s = self.init_nodes(&mut g, &nodes)?;
        Ok(DecoderState {
            z: g.value(s.h).clone(),
            memory: s.c.map(|c| g.value(c).clone()),
            t: 0,
            prev_token: TokenId::BOS,
        })
    }

    /// Attention of decoder state `z_prev` (after consuming a token with
    /// embedding `y_prev_emb`) over `ctx`.
    pub fn attend(&self, z_prev: &Tensor, y_prev_emb: &Tensor, ctx: &ContextSet) -> Result<AttentionRecord> {
        let att = self.attention.as_ref().ok_or_else(|| Error::invalid("model has no attention"))?;
        if ctx.is_empty() {
            return Err(Error::Empty("context set"));
        }
        let mut g = Graph::new();
        let hs: Vec<NodeId> = ctx.vectors.iter().map(|h| g.constant(row_vector(h))).collect();
        let proj = hs
            .iter()
            .map(|&h| att.u_h.forward(&mut g, &self.store, h))
            .collect::<Result<Vec<_>>>()?;
        let enc = EncNodes {
            summary: hs[0],
            mask: vec![true; hs.len()],
            hs,
            proj,
        };
        let z = g.constant(row_vector(z_prev));
        let y = g.constant(row_vector(y_prev_emb));
        let a = self.attend_nodes(&mut g, &enc, z, y)?;
        Ok(AttentionRecord {
            scores: g.value(a.scores).data().to_vec(),
            weights: g.value(a.weights).data().to_vec(),
            context: g.value(a.context).clone(),
        })
    }

    /// Consumes `y_prev` in `state`; returns the next state, the distribution
    /// over the next target token and the attention used.
    pub fn decoder_step(
        &self,
        enc: &EncodedSource,
        state: &DecoderState,
        y_prev: TokenId,
    ) -> Result<(DecoderState, Vec<f64>, Option<AttentionRecord>)> {
        check_ids(&[y_prev], self.config.tgt_vocab_size, "target vocabulary")?;
        let mut g = Graph::new();
        let nodes = Self::encoded_constants(&mut g, enc);
        let h = g.constant(state.z.clone());
        let c = state.memory.as_ref().map(|m| g.constant(m.clone()));
        let (next, att) = self.step_nodes(&mut g, &nodes, CellState { h, c }, &[y_prev.index()])?;
        let logits = self.out.forward(&mut g, &self.store, next.h)?;
        let record = att.map(|a| AttentionRecord {
            scores: g.value(a.scores).data().to_vec(),
            weights: g.value(a.weights).data().to_vec(),
            context: g.value(a.context).clone(),
        });
        Ok((
            DecoderState {
                z: g.value(next.h).clone(),
                memory: next.c.map(|c| g.value(c).clone()),
                t: state.t + 1,
                prev_token: y_prev,
            },
            softmax(g.value(logits).data()),
            record,
        ))
    }

    /// Teacher-forced attention weights as a `T_x x T_y` matrix: column `t`
    /// is the attention used to predict target token `t`.
    pub fn alignment_matrix(&self, pair: &EncodedPair) -> Result<Tensor> {
        if self.attention.is_none() {
            return Err(Error::invalid("the simple model has no alignment"));
        }
        let mut g = Graph::new();
        let tf = self.teacher_forced(&mut g, &[pair])?;
        let (tx, ty) = (pair.source.len(), pair.target.len());
        let mut a = Tensor::zeros(&[tx, ty]);
        for (t, att) in tf.attention.iter().take(ty).enumerate() {
            for (j, &w) in g.value(att.weights).data().iter().enumerate() {
                a.set(j, t, w);
            }
        }
        Ok(a)
    }

    pub fn provider<'a>(&'a self, source: &[TokenId]) -> Result<NmtProvider<'a>> {
        Ok(NmtProvider {
            model: self,
            enc: self.encode(source)?,
        })
    }
}

impl Trainable for NmtModel {
    type Example = EncodedPair;

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn accumulate_gradients(&mut self, batch: &[&EncodedPair]) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.loss_node(&mut g, batch)?;
        g.backward_into(loss, &mut self.store)?;
        Ok(g.value(loss).item())
    }

    /// Mean negative log-likelihood per target token (EOS included).
    fn cost(&self, examples: &[EncodedPair]) -> Result<f64> {
        let mut total = 0.0;
        let mut tokens = 0;
        for chunk in examples.chunks(EVAL_CHUNK) {
            let refs: Vec<&EncodedPair> = chunk.iter().collect();
            total += self.batch_losses(&refs)?.iter().sum::<f64>();
            tokens += chunk.iter().map(|p| p.target.len() + 1).sum::<usize>();
        }
        Ok(total / tokens as f64)
    }
}

/// Next-token distributions for a search procedure.
///
/// [`score`](NextTokenProvider::score) returns the distribution in a state
/// together with an intermediate state; [`advance`](NextTokenProvider::advance)
/// turns that into the state after emitting a particular token.
pub trait NextTokenProvider {
    type State: Clone;

    fn start(&self) -> Result<Self::State>;

    fn score(&self, state: &Self::State) -> Result<(Vec<f64>, Self::State)>;

    fn advance(&self, scored: &Self::State, token: TokenId) -> Self::State;
}

/// Decoding a fixed source sentence with an [`NmtModel`].
pub struct NmtProvider<'a> {
    model: &'a NmtModel,
    enc: EncodedSource,
}

impl NextTokenProvider for NmtProvider<'_> {
    /// Decoder state plus the token it consumes next.
    type State = (DecoderState, TokenId);

    fn start(&self) -> Result<Self::State> {
        Ok((self.model.init_decoder(&self.enc)?, TokenId::BOS))
    }

    fn score(&self, state: &Self::State) -> Result<(Vec<f64>, Self::State)> {
        let (next, probs, _) = self.model.decoder_step(&self.enc, &state.0, state.1)?;
        Ok((probs, (next, TokenId::PAD)))
    }

    fn advance(&self, scored: &Self::State, token: TokenId) -> Self::State {
        (scored.0.clone(), token)
    }
}

/// Default decoding length cap for a source of `source_len` tokens.
pub fn default_max_len(source_len: usize) -> usize {
    2 * source_len + 5
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Emitted tokens, EOS excluded.
    pub tokens: Vec<TokenId>,
    pub logprob: f64,
    /// True when `max_len` was reached without EOS.
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    pub tokens: Vec<TokenId>,
    pub logprob: f64,
    pub state: S,
    pub finished: bool,
}

/// Search only ranks products of step scores, so it accepts any non-negative
/// finite scores; sampling additionally needs them to sum to 1.
fn check_distribution(p: &[f64], normalized: bool) -> Result<()> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::invalid("next-token scores must be finite and non-negative"));
    }
    let total: f64 = p.iter().sum();
    if normalized && (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("improper next-token distribution (sum {total})")));
    }
    Ok(())
}

/// Ancestral sampling until EOS or `max_len` tokens.
pub fn sample_translation<P: NextTokenProvider>(provider: &P, seed: u64, max_len: usize) -> Result<Decoded> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = provider.start()?;
    let mut out = Decoded {
        tokens: Vec::new(),
        logprob: 0.0,
        truncated: true,
    };
    for _ in 0..max_len {
        let (p, scored) = provider.score(&state)?;
        check_distribution(&p, true)?;
        let dist = WeightedIndex::new(&p).map_err(|e| Error::invalid(e.to_string()))?;
        let w = TokenId::new(dist.sample(&mut rng));
        out.logprob += p[w.index()].ln();
        if w == TokenId::EOS {
            out.truncated = false;
            break;
        }
        out.tokens.push(w);
        state = provider.advance(&scored, w);
    }
    Ok(out)
}

/// Most probable token at every step; ties go to the lowest id.
pub fn greedy_decode<P: NextTokenProvider>(provider: &P, max_len: usize) -> Result<Decoded> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let mut state = provider.start()?;
    let mut out = Decoded {
        tokens: Vec::new(),
        logprob: 0.0,
        truncated: true,
    };
    for _ in 0..max_len {
        let (p, scored) = provider.score(&state)?;
        check_distribution(&p, false)?;
        let mut best = 0;
        for (i, &x) in p.iter().enumerate() {
            if x > p[best] {
                best = i;
            }
        }
        let w = TokenId::new(best);
        out.logprob += p[best].ln();
        if w == TokenId::EOS {
            out.truncated = false;
            break;
        }
        out.tokens.push(w);
        state = provider.advance(&scored, w);
    }
    Ok(out)
}

/// Beam search with `k` live hypotheses.
///
/// Each step scores all continuations of the live hypotheses and walks them
/// from most to least probable (ties: earlier parent, then lower token id).
/// EOS continuations go to the finished pool; others refill the live beam
/// until it holds `k`. The search stops once `k` hypotheses have finished or
/// after `max_len` steps. Finished and still-live hypotheses are returned
/// together, best first; zero-probability continuations are never taken.
pub fn beam_search<P: NextTokenProvider>(provider: &P, k: usize, max_len: usize) -> Result<Vec<Hypothesis<P::State>>> {
    if k == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        state: provider.start()?,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis<P::State>> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() || finished.len() >= k {
            break;
        }
        let mut scored = Vec::with_capacity(live.len());
        let mut candidates = Vec::new();
        for (parent, h) in live.iter().enumerate() {
            let (p, post) = provider.score(&h.state)?;
            check_distribution(&p, false)?;
            for (w, &pw) in p.iter().enumerate() {
                if pw > 0.0 {
                    candidates.push((h.logprob + pw.ln(), parent, w));
                }
            }
            scored.push(post);
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(k);
        for (logprob, parent, w) in candidates {
            if next.len() >= k {
                break;
            }
            let w = TokenId::new(w);
            if w == TokenId::EOS {
                if finished.len() < k {
                    finished.push(Hypothesis {
                        tokens: live[parent].tokens.clone(),
                        logprob,
                        state: scored[parent].clone(),
                        finished: true,
                    });
                }
                continue;
            }
            let mut tokens = live[parent].tokens.clone();
            tokens.push(w);
            next.push(Hypothesis {
                tokens,
                logprob,
                state: provider.advance(&scored[parent], w),
                finished: false,
            });
        }
        live = next;
    }
    let mut all = finished;
    all.extend(live);
    all.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
    Ok(all)
}

/// The best hypothesis of [`beam_search`] as a [`Decoded`].
pub fn beam_decode<P: NextTokenProvider>(provider: &P, k: usize, max_len: usize) -> Result<Decoded> {
    let hyps = beam_search(provider, k, max_len)?;
    let best = hyps.into_iter().next().ok_or(Error::Empty("beam"))?;
    Ok(Decoded {
        tokens: best.tokens,
        logprob: best.logprob,
        truncated: !best.finished,
    })
}

/// Alignment matrix as TSV: a header of target tokens, then one row per
/// source token with six-decimal weights.
pub fn alignment_tsv(source: &[String], target: &[String], a: &Tensor) -> Result<String> {
    if a.dims2() != (source.len(), target.len()) {
        return Err(Error::invalid("alignment matrix does not match the sentence pair"));
    }
    let mut out = String::new();
    for t in target {
        out.push('\t');
        out.push_str(t);
    }
    out.push('\n');
    for (j, s) in source.iter().enumerate() {
        out.push_str(s);
        for x in a.row(j) {
            out.push_str(&format!("\t{x:.6}"));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(arch: Arch, cell: CellKind) -> NmtConfig {
        NmtConfig {
            src_vocab_size: 9,
            tgt_vocab_size: 8,
            arch,
            cell,
            dim: 4,
            emb_dim: 3,
            att_dim: 5,
        }
    }

    fn pair(s: &[u32], t: &[u32]) -> EncodedPair {
        EncodedPair {
            source: s.iter().map(|&i| TokenId(i)).collect(),
            target: t.iter().map(|&i| TokenId(i)).collect(),
        }
    }

    #[test]
    fn uniform_output_loss() {
        let mut m = NmtModel::new(config(Arch::Attention, CellKind::Gru), 3).unwrap();
        let (w, b) = (m.out.w, m.out.b.unwrap());
        m.store.value_mut(w).fill(0.0);
        m.store.value_mut(b).fill(0.0);
        let loss = m.nmt_loss(&pair(&[4, 5, 6], &[4, 7])).unwrap();
        assert!((loss - 3.0 * 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn batched_losses_match_single() {
        for arch in [Arch::Simple, Arch::Attention] {
            for cell in [CellKind::Simple, CellKind::Gru, CellKind::Lstm] {
                let m = NmtModel::new(config(arch, cell), 5).unwrap();
                let pairs = [pair(&[4, 5, 6, 7], &[4]), pair(&[8], &[5, 6, 7]), pair(&[4, 4], &[7, 7])];
                let refs: Vec<&EncodedPair> = pairs.iter().collect();
                let batch = m.batch_losses(&refs).unwrap();
                for (p, l) in pairs.iter().zip(batch) {
                    assert!((m.nmt_loss(p).unwrap() - l).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn decoder_step_matches_teacher_forcing() {
        let m = NmtModel::new(config(Arch::Attention, CellKind::Lstm), 8).unwrap();
        let p = pair(&[4, 5, 6], &[5, 4]);
        let enc = m.encode(&p.source).unwrap();
        let mut state = m.init_decoder(&enc).unwrap();
        let mut total = 0.0;
        let mut prev = TokenId::BOS;
        for &w in p.target.iter().chain(&[TokenId::EOS]) {
            let (next, probs, att) = m.decoder_step(&enc, &state, prev).unwrap();
            let att = att.unwrap();
            assert!((att.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            total -= probs[w.index()].ln();
            state = next;
            prev = w;
        }
        assert!((total - m.nmt_loss(&p).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn alignment_columns_sum_to_one() {
        let m = NmtModel::new(config(Arch::Attention, CellKind::Gru), 2).unwrap();
        let a = m.alignment_matrix(&pair(&[4, 5, 6], &[4, 5])).unwrap();
        assert_eq!(a.dims2(), (3, 2));
        for t in 0..2 {
            let s: f64 = (0..3).map(|j| a.get(j, t)).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let simple = NmtModel::new(config(Arch::Simple, CellKind::Gru), 2).unwrap();
        assert!(simple.alignment_matrix(&pair(&[4], &[4])).is_err());
    }

    #[test]
    fn empty_source_rejected() {
        let m = NmtModel::new(config(Arch::Simple, CellKind::Simple), 0).unwrap();
        assert!(m.encode_simple(&[]).is_err());
        assert!(m.nmt_loss(&pair(&[], &[4])).is_err());
    }
}

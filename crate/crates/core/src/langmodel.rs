//! Neural language models: a feedforward n-gram model, a CBOW model trained
//! by pseudo-likelihood, and a recurrent language model; plus nearest-word
//! queries and embedding export.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Loss, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::eval::SentenceScorer;
use crate::ngram::pad_sentence;
use crate::nn::{Cell, CellKind, Embedding, Linear};
use crate::optim::Trainable;
use crate::tensor::{log_sum_exp, softmax, Tensor};
use crate::text::{TokenId, Vocabulary};

/// Examples per graph when evaluating without gradients.
const EVAL_CHUNK: usize = 128;

/// Row-wise `log softmax(logits)[target]`.
fn target_logprobs(logits: &Tensor, targets: &[usize]) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            row[targets[i]] - log_sum_exp(row)
        })
        .collect()
}

fn check_ids(ids: &[TokenId], vocab_size: usize) -> Result<()> {
    match ids.iter().find(|t| t.index() >= vocab_size) {
        Some(t) => Err(Error::OutOfRange {
            what: "vocabulary",
            index: t.index(),
            size: vocab_size,
        }),
        None => Ok(()),
    }
}

/// A fixed-length context and the token that follows it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextExample {
    pub context: Vec<TokenId>,
    pub target: TokenId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NlmConfig {
    pub vocab_size: usize,
    /// n of the n-gram; the context holds `n - 1` tokens.
    pub order: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
}

/// Feedforward neural n-gram model: concatenated context embeddings, a tanh
/// hidden layer and a softmax output.
#[derive(Clone, Debug)]
pub struct Nlm {
    pub config: NlmConfig,
    pub store: ParamStore,
    pub emb: Embedding,
    pub hidden: Linear,
    pub out: Linear,
}

/// Every `(n - 1)`-token window of the BOS-padded corpus with its next token.
pub fn ngram_examples(corpus: &[Vec<TokenId>], order: usize) -> Vec<ContextExample> {
    let mut out = Vec::new();
    for s in corpus {
        let padded = pad_sentence(s, order);
        for t in order - 1..padded.len() {
            out.push(ContextExample {
                context: padded[t + 1 - order..t].to_vec(),
                target: padded[t],
            });
        }
    }
    out
}

impl Nlm {
    pub fn new(config: NlmConfig, seed: u64) -> Result<Self> {
        if config.order < 2 {
            return Err(Error::invalid("a neural n-gram model needs order >= 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, "emb", config.vocab_size, config.emb_dim, &mut rng)?;
        let hidden = Linear::new(
            &mut store,
            "hidden",
            (config.order - 1) * config.emb_dim,
            config.hidden_dim,
            true,
            &mut rng,
        )?;
        let out = Linear::new(&mut store, "out", config.hidden_dim, config.vocab_size, true, &mut rng)?;
        Ok(Nlm { config, store, emb, hidden, out })
    }

    fn logits(&self, g: &mut Graph, contexts: &[&[TokenId]]) -> Result<NodeId> {
        let n1 = self.config.order - 1;
        for c in contexts {
            if c.len() != n1 {
                return Err(Error::invalid(format!("context must hold {n1} tokens, got {}", c.len())));
            }
            check_ids(c, self.config.vocab_size)?;
        }
        let parts = (0..n1)
            .map(|j| {
                let ids: Vec<usize> = contexts.iter().map(|c| c[j].index()).collect();
                self.emb.forward(g, &self.store, &ids)
            })
            .collect::<Result<Vec<_>>>()?;
        let p = g.concat_cols(&parts)?;
        let h = self.hidden.forward(g, &self.store, p)?;
        let h = g.tanh(h)?;
        self.out.forward(g, &self.store, h)
    }

    /// Distribution over the next token given exactly `n - 1` context tokens.
    pub fn predict(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, &[context])?;
        Ok(softmax(g.value(logits).data()))
    }

    fn example_logprobs(&self, examples: &[&ContextExample]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let contexts: Vec<&[TokenId]> = examples.iter().map(|e| e.context.as_slice()).collect();
        let logits = self.logits(&mut g, &contexts)?;
        let targets: Vec<usize> = examples.iter().map(|e| e.target.index()).collect();
        check_ids(&examples.iter().map(|e| e.target).collect::<Vec<_>>(), self.config.vocab_size)?;
        Ok(target_logprobs(g.value(logits), &targets))
    }

    /// Mean negative log-likelihood of the batch targets as a graph node.
    pub fn loss_node(&self, g: &mut Graph, batch: &[&ContextExample]) -> Result<NodeId> {
        let contexts: Vec<&[TokenId]> = batch.iter().map(|e| e.context.as_slice()).collect();
        let logits = self.logits(g, &contexts)?;
        check_ids(&batch.iter().map(|e| e.target).collect::<Vec<_>>(), self.config.vocab_size)?;
        g.loss(
            &[logits],
            Loss::SoftmaxCrossEntropy {
                targets: batch.iter().map(|e| e.target.index()).collect(),
                weights: vec![1.0 / batch.len() as f64; batch.len()],
            },
        )
    }
}

impl SentenceScorer for Nlm {
    fn sentence_logprob(&self, sentence: &[TokenId]) -> Result<f64> {
        let examples = ngram_examples(&[sentence.to_vec()], self.config.order);
        let refs: Vec<&ContextExample> = examples.iter().collect();
        Ok(self.example_logprobs(&refs)?.iter().sum())
    }
}

impl Trainable for Nlm {
    type Example = ContextExample;

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn accumulate_gradients(&mut self, batch: &[&ContextExample]) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.loss_node(&mut g, batch)?;
        g.backward_into(loss, &mut self.store)?;
        Ok(g.value(loss).item())
    }

    fn cost(&self, examples: &[ContextExample]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in examples.chunks(EVAL_CHUNK) {
            let refs: Vec<&ContextExample> = chunk.iter().collect();
            total -= self.example_logprobs(&refs)?.iter().sum::<f64>();
        }
        Ok(total / examples.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CbowConfig {
    pub vocab_size: usize,
    /// Tokens on each side of the predicted position.
    pub window: usize,
    pub emb_dim: usize,
}

/// Continuous bag-of-words model with a single embedding matrix shared by
/// the context and output sides: `p(w | ctx) ~ exp(e_w . sum_ctx e_v)`.
#[derive(Clone, Debug)]
pub struct Cbow {
    pub config: CbowConfig,
    pub store: ParamStore,
    pub emb: Embedding,
}

/// Each position of each sentence with its (edge-truncated) window.
pub fn cbow_examples(corpus: &[Vec<TokenId>], window: usize) -> Vec<ContextExample> {
    let mut out = Vec::new();
    for s in corpus {
        for i in 0..s.len() {
            let lo = i.saturating_sub(window);
            let hi = (i + window + 1).min(s.len());
            let context = s[lo..i].iter().chain(&s[i + 1..hi]).copied().collect();
            out.push(ContextExample { context, target: s[i] });
        }
    }
    out
}

impl Cbow {
    pub fn new(config: CbowConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, "emb", config.vocab_size, config.emb_dim, &mut rng)?;
        Ok(Cbow { config, store, emb })
    }

    pub fn embeddings(&self) -> &Tensor {
        self.store.value(self.emb.table)
    }

    fn logits(&self, g: &mut Graph, contexts: &[&[TokenId]]) -> Result<NodeId> {
        for c in contexts {
            check_ids(c, self.config.vocab_size)?;
        }
        let table = g.param(&self.store, self.emb.table);
        let s = g.gather_sum(table, contexts.iter().map(|c| c.iter().map(|t| t.index()).collect()).collect())?;
        g.matmul_t(s, table, false, true)
    }

    /// `p(w | left, right)`.
    pub fn conditional(&self, left: &[TokenId], right: &[TokenId], w: TokenId) -> Result<f64> {
        Ok(self.conditional_distribution(left, right)?[w.index()])
    }

    pub fn conditional_distribution(&self, left: &[TokenId], right: &[TokenId]) -> Result<Vec<f64>> {
        let ctx: Vec<TokenId> = left.iter().chain(right).copied().collect();
        let mut g = Graph::new();
        let logits = self.logits(&mut g, &[&ctx])?;
        Ok(softmax(g.value(logits).data()))
    }

    fn example_logprobs(&self, examples: &[&ContextExample]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let contexts: Vec<&[TokenId]> = examples.iter().map(|e| e.context.as_slice()).collect();
        let logits = self.logits(&mut g, &contexts)?;
        check_ids(&examples.iter().map(|e| e.target).collect::<Vec<_>>(), self.config.vocab_size)?;
        let targets: Vec<usize> = examples.iter().map(|e| e.target.index()).collect();
        Ok(target_logprobs(g.value(logits), &targets))
    }

    /// Mean negative log-likelihood of the batch targets as a graph node.
    pub fn loss_node(&self, g: &mut Graph, batch: &[&ContextExample]) -> Result<NodeId> {
        let contexts: Vec<&[TokenId]> = batch.iter().map(|e| e.context.as_slice()).collect();
        let logits = self.logits(g, &contexts)?;
        check_ids(&batch.iter().map(|e| e.target).collect::<Vec<_>>(), self.config.vocab_size)?;
        g.loss(
            &[logits],
            Loss::SoftmaxCrossEntropy {
                targets: batch.iter().map(|e| e.target.index()).collect(),
                weights: vec![1.0 / batch.len() as f64; batch.len()],
            },
        )
    }

    /// Sum over positions of `log p(w_i | window around i)`. This is a
    /// training objective and a pseudo-score, not a sentence probability.
    pub fn pseudo_loglikelihood(&self, sentence: &[TokenId]) -> Result<f64> {
        if sentence.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        let examples = cbow_examples(&[sentence.to_vec()], self.config.window);
        let refs: Vec<&ContextExample> = examples.iter().collect();
        Ok(self.example_logprobs(&refs)?.iter().sum())
    }

    /// `exp(-mean pseudo log-likelihood)` per token. Not comparable with a
    /// true perplexity.
    pub fn pseudo_perplexity(&self, corpus: &[Vec<TokenId>]) -> Result<(f64, usize)> {
        let examples = cbow_examples(corpus, self.config.window);
        if examples.is_empty() {
            return Err(Error::Empty("evaluation corpus"));
        }
        Ok(((self.cost(&examples)?).exp(), examples.len()))
    }
}

impl Trainable for Cbow {
    type Example = ContextExample;

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn accumulate_gradients(&mut self, batch: &[&ContextExample]) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.loss_node(&mut g, batch)?;
        g.backward_into(loss, &mut self.store)?;
        Ok(g.value(loss).item())
    }

    fn cost(&self, examples: &[ContextExample]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in examples.chunks(EVAL_CHUNK) {
            let refs: Vec<&ContextExample> = chunk.iter().collect();
            total -= self.example_logprobs(&refs)?.iter().sum::<f64>();
        }
        Ok(total / examples.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RnnLmConfig {
    pub vocab_size: usize,
    pub cell: CellKind,
    pub emb_dim: usize,
    pub hidden_dim: usize,
}

/// Recurrent language model reading BOS followed by the sentence and
/// predicting the sentence followed by EOS.
#[derive(Clone, Debug)]
pub struct RnnLm {
    pub config: RnnLmConfig,
    pub store: ParamStore,
    pub emb: Embedding,
    pub cell: Cell,
    pub out: Linear,
}

/// Teacher-forced logits of a batch: row `t * batch + b` predicts position
/// `t` of sentence `b`.
struct LmBatch {
    logits: NodeId,
    targets: Vec<usize>,
    valid: Vec<bool>,
    tokens: usize,
}

impl RnnLm {
    pub fn new(config: RnnLmConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, "emb", config.vocab_size, config.emb_dim, &mut rng)?;
        let cell = Cell::new(&mut store, "rnn", config.cell, config.emb_dim, config.hidden_dim, &mut rng)?;
        let out = Linear::new(&mut store, "out", config.hidden_dim, config.vocab_size, true, &mut rng)?;
        Ok(RnnLm { config, store, emb, cell, out })
    }

    fn build(&self, g: &mut Graph, sentences: &[&[TokenId]]) -> Result<LmBatch> {
        for s in sentences {
            check_ids(s, self.config.vocab_size)?;
        }
        let b = sentences.len();
        let steps = sentences.iter().map(|s| s.len()).max().unwrap_or(0) + 1;
        let mut state = self.cell.zero_state(g, b);
        let mut hs = Vec::with_capacity(steps);
        let mut targets = Vec::with_capacity(steps * b);
        let mut valid = Vec::with_capacity(steps * b);
        for t in 0..steps {
            let inputs: Vec<usize> = sentences
                .iter()
                .map(|s| match t {
                    0 => TokenId::BOS,
                    _ => s.get(t - 1).copied().unwrap_or(TokenId::PAD),
                })
                .map(TokenId::index)
                .collect();
            let x = self.emb.forward(g, &self.store, &inputs)?;
            state = self.cell.step(g, &self.store, x, state)?;
            hs.push(state.h);
            for s in sentences {
                let (target, ok) = match t.cmp(&s.len()) {
                    std::cmp::Ordering::Less => (s[t], true),
                    std::cmp::Ordering::Equal => (TokenId::EOS, true),
                    std::cmp::Ordering::Greater => (TokenId::PAD, false),
                };
                targets.push(target.index());
                valid.push(ok);
            }
        }
        let h = g.concat_rows(&hs)?;
        let logits = self.out.forward(g, &self.store, h)?;
        let tokens = valid.iter().filter(|&&v| v).count();
        Ok(LmBatch { logits, targets, valid, tokens })
    }

    /// Per-sentence log-probabilities (sentence plus EOS).
    pub fn batch_logprobs(&self, sentences: &[&[TokenId]]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let batch = self.build(&mut g, sentences)?;
        let lp = target_logprobs(g.value(batch.logits), &batch.targets);
        let b = sentences.len();
        let mut out = vec![0.0; b];
        for (row, l) in lp.iter().enumerate() {
            if batch.valid[row] {
                out[row % b] += l;
            }
        }
        Ok(out)
    }

    /// Mean per-token negative log-likelihood of the batch as a graph node.
    pub fn loss_node(&self, g: &mut Graph, sentences: &[&[TokenId]]) -> Result<NodeId> {
        let b = self.build(g, sentences)?;
        let scale = 1.0 / b.tokens as f64;
        g.loss(
            &[b.logits],
            Loss::SoftmaxCrossEntropy {
                targets: b.targets,
                weights: b.valid.iter().map(|&v| if v { scale } else { 0.0 }).collect(),
            },
        )
    }

    /// Next-token distributions at every step: step `t` conditions on BOS
    /// and the first `t` tokens. There are `len + 1` steps.
    pub fn step_distributions(&self, sentence: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let batch = self.build(&mut g, &[sentence])?;
        let logits = g.value(batch.logits);
        Ok((0..logits.rows()).map(|i| softmax(logits.row(i))).collect())
    }
}

impl SentenceScorer for RnnLm {
    fn sentence_logprob(&self, sentence: &[TokenId]) -> Result<f64> {
        Ok(self.batch_logprobs(&[sentence])?[0])
    }
}

impl Trainable for RnnLm {
    type Example = Vec<TokenId>;

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Mean per-token negative log-likelihood of the batch.
    fn accumulate_gradients(&mut self, batch: &[&Vec<TokenId>]) -> Result<f64> {
        let mut g = Graph::new();
        let sentences: Vec<&[TokenId]> = batch.iter().map(|s| s.as_slice()).collect();
        let loss = self.loss_node(&mut g, &sentences)?;
        g.backward_into(loss, &mut self.store)?;
        Ok(g.value(loss).item())
    }

    fn cost(&self, examples: &[Vec<TokenId>]) -> Result<f64> {
        let mut total = 0.0;
        let mut tokens = 0;
        for chunk in examples.chunks(EVAL_CHUNK) {
            let refs: Vec<&[TokenId]> = chunk.iter().map(|s| s.as_slice()).collect();
            total -= self.batch_logprobs(&refs)?.iter().sum::<f64>();
            tokens += chunk.iter().map(|s| s.len() + 1).sum::<usize>();
        }
        Ok(total / tokens as f64)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// The `k` rows most cosine-similar to row `query`, excluding the query
/// itself; ties go to the lower id. Zero rows score 0.
pub fn nearest_words(table: &Tensor, query: TokenId, k: usize) -> Result<Vec<(TokenId, f64)>> {
    let v = table.rows();
    if query.index() >= v {
        return Err(Error::OutOfRange {
            what: "embedding table",
            index: query.index(),
            size: v,
        });
    }
    if k >= v {
        return Err(Error::invalid(format!("k must be below the vocabulary size {v}")));
    }
    let q = table.row(query.index());
    if q.iter().all(|&x| x == 0.0) {
        return Err(Error::invalid("query embedding has zero norm"));
    }
    let mut scored: Vec<(TokenId, f64)> = (0..v)
        .filter(|&i| i != query.index())
        .map(|i| {
            let row = table.row(i);
            let c = if row.iter().all(|&x| x == 0.0) { 0.0 } else { cosine(q, row) };
            (TokenId::new(i), c)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Text export: a `|V| d` header, then one line per token with `d` values.
pub fn export_embeddings(vocab: &Vocabulary, table: &Tensor) -> Result<String> {
    let (v, d) = table.dims2();
    if v != vocab.len() {
        return Err(Error::invalid(format!("{v} embedding rows for {} tokens", vocab.len())));
    }
    let mut out = format!("{v} {d}\n");
    for (i, tok) in vocab.tokens().iter().enumerate() {
        out.push_str(tok);
        for x in table.row(i) {
            out.push_str(&format!(" {x:.6}"));
        }
        out.push('\n');
    }
    Ok(out)
}

#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqforge::error::{Error, Result};
use seqforge::text::{read_corpus, TokenId};
use seqforge::translate::{EncodedPair, NextTokenProvider};

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

/// The bundled English corpus, one tokenized sentence per entry.
pub fn moby_dick() -> Vec<Vec<String>> {
    read_corpus(&data_path("moby_dick.txt"), None).unwrap().0
}

/// Copy task over ids `4..4 + vocab`, lengths uniform in `min_len..=max_len`.
pub fn copy_pairs(n: usize, vocab: usize, min_len: usize, max_len: usize, seed: u64) -> Vec<EncodedPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            let s: Vec<TokenId> = (0..len).map(|_| TokenId::new(4 + rng.random_range(0..vocab))).collect();
            EncodedPair {
                source: s.clone(),
                target: s,
            }
        })
        .collect()
}

pub const A: TokenId = TokenId(4);
pub const B: TokenId = TokenId(5);
pub const C: TokenId = TokenId(6);

/// The three-symbol example with fixed length 3 used to show that a wider
/// beam can find a worse sequence than greedy search.
pub struct WorkedExampleProvider;

impl NextTokenProvider for WorkedExampleProvider {
    type State = Vec<TokenId>;

    fn start(&self) -> Result<Self::State> {
        Ok(Vec::new())
    }

    fn score(&self, prefix: &Self::State) -> Result<(Vec<f64>, Self::State)> {
        let abc: [f64; 3] = match prefix.as_slice() {
            [] => [0.5, 0.15, 0.45],
            [A] => [0.4, 0.3, 0.3],
            [C] => [0.45, 0.45, 0.1],
            [A, A] => [0.9, 0.05, 0.05],
            [C, A] => [0.7, 0.2, 0.1],
            [C, B] => [0.4, 0.0, 0.6],
            other => return Err(Error::InvalidArgument(format!("prefix {other:?} is not part of the example"))),
        };
        let mut p = vec![0.0; 7];
        p[4..].copy_from_slice(&abc);
        Ok((p, prefix.clone()))
    }

    fn advance(&self, scored: &Self::State, token: TokenId) -> Self::State {
        let mut s = scored.clone();
        s.push(token);
        s
    }
}

/// Distributions drawn at random per prefix but fixed for a given seed.
/// Support is `symbols`; every other id has probability 0.
pub struct RandomProvider {
    pub seed: u64,
    pub vocab_size: usize,
    pub symbols: Vec<TokenId>,
}

impl RandomProvider {
    pub fn new(seed: u64, symbols: Vec<TokenId>) -> Self {
        let vocab_size = symbols.iter().map(|t| t.index() + 1).max().unwrap();
        RandomProvider {
            seed,
            vocab_size,
            symbols,
        }
    }

    pub fn dist(&self, prefix: &[TokenId]) -> Vec<f64> {
        let mut h = DefaultHasher::new();
        (self.seed, prefix).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let w: Vec<f64> = self.symbols.iter().map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = w.iter().sum();
        let mut p = vec![0.0; self.vocab_size];
        for (s, x) in self.symbols.iter().zip(w) {
            p[s.index()] = x / total;
        }
        p
    }
}

impl NextTokenProvider for RandomProvider {
    type State = Vec<TokenId>;

    fn start(&self) -> Result<Self::State> {
        Ok(Vec::new())
    }

    fn score(&self, prefix: &Self::State) -> Result<(Vec<f64>, Self::State)> {
        Ok((self.dist(prefix), prefix.clone()))
    }

    fn advance(&self, scored: &Self::State, token: TokenId) -> Self::State {
        let mut s = scored.clone();
        s.push(token);
        s
    }
}

/// Exhaustive search: the most probable complete sequence, where a sequence
/// completes by emitting EOS or by reaching `max_len` tokens. Returns the
/// tokens (EOS excluded), log-probability and whether EOS ended it.
pub fn brute_force(p: &RandomProvider, max_len: usize) -> (Vec<TokenId>, f64, bool) {
    fn go(p: &RandomProvider, prefix: &mut Vec<TokenId>, lp: f64, max_len: usize, best: &mut (Vec<TokenId>, f64, bool)) {
        if prefix.len() == max_len {
            if lp > best.1 {
                *best = (prefix.clone(), lp, false);
            }
            return;
        }
        let d = p.dist(prefix);
        for (w, &pw) in d.iter().enumerate() {
            if pw == 0.0 {
                continue;
            }
            let lw = lp + pw.ln();
            if w == TokenId::EOS.index() {
                if lw > best.1 {
                    *best = (prefix.clone(), lw, true);
                }
            } else {
                prefix.push(TokenId::new(w));
                go(p, prefix, lw, max_len, best);
                prefix.pop();
            }
        }
    }
    let mut best = (Vec::new(), f64::NEG_INFINITY, false);
    go(p, &mut Vec::new(), 0.0, max_len, &mut best);
    best
}

/// Sum of step log-probabilities of `tokens` (plus EOS when `finished`).
pub fn recompute_logprob<P: NextTokenProvider>(p: &P, tokens: &[TokenId], finished: bool) -> f64 {
    let mut state = p.start().unwrap();
    let mut lp = 0.0;
    for &w in tokens {
        let (d, scored) = p.score(&state).unwrap();
        lp += d[w.index()].ln();
        state = p.advance(&scored, w);
    }
    if finished {
        let (d, _) = p.score(&state).unwrap();
        lp += d[TokenId::EOS.index()].ln();
    }
    lp
}

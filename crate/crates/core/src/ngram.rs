//! Count-based n-gram language models.
//!
//! Every sentence is padded with `n - 1` BOS tokens and terminated by EOS;
//! each real token and the EOS are predicted from exactly `n - 1` preceding
//! symbols. All orders `1..=n` are counted at the predicted positions, so the
//! order-`k` table holds the `k`-gram ending at each predicted token.
//!
//! Probabilities use natural logarithms; ARPA files use base 10.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::text::{TokenId, Vocabulary};

/// Continuations observed after one context.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContextEntry {
    /// `sum_w c(context, w)`
    pub total: u64,
    /// Followers sorted by token id.
    pub followers: Vec<(TokenId, u64)>,
    /// Number of followers seen exactly once, exactly twice, three or more times.
    pub n1: u64,
    pub n2: u64,
    pub n3_plus: u64,
}

impl ContextEntry {
    pub fn count(&self, w: TokenId) -> u64 {
        self.followers
            .binary_search_by_key(&w, |&(t, _)| t)
            .map_or(0, |i| self.followers[i].1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NgramCounts {
    order: usize,
    vocab_size: usize,
    /// `contexts[k - 1]` maps `(k - 1)`-token contexts to order-`k` continuations.
    contexts: Vec<HashMap<Vec<TokenId>, ContextEntry>>,
}

/// `sentence` with `n - 1` leading BOS tokens and a trailing EOS.
pub fn pad_sentence(sentence: &[TokenId], n: usize) -> Vec<TokenId> {
    let mut padded = vec![TokenId::BOS; n.saturating_sub(1)];
    padded.extend_from_slice(sentence);
    padded.push(TokenId::EOS);
    padded
}

/// The last `len` tokens of `context`, left-padded with BOS when it is shorter.
fn fit_context(context: &[TokenId], len: usize) -> Vec<TokenId> {
    if context.len() >= len {
        context[context.len() - len..].to_vec()
    } else {
        let mut out = vec![TokenId::BOS; len - context.len()];
        out.extend_from_slice(context);
        out
    }
}

impl NgramCounts {
    pub fn count(corpus: &[Vec<TokenId>], n: usize, vocab_size: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("n-gram order must be at least 1"));
        }
        let mut raw: Vec<HashMap<Vec<TokenId>, HashMap<TokenId, u64>>> = vec![HashMap::new(); n];
        for sentence in corpus {
            if let Some(bad) = sentence.iter().find(|t| t.index() >= vocab_size) {
                return Err(Error::OutOfRange {
                    what: "vocabulary",
                    index: bad.index(),
                    size: vocab_size,
                });
            }
            let padded = pad_sentence(sentence, n);
            for t in n - 1..padded.len() {
                let w = padded[t];
                for k in 1..=n {
                    let ctx = padded[t + 1 - k..t].to_vec();
                    *raw[k - 1].entry(ctx).or_default().entry(w).or_default() += 1;
                }
            }
        }
        let contexts = raw
            .into_iter()
            .map(|table| {
                table
                    .into_iter()
                    .map(|(ctx, followers)| {
                        let mut followers: Vec<(TokenId, u64)> = followers.into_iter().collect();
                        followers.sort_unstable();
                        let mut e = ContextEntry {
                            total: followers.iter().map(|f| f.1).sum(),
                            ..ContextEntry::default()
                        };
                        for &(_, c) in &followers {
                            match c {
                                1 => e.n1 += 1,
                                2 => e.n2 += 1,
                                _ => e.n3_plus += 1,
                            }
                        }
                        e.followers = followers;
                        (ctx, e)
                    })
                    .collect()
            })
            .collect();
        Ok(NgramCounts { order: n, vocab_size, contexts })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Entry for the order-`context.len() + 1` context.
    pub fn context(&self, context: &[TokenId]) -> Option<&ContextEntry> {
        self.contexts.get(context.len())?.get(context)
    }

    /// `c(context, w)` at order `context.len() + 1`.
    pub fn get(&self, context: &[TokenId], w: TokenId) -> u64 {
        self.context(context).map_or(0, |e| e.count(w))
    }

    /// Number of predicted tokens (the unigram total).
    pub fn token_total(&self) -> u64 {
        self.context(&[]).map_or(0, |e| e.total)
    }

    /// All stored contexts of order `k`, sorted.
    pub fn contexts_of_order(&self, k: usize) -> Vec<(&Vec<TokenId>, &ContextEntry)> {
        let mut v: Vec<_> = self.contexts[k - 1].iter().collect();
        v.sort_unstable_by(|a, b| a.0.cmp(b.0));
        v
    }

    /// `(n1, n2, n3, n4)`: how many distinct order-`k` n-grams occur exactly
    /// once, twice, three and four times.
    pub fn count_of_counts(&self, k: usize) -> [u64; 4] {
        let mut out = [0; 4];
        for e in self.contexts[k - 1].values() {
            for &(_, c) in &e.followers {
                if (1..=4).contains(&c) {
                    out[c as usize - 1] += 1;
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnDiscounts {
    pub n: [u64; 4],
    pub y: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3_plus: f64,
}

impl KnDiscounts {
    /// Modified Kneser-Ney discounts from counts-of-counts. A ratio with a
    /// zero denominator is taken as 0, and each `D_k` is kept within `[0, k]`.
    pub fn from_count_of_counts(n: [u64; 4]) -> Self {
        let [n1, n2, n3, n4] = n.map(|v| v as f64);
        let ratio = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        let y = if n1 + 2.0 * n2 == 0.0 { 1.0 } else { n1 / (n1 + 2.0 * n2) };
        let d1 = (1.0 - 2.0 * y * ratio(n2, n1)).clamp(0.0, 1.0);
        let d2 = (2.0 - 3.0 * y * ratio(n3, n2)).clamp(0.0, 2.0);
        let d3_plus = (3.0 - 4.0 * y * ratio(n4, n3)).clamp(0.0, 3.0);
        KnDiscounts { n, y, d1, d2, d3_plus }
    }

    /// `D(c)`
    pub fn discount(&self, c: u64) -> f64 {
        match c {
            0 => 0.0,
            1 => self.d1,
            2 => self.d2,
            _ => self.d3_plus,
        }
    }

    /// Mass freed in a context: `D1 N1 + D2 N2 + D3+ N3+`.
    pub fn freed_mass(&self, e: &ContextEntry) -> f64 {
        self.d1 * e.n1 as f64 + self.d2 * e.n2 as f64 + self.d3_plus * e.n3_plus as f64
    }
}

pub fn kn_discounts(counts: &NgramCounts) -> Vec<KnDiscounts> {
    (1..=counts.order())
        .map(|k| KnDiscounts::from_count_of_counts(counts.count_of_counts(k)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Smoothing {
    Mle,
    Additive { alpha: f64 },
    /// `lambdas[k - 2]` weights the order-`k` estimate, `k = 2..=n`; the
    /// unigram base is additive with `base_alpha`.
    Interpolated { lambdas: Vec<f64>, base_alpha: f64 },
    ModifiedKn,
}

impl Smoothing {
    pub fn name(&self) -> &'static str {
        match self {
            Smoothing::Mle => "mle",
            Smoothing::Additive { .. } => "additive",
            Smoothing::Interpolated { .. } => "interpolated",
            Smoothing::ModifiedKn => "kn",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NgramModel {
    counts: NgramCounts,
    smoothing: Smoothing,
    discounts: Vec<KnDiscounts>,
}

/// Candidate interpolation weights for the held-out grid search.
pub const LAMBDA_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

impl NgramModel {
    pub fn new(counts: NgramCounts, smoothing: Smoothing) -> Result<Self> {
        match &smoothing {
            Smoothing::Additive { alpha } => check_alpha(*alpha)?,
            Smoothing::Interpolated { lambdas, base_alpha } => {
                check_alpha(*base_alpha)?;
                if lambdas.len() != counts.order() - 1 {
                    return Err(Error::invalid(format!(
                        "an order-{} model needs {} interpolation weights, got {}",
                        counts.order(),
                        counts.order() - 1,
                        lambdas.len()
                    )));
                }
                if lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
                    return Err(Error::invalid("interpolation weights must lie in [0, 1]"));
                }
            }
            _ => {}
        }
        let discounts = kn_discounts(&counts);
        Ok(NgramModel { counts, smoothing, discounts })
    }

    /// Interpolated model whose weights are chosen order by order from
    /// [`LAMBDA_GRID`] to maximize the likelihood of `heldout`.
    pub fn fit_interpolated(counts: NgramCounts, heldout: &[Vec<TokenId>], base_alpha: f64) -> Result<Self> {
        check_alpha(base_alpha)?;
        let n = counts.order();
        let mut lambdas = vec![0.5; n - 1];
        let padded: Vec<Vec<TokenId>> = heldout.iter().map(|s| pad_sentence(s, n)).collect();
        for k in 2..=n {
            let mut best = (f64::NEG_INFINITY, LAMBDA_GRID[0]);
            for &lambda in &LAMBDA_GRID {
                lambdas[k - 2] = lambda;
                let mut ll = 0.0;
                for s in &padded {
                    for t in n - 1..s.len() {
                        ll += interpolated_prob(&counts, &s[t + 1 - k..t], s[t], &lambdas[..k - 1], base_alpha).ln();
                    }
                }
                if ll > best.0 {
                    best = (ll, lambda);
                }
            }
            lambdas[k - 2] = best.1;
        }
        Self::new(counts, Smoothing::Interpolated { lambdas, base_alpha })
    }

    pub fn order(&self) -> usize {
        self.counts.order()
    }

    pub fn vocab_size(&self) -> usize {
        self.counts.vocab_size()
    }

    pub fn counts(&self) -> &NgramCounts {
        &self.counts
    }

    pub fn smoothing(&self) -> &Smoothing {
        &self.smoothing
    }

    pub fn discounts(&self) -> &[KnDiscounts] {
        &self.discounts
    }

    fn history(&self, context: &[TokenId]) -> Vec<TokenId> {
        fit_context(context, self.order() - 1)
    }

    /// `c(context, w) / sum_w' c(context, w')` at the model order.
    pub fn prob_mle(&self, context: &[TokenId], w: TokenId) -> Result<f64> {
        let ctx = self.history(context);
        let e = self.counts.context(&ctx).ok_or(Error::UnseenContext)?;
        Ok(e.count(w) as f64 / e.total as f64)
    }

    /// `(alpha + c(context, w)) / (alpha |V| + sum_w' c(context, w'))`
    pub fn prob_additive(&self, context: &[TokenId], w: TokenId, alpha: f64) -> f64 {
        let ctx = self.history(context);
        additive_prob(&self.counts, &ctx, w, alpha)
    }

    /// Interpolation of per-order maximum-likelihood estimates down to an
    /// additive unigram. Orders whose context was never observed defer to
    /// the next lower order.
    pub fn prob_interpolated(&self, context: &[TokenId], w: TokenId, lambdas: &[f64], base_alpha: f64) -> f64 {
        let ctx = self.history(context);
        interpolated_prob(&self.counts, &ctx, w, lambdas, base_alpha)
    }

    /// Interpolated modified Kneser-Ney probability.
    pub fn prob_kn(&self, context: &[TokenId], w: TokenId) -> f64 {
        let ctx = self.history(context);
        let v = self.vocab_size() as f64;
        let mut p = 1.0 / v;
        for k in 1..=self.order() {
            let c = &ctx[ctx.len() + 1 - k..];
            if let Some(e) = self.counts.context(c) {
                let d = &self.discounts[k - 1];
                let cw = e.count(w);
                let total = e.total as f64;
                p = (cw as f64 - d.discount(cw)) / total + d.freed_mass(e) / total * p;
            }
        }
        p
    }

    /// `alpha(w | context)` and `gamma(context)` at the model order, or
    /// `None` for an unseen context.
    pub fn kn_components(&self, context: &[TokenId], w: TokenId) -> Option<(f64, f64)> {
        let ctx = self.history(context);
        let e = self.counts.context(&ctx)?;
        let d = &self.discounts[self.order() - 1];
        let cw = e.count(w);
        let total = e.total as f64;
        Some(((cw as f64 - d.discount(cw)) / total, d.freed_mass(e) / total))
    }

    /// `p(w | context)` under the model's smoothing.
    pub fn prob(&self, context: &[TokenId], w: TokenId) -> Result<f64> {
        match &self.smoothing {
            Smoothing::Mle => self.prob_mle(context, w),
            Smoothing::Additive { alpha } => Ok(self.prob_additive(context, w, *alpha)),
            Smoothing::Interpolated { lambdas, base_alpha } => {
                Ok(self.prob_interpolated(context, w, lambdas, *base_alpha))
            }
            Smoothing::ModifiedKn => Ok(self.prob_kn(context, w)),
        }
    }

    /// The whole conditional distribution over the vocabulary.
    pub fn distribution(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        let ctx = self.history(context);
        let v = self.vocab_size();
        match &self.smoothing {
            Smoothing::Mle => {
                let e = self.counts.context(&ctx).ok_or(Error::UnseenContext)?;
                let mut p = vec![0.0; v];
                for &(w, c) in &e.followers {
                    p[w.index()] = c as f64 / e.total as f64;
                }
                Ok(p)
            }
            Smoothing::Additive { alpha } => {
                let (total, e) = match self.counts.context(&ctx) {
                    Some(e) => (e.total as f64, Some(e)),
                    None => (0.0, None),
                };
                let denom = alpha * v as f64 + total;
                let mut p = vec![alpha / denom; v];
                for &(w, c) in e.map_or(&[][..], |e| &e.followers) {
                    p[w.index()] = (alpha + c as f64) / denom;
                }
                Ok(p)
            }
            Smoothing::Interpolated { lambdas, base_alpha } => {
                let mut p = self.unigram_additive(*base_alpha);
                for k in 2..=self.order() {
                    if let Some(e) = self.counts.context(&ctx[ctx.len() + 1 - k..]) {
                        let l = lambdas[k - 2];
                        p.iter_mut().for_each(|x| *x *= 1.0 - l);
                        for &(w, c) in &e.followers {
                            p[w.index()] += l * c as f64 / e.total as f64;
                        }
                    }
                }
                Ok(p)
            }
            Smoothing::ModifiedKn => {
                let mut p = vec![1.0 / v as f64; v];
                for k in 1..=self.order() {
                    if let Some(e) = self.counts.context(&ctx[ctx.len() + 1 - k..]) {
                        let d = &self.discounts[k - 1];
                        let total = e.total as f64;
                        let gamma = d.freed_mass(e) / total;
                        p.iter_mut().for_each(|x| *x *= gamma);
                        for &(w, c) in &e.followers {
                            p[w.index()] += (c as f64 - d.discount(c)) / total;
                        }
                    }
                }
                Ok(p)
            }
        }
    }

    fn unigram_additive(&self, alpha: f64) -> Vec<f64> {
        let v = self.vocab_size();
        let total = self.counts.token_total() as f64;
        let denom = alpha * v as f64 + total;
        let mut p = vec![alpha / denom; v];
        if let Some(e) = self.counts.context(&[]) {
            for &(w, c) in &e.followers {
                p[w.index()] = (alpha + c as f64) / denom;
            }
        }
        p
    }

    /// Natural-log probability of `sentence` followed by EOS. Zero
    /// probabilities (and unseen contexts under MLE) give negative infinity.
    pub fn sentence_logprob(&self, sentence: &[TokenId]) -> f64 {
        let n = self.order();
        let padded = pad_sentence(sentence, n);
        let mut total = 0.0;
        for t in n - 1..padded.len() {
            match self.prob(&padded[t + 1 - n..t], padded[t]) {
                Ok(p) if p > 0.0 => total += p.ln(),
                _ => return f64::NEG_INFINITY,
            }
        }
        total
    }

    /// ARPA text for interpolated and Kneser-Ney models.
    pub fn to_arpa(&self, vocab: &Vocabulary) -> Result<String> {
        if vocab.len() != self.vocab_size() {
            return Err(Error::invalid(format!(
                "vocabulary has {} entries, model has {}",
                vocab.len(),
                self.vocab_size()
            )));
        }
        if !matches!(self.smoothing, Smoothing::Interpolated { .. } | Smoothing::ModifiedKn) {
            return Err(Error::invalid(format!(
                "ARPA export needs an interpolated or kn model, not {}",
                self.smoothing.name()
            )));
        }
        let n = self.order();
        // Every context that carries a backoff weight at order k + 1 must be
        // listed at order k, even when it was never predicted itself.
        let mut listed: Vec<Vec<Vec<TokenId>>> = Vec::with_capacity(n);
        listed.push((0..vocab.len()).map(|i| vec![TokenId::new(i)]).collect());
        for k in 2..=n {
            let mut grams: Vec<Vec<TokenId>> = self
                .counts
                .contexts_of_order(k)
                .into_iter()
                .flat_map(|(ctx, e)| {
                    e.followers.iter().map(move |&(w, _)| {
                        let mut g = ctx.clone();
                        g.push(w);
                        g
                    })
                })
                .collect();
            grams.sort_unstable();
            listed.push(grams);
        }
        for k in (2..n).rev() {
            let extra: Vec<Vec<TokenId>> = self
                .counts
                .contexts_of_order(k + 1)
                .into_iter()
                .map(|(ctx, _)| ctx.clone())
                .filter(|ctx| listed[k - 1].binary_search(ctx).is_err())
                .collect();
            if !extra.is_empty() {
                listed[k - 1].extend(extra);
                listed[k - 1].sort_unstable();
            }
        }

        let mut out = String::from("\\data\\\n");
        for (k, grams) in listed.iter().enumerate() {
            let _ = writeln!(out, "ngram {}={}", k + 1, grams.len());
        }
        for (k, grams) in listed.iter().enumerate() {
            let order = k + 1;
            let _ = write!(out, "\n\\{order}-grams:\n");
            for gram in grams {
                let (ctx, w) = gram.split_at(gram.len() - 1);
                let p = self.prob_at_order(ctx, w[0], order);
                let words: Vec<&str> = gram.iter().map(|&t| vocab.token(t).unwrap()).collect();
                let _ = write!(out, "{}\t{}", fmt_log10(p), words.join(" "));
                if order < n {
                    if let Some(bow) = self.backoff_weight(gram) {
                        let _ = write!(out, "\t{}", fmt_log10(bow));
                    }
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        Ok(out)
    }

    pub fn write_arpa(&self, vocab: &Vocabulary, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_arpa(vocab)?).map_err(|e| Error::io(path, e))
    }

    /// The model's probability using only orders `1..=order`.
    fn prob_at_order(&self, ctx: &[TokenId], w: TokenId, order: usize) -> f64 {
        let v = self.vocab_size() as f64;
        match &self.smoothing {
            Smoothing::Interpolated { lambdas, base_alpha } => {
                interpolated_prob(&self.counts, ctx, w, &lambdas[..order - 1], *base_alpha)
            }
            _ => {
                let mut p = 1.0 / v;
                for k in 1..=order {
                    if let Some(e) = self.counts.context(&ctx[ctx.len() + 1 - k..]) {
                        let d = &self.discounts[k - 1];
                        let cw = e.count(w);
                        let total = e.total as f64;
                        p = (cw as f64 - d.discount(cw)) / total + d.freed_mass(e) / total * p;
                    }
                }
                p
            }
        }
    }

    /// Weight on the lower order when `context` is the history at order
    /// `context.len() + 1`.
    fn backoff_weight(&self, context: &[TokenId]) -> Option<f64> {
        let e = self.counts.context(context)?;
        Some(match &self.smoothing {
            Smoothing::Interpolated { lambdas, .. } => 1.0 - lambdas[context.len() - 1],
            _ => self.discounts[context.len()].freed_mass(e) / e.total as f64,
        })
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("additive smoothing needs 0 < alpha <= 1, got {alpha}")))
    }
}

fn additive_prob(counts: &NgramCounts, ctx: &[TokenId], w: TokenId, alpha: f64) -> f64 {
    let (cw, total) = counts
        .context(ctx)
        .map_or((0, 0), |e| (e.count(w), e.total));
    (alpha + cw as f64) / (alpha * counts.vocab_size() as f64 + total as f64)
}

/// Interpolated estimate with `ctx.len() == lambdas.len()`.
fn interpolated_prob(counts: &NgramCounts, ctx: &[TokenId], w: TokenId, lambdas: &[f64], base_alpha: f64) -> f64 {
    let mut p = additive_prob(counts, &[], w, base_alpha);
    for k in 2..=lambdas.len() + 1 {
        if let Some(e) = counts.context(&ctx[ctx.len() + 1 - k..]) {
            let l = lambdas[k - 2];
            p = l * e.count(w) as f64 / e.total as f64 + (1.0 - l) * p;
        }
    }
    p
}

/// Sentinel for `log10(0)` in ARPA files.
const LOG10_ZERO: f64 = -99.0;

fn fmt_log10(p: f64) -> String {
    let l = if p > 0.0 { p.log10().max(LOG10_ZERO) } else { LOG10_ZERO };
    format!("{l:.6}")
}

/// `(log10 p, log10 backoff)` of one ARPA entry.
type ArpaScores = (f64, Option<f64>);

/// A backoff model read from an ARPA file.
#[derive(Clone, Debug, PartialEq)]
pub struct ArpaModel {
    order: usize,
    vocab: Vocabulary,
    /// `tables[k - 1]` maps order-`k` n-grams to `(log10 p, log10 backoff)`.
    tables: Vec<HashMap<Vec<TokenId>, ArpaScores>>,
    /// Original line order, for re-export.
    entries: Vec<Vec<Vec<TokenId>>>,
}

impl ArpaModel {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
        let mut declared: Vec<usize> = Vec::new();
        let mut seen_data = false;
        let mut current: Option<usize> = None;
        let mut raw: Vec<Vec<(usize, Vec<String>, ArpaScores)>> = Vec::new();
        let mut ended = false;
        for (no, line) in lines.by_ref() {
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if !seen_data {
                if trimmed == "\\data\\" {
                    seen_data = true;
                    continue;
                }
                return Err(err(no, "expected \\data\\ header".into()));
            }
            if trimmed == "\\end\\" {
                ended = true;
                break;
            }
            if let Some(rest) = trimmed.strip_prefix("ngram ") {
                if current.is_some() {
                    return Err(err(no, "ngram count after the first section".into()));
                }
                let (k, c) = rest
                    .split_once('=')
                    .ok_or_else(|| err(no, "malformed ngram count".into()))?;
                let k: usize = k.trim().parse().map_err(|_| err(no, "bad order".into()))?;
                let c: usize = c.trim().parse().map_err(|_| err(no, "bad count".into()))?;
                if k != declared.len() + 1 {
                    return Err(err(no, format!("expected order {}", declared.len() + 1)));
                }
                declared.push(c);
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('\\').and_then(|r| r.strip_suffix("-grams:")) {
                let k: usize = rest.parse().map_err(|_| err(no, "bad section header".into()))?;
                if k != raw.len() + 1 || k > declared.len() {
                    return Err(err(no, format!("unexpected section {k}")));
                }
                raw.push(Vec::new());
                current = Some(k);
                continue;
            }
            let k = current.ok_or_else(|| err(no, "entry outside an n-gram section".into()))?;
            let fields: Vec<&str> = trimmed.split_whitespace().collect();
            if fields.len() != k + 1 && fields.len() != k + 2 {
                return Err(err(no, format!("expected {} or {} fields, found {}", k + 1, k + 2, fields.len())));
            }
            let logp: f64 = fields[0].parse().map_err(|_| err(no, format!("bad probability `{}`", fields[0])))?;
            let bow = match fields.get(k + 1) {
                Some(b) => Some(b.parse::<f64>().map_err(|_| err(no, format!("bad backoff `{b}`")))?),
                None => None,
            };
            raw[k - 1].push((no, fields[1..=k].iter().map(|s| s.to_string()).collect(), (logp, bow)));
        }
        if !ended {
            return Err(err(text.lines().count(), "missing \\end\\".into()));
        }
        if declared.is_empty() || raw.len() != declared.len() {
            return Err(err(1, "section count differs from the \\data\\ header".into()));
        }
        for (k, (section, &want)) in raw.iter().zip(&declared).enumerate() {
            if section.len() != want {
                return Err(err(1, format!("order {} declares {want} entries, found {}", k + 1, section.len())));
            }
        }
        let vocab = Vocabulary::from_tokens(raw[0].iter().map(|(_, w, _)| w[0].clone()).collect())
            .map_err(|e| err(1, e.to_string()))?;
        let mut tables = Vec::with_capacity(raw.len());
        let mut entries = Vec::with_capacity(raw.len());
        for section in raw {
            let mut table = HashMap::with_capacity(section.len());
            let mut order = Vec::with_capacity(section.len());
            for (no, words, scores) in section {
                let ids: Vec<TokenId> = words
                    .iter()
                    .map(|w| vocab.id(w).ok_or_else(|| err(no, format!("`{w}` is not a unigram"))))
                    .collect::<Result<_>>()?;
                if table.insert(ids.clone(), scores).is_some() {
                    return Err(err(no, "duplicate n-gram".into()));
                }
                order.push(ids);
            }
            tables.push(table);
            entries.push(order);
        }
        Ok(ArpaModel {
            order: tables.len(),
            vocab,
            tables,
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Stored `(log10 p, log10 backoff)` of an n-gram.
    pub fn entry(&self, gram: &[TokenId]) -> Option<(f64, Option<f64>)> {
        self.tables.get(gram.len().checked_sub(1)?)?.get(gram).copied()
    }

    /// Standard backoff lookup, natural log.
    pub fn log_prob(&self, context: &[TokenId], w: TokenId) -> f64 {
        let ctx = fit_context(context, self.order - 1);
        let mut backoff = 0.0;
        for k in (1..=self.order).rev() {
            let hist = &ctx[ctx.len() + 1 - k..];
            let mut gram = hist.to_vec();
            gram.push(w);
            if let Some(&(lp, _)) = self.tables[k - 1].get(&gram) {
                if lp <= LOG10_ZERO {
                    return f64::NEG_INFINITY;
                }
                return (lp + backoff) * std::f64::consts::LN_10;
            }
            if k > 1 {
                if let Some(&(_, Some(b))) = self.tables[k - 2].get(hist) {
                    if b <= LOG10_ZERO {
                        return f64::NEG_INFINITY;
                    }
                    backoff += b;
                }
            }
        }
        f64::NEG_INFINITY
    }

    pub fn sentence_logprob(&self, sentence: &[TokenId]) -> f64 {
        let n = self.order;
        let padded = pad_sentence(sentence, n);
        (n - 1..padded.len())
            .map(|t| self.log_prob(&padded[t + 1 - n..t], padded[t]))
            .sum()
    }

    pub fn to_arpa(&self) -> String {
        let mut out = String::from("\\data\\\n");
        for (k, e) in self.entries.iter().enumerate() {
            let _ = writeln!(out, "ngram {}={}", k + 1, e.len());
        }
        for (k, grams) in self.entries.iter().enumerate() {
            let _ = write!(out, "\n\\{}-grams:\n", k + 1);
            for gram in grams {
                let (lp, bow) = self.tables[k][gram];
                let words: Vec<&str> = gram.iter().map(|&t| self.vocab.token(t).unwrap()).collect();
                let _ = write!(out, "{lp:.6}\t{}", words.join(" "));
                if let Some(b) = bow {
                    let _ = write!(out, "\t{b:.6}");
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn corpus(lines: &[&str]) -> (Vocabulary, Vec<Vec<TokenId>>) {
        let vocab = Vocabulary::build(lines.iter().flat_map(|l| tokenize(l)), None, 1);
        let enc = lines.iter().map(|l| vocab.encode_line(l)).collect();
        (vocab, enc)
    }

    #[test]
    fn bigram_windows() {
        let (v, c) = corpus(&["a b"]);
        let counts = NgramCounts::count(&c, 2, v.len()).unwrap();
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert_eq!(counts.get(&[TokenId::BOS], a), 1);
        assert_eq!(counts.get(&[a], b), 1);
        assert_eq!(counts.get(&[b], TokenId::EOS), 1);
        assert_eq!(counts.token_total(), 3);
        let doubled = NgramCounts::count(&[c[0].clone(), c[0].clone()], 2, v.len()).unwrap();
        assert_eq!(doubled.get(&[a], b), 2);
    }

    #[test]
    fn mle_and_additive_examples() {
        let (v, c) = corpus(&["a b"]);
        let counts = NgramCounts::count(&c, 2, v.len()).unwrap();
        let m = NgramModel::new(counts, Smoothing::Mle).unwrap();
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert_eq!(m.prob_mle(&[a], b).unwrap(), 1.0);
        assert_eq!(m.prob_mle(&[a], a).unwrap(), 0.0);
        assert!(matches!(m.prob_mle(&[TokenId::UNK], a), Err(Error::UnseenContext)));
        assert!((m.prob_additive(&[a], b, 1.0) - 2.0 / 7.0).abs() < 1e-15);
        assert!((m.prob_additive(&[TokenId::UNK], b, 1.0) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.sentence_logprob(&c[0]), 0.0);
    }

    #[test]
    fn discount_examples() {
        let d = KnDiscounts::from_count_of_counts([4, 2, 1, 1]);
        assert_eq!((d.y, d.d1, d.d2, d.d3_plus), (0.5, 0.5, 1.25, 1.0));
        let d = KnDiscounts::from_count_of_counts([5, 0, 0, 0]);
        assert_eq!((d.y, d.d1, d.d2, d.d3_plus), (1.0, 1.0, 2.0, 3.0));
        assert_eq!(d.discount(0), 0.0);
    }

    #[test]
    fn kn_distribution_is_proper() {
        let (v, c) = corpus(&["a b c", "a c b a", "b b c a", "c"]);
        let counts = NgramCounts::count(&c, 3, v.len()).unwrap();
        let m = NgramModel::new(counts, Smoothing::ModifiedKn).unwrap();
        for ctx in [[TokenId::BOS, TokenId::BOS], [v.id("a").unwrap(), v.id("b").unwrap()], [TokenId::UNK, TokenId::PAD]] {
            let dist = m.distribution(&ctx).unwrap();
            assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (w, p) in dist.iter().enumerate() {
                assert!((m.prob_kn(&ctx, TokenId::new(w)) - p).abs() < 1e-15);
                assert!(*p > 0.0);
            }
        }
    }

    #[test]
    fn arpa_rejects_unsmoothed_models() {
        let (v, c) = corpus(&["a b"]);
        let counts = NgramCounts::count(&c, 2, v.len()).unwrap();
        let m = NgramModel::new(counts, Smoothing::Additive { alpha: 1.0 }).unwrap();
        assert!(m.to_arpa(&v).is_err());
    }

    #[test]
    fn arpa_parse_errors_carry_line_numbers() {
        let text = "\\data\\\nngram 1=1\n\n\\1-grams:\nnot-a-number\t<pad>\n\\end\\\n";
        match ArpaModel::parse(text, Path::new("m.arpa")) {
            Err(Error::Parse { line: 5, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}

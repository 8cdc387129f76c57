//! Autoregressive priors `p(z_n | z_0..z_{n-1}, c)` over latent tokens.
//!
//! The next-token alphabet is every token except `<bos>`, so distributions
//! have `V - 1` entries; entry `i` belongs to token id `i + 1`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::LatentSequence;
use super::vocab::{TokenId, BOS, EOS};
use crate::error::{Error, Result};
use crate::nnet::{Activation, Mlp, Params};

pub const DEFAULT_WINDOW: usize = 8;

/// The last `window` tokens of `<bos> z_1 .. z_{n-1}`, left-padded with `<bos>`.
pub fn context(history: &[TokenId], window: usize) -> Vec<TokenId> {
    let mut full = Vec::with_capacity(history.len() + 1);
    full.push(BOS);
    full.extend_from_slice(history);
    let mut ctx = vec![BOS; window.saturating_sub(full.len())];
    ctx.extend_from_slice(&full[full.len().saturating_sub(window)..]);
    ctx
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>()
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TableEntry {
    class: usize,
    context: Vec<TokenId>,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TableRepr {
    vocab_size: usize,
    window: usize,
    smoothing: f64,
    entries: Vec<TableEntry>,
}

/// Count tables with additive smoothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TableRepr", try_from = "TableRepr")]
pub struct TabularPrior {
    pub vocab_size: usize,
    pub window: usize,
    /// Pseudo-count added to every next token (1 = add-one).
    pub smoothing: f64,
    counts: HashMap<(usize, Vec<TokenId>), Vec<u64>>,
}

impl From<TabularPrior> for TableRepr {
    fn from(p: TabularPrior) -> Self {
        let mut entries: Vec<TableEntry> = p
            .counts
            .into_iter()
            .map(|((class, context), counts)| TableEntry { class, context, counts })
            .collect();
        entries.sort_by(|a, b| (a.class, &a.context).cmp(&(b.class, &b.context)));
        TableRepr {
            vocab_size: p.vocab_size,
            window: p.window,
            smoothing: p.smoothing,
            entries,
        }
    }
}

impl TryFrom<TableRepr> for TabularPrior {
    type Error = Error;

    fn try_from(r: TableRepr) -> Result<Self> {
        let mut p = TabularPrior::new(r.vocab_size, r.window, r.smoothing)?;
        for e in r.entries {
            if e.counts.len() != r.vocab_size - 1 || e.context.len() != r.window {
                return Err(Error::contract("count table entry has the wrong shape"));
            }
            p.counts.insert((e.class, e.context), e.counts);
        }
        Ok(p)
    }
}

impl TabularPrior {
    pub fn new(vocab_size: usize, window: usize, smoothing: f64) -> Result<Self> {
        if vocab_size < 2 || window == 0 {
            return Err(Error::contract("tabular prior needs at least two tokens and a positive window"));
        }
        if !(smoothing >= 0.0) {
            return Err(Error::contract("smoothing must be non-negative"));
        }
        Ok(Self {
            vocab_size,
            window,
            smoothing,
            counts: HashMap::new(),
        })
    }

    pub fn observe(&mut self, class: usize, seq: &LatentSequence) -> Result<()> {
        check_tokens(&seq.tokens, self.vocab_size)?;
        for n in 0..seq.tokens.len() {
            let ctx = context(&seq.tokens[..n], self.window);
            let row = self
                .counts
                .entry((class, ctx))
                .or_insert_with(|| vec![0; self.vocab_size - 1]);
            row[seq.tokens[n] as usize - 1] += 1;
        }
        Ok(())
    }

    /// Raw next-token counts for a context (zeros when unseen).
    pub fn counts(&self, class: usize, history: &[TokenId]) -> Vec<u64> {
        self.counts
            .get(&(class, context(history, self.window)))
            .cloned()
            .unwrap_or_else(|| vec![0; self.vocab_size - 1])
    }

    /// Observed `(class, context)` keys, sorted.
    pub fn contexts(&self) -> Vec<(usize, Vec<TokenId>)> {
        let mut keys: Vec<_> = self.counts.keys().cloned().collect();
        keys.sort();
        keys
    }

    /// `(count + s) / (total + s (V - 1))`; with `s = 0` an unseen context is uniform.
    pub fn next_probs(&self, class: usize, history: &[TokenId]) -> Vec<f64> {
        let counts = self.counts(class, history);
        let total: u64 = counts.iter().sum();
        let k = counts.len() as f64;
        let denom = total as f64 + self.smoothing * k;
        if denom == 0.0 {
            return vec![1.0 / k; counts.len()];
        }
        counts.iter().map(|&c| (c as f64 + self.smoothing) / denom).collect()
    }

    /// Log-counts divided by `tau`, renormalized.
    pub fn next_probs_tempered(&self, class: usize, history: &[TokenId], tau: f64) -> Result<Vec<f64>> {
        check_temperature(tau)?;
        let mut p = self.next_probs(class, history);
        for v in p.iter_mut() {
            *v = v.ln() / tau;
        }
        softmax_in_place(&mut p);
        Ok(p)
    }
}

pub fn fit_tabular_prior(
    corpus: &[(usize, LatentSequence)],
    vocab_size: usize,
    window: usize,
    smoothing: f64,
) -> Result<TabularPrior> {
    let mut p = TabularPrior::new(vocab_size, window, smoothing)?;
    for (c, seq) in corpus {
        p.observe(*c, seq)?;
    }
    Ok(p)
}

pub(crate) fn check_tokens(tokens: &[TokenId], vocab_size: usize) -> Result<()> {
    for (i, &t) in tokens.iter().enumerate() {
        if t == BOS || t as usize >= vocab_size {
            return Err(Error::contract(format!(
                "token id {t} at position {} is not a valid next token",
                i + 1
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuralPriorConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub window: usize,
}

impl Default for NeuralPriorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 4,
            hidden: 64,
            window: DEFAULT_WINDOW,
        }
    }
}

/// Token embeddings plus an MLP over `[emb(ctx_1) .. emb(ctx_w), onehot(c)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralPrior {
    pub vocab_size: usize,
    pub n_classes: usize,
    pub window: usize,
    pub embed_dim: usize,
    /// `vocab_size` rows of `embed_dim`, row-major.
    pub embeddings: Vec<f64>,
    pub net: Mlp,
}

impl NeuralPrior {
    pub fn new<R: Rng + ?Sized>(
        cfg: NeuralPriorConfig,
        vocab_size: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if vocab_size < 2 || cfg.window == 0 || cfg.embed_dim == 0 || n_classes == 0 {
            return Err(Error::contract("neural prior needs tokens, classes, a window and an embedding size"));
        }
        let embeddings = (0..vocab_size * cfg.embed_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let input = cfg.window * cfg.embed_dim + n_classes;
        let net = Mlp::new(&[input, cfg.hidden, vocab_size - 1], Activation::Tanh, rng)?;
        Ok(Self {
            vocab_size,
            n_classes,
            window: cfg.window,
            embed_dim: cfg.embed_dim,
            embeddings,
            net,
        })
    }

    pub fn embedding(&self, token: TokenId) -> &[f64] {
        let d = self.embed_dim;
        &self.embeddings[token as usize * d..(token as usize + 1) * d]
    }

    fn input(&self, class: usize, ctx: &[TokenId]) -> Result<Vec<f64>> {
        if class >= self.n_classes {
            return Err(Error::contract(format!("class {class} out of range for the prior")));
        }
        let mut v = Vec::with_capacity(self.net.input_dim());
        for &t in ctx {
            v.extend_from_slice(self.embedding(t));
        }
        let mut onehot = vec![0.0; self.n_classes];
        onehot[class] = 1.0;
        v.extend(onehot);
        Ok(v)
    }

    pub fn logits(&self, class: usize, history: &[TokenId]) -> Result<Vec<f64>> {
        check_tokens(history, self.vocab_size)?;
        self.net.forward(&self.input(class, &context(history, self.window))?)
    }

    pub fn next_probs_tempered(&self, class: usize, history: &[TokenId], tau: f64) -> Result<Vec<f64>> {
        check_temperature(tau)?;
        let mut l = self.logits(class, history)?;
        for v in l.iter_mut() {
            *v /= tau;
        }
        softmax_in_place(&mut l);
        Ok(l)
    }

    /// NLL of `seq` and its gradient; the gradient is added into `grads`
    /// scaled by `weight`.
    pub fn nll_and_grads(
        &self,
        class: usize,
        seq: &LatentSequence,
        weight: f64,
        grads: &mut NeuralPrior,
    ) -> Result<f64> {
        check_tokens(&seq.tokens, self.vocab_size)?;
        let mut nll = 0.0;
        for n in 0..seq.tokens.len() {
            let ctx = context(&seq.tokens[..n], self.window);
            let trace = self.net.forward_trace(&self.input(class, &ctx)?)?;
            let mut p = trace.output().to_vec();
            softmax_in_place(&mut p);
            let target = seq.tokens[n] as usize - 1;
            nll -= p[target].ln();
            // d(-log softmax)/dlogits = p - onehot.
            let mut up: Vec<f64> = p.iter().map(|v| v * weight).collect();
            up[target] -= weight;
            let dx = self.net.backward_into(&trace, &up, &mut grads.net)?;
            let d = self.embed_dim;
            for (slot, &t) in ctx.iter().enumerate() {
                let row = &mut grads.embeddings[t as usize * d..(t as usize + 1) * d];
                for (g, v) in row.iter_mut().zip(&dx[slot * d..(slot + 1) * d]) {
                    *g += v;
                }
            }
        }
        Ok(nll)
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }

    /// Mean of the payload token embeddings; the `<eos>` embedding when the payload is empty.
    pub fn embed_latents(&self, seq: &LatentSequence) -> Result<Vec<f64>> {
        check_tokens(&seq.tokens, self.vocab_size)?;
        Ok(pool_embeddings(&self.embeddings, self.embed_dim, seq))
    }

    /// Adds the gradient of `embed_latents(seq) . upstream` into `grads`.
    pub fn embed_latents_backward(&self, seq: &LatentSequence, upstream: &[f64], grads: &mut NeuralPrior) {
        pool_embeddings_backward(&mut grads.embeddings, self.embed_dim, seq, upstream);
    }
}

fn pooled_tokens(seq: &LatentSequence) -> (&[TokenId], f64) {
    let payload = seq.payload();
    if payload.is_empty() {
        (&[EOS], 1.0)
    } else {
        (payload, 1.0 / payload.len() as f64)
    }
}

/// Mean-pooled rows of a `V x dim` table over the payload tokens of `seq`
/// (the `<eos>` row for an empty payload). Token ids must be in range.
pub fn pool_embeddings(table: &[f64], dim: usize, seq: &LatentSequence) -> Vec<f64> {
    let (tokens, scale) = pooled_tokens(seq);
    let mut out = vec![0.0; dim];
    for &t in tokens {
        for (o, v) in out.iter_mut().zip(&table[t as usize * dim..(t as usize + 1) * dim]) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

pub fn pool_embeddings_backward(grad_table: &mut [f64], dim: usize, seq: &LatentSequence, upstream: &[f64]) {
    let (tokens, scale) = pooled_tokens(seq);
    for &t in tokens {
        let row = &mut grad_table[t as usize * dim..(t as usize + 1) * dim];
        for (g, u) in row.iter_mut().zip(upstream) {
            *g += scale * u;
        }
    }
}

impl Params for NeuralPrior {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = vec![self.embeddings.as_slice()];
        v.extend(self.net.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![self.embeddings.as_mut_slice()];
        v.extend(self.net.tensors_mut());
        v
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut v = vec!["prior.embeddings".to_string()];
        v.extend(self.net.tensor_names().into_iter().map(|n| format!("prior.{n}")));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum ArPrior {
    Tabular(TabularPrior),
    Neural(NeuralPrior),
}

/// Result of ancestral sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArDraw {
    pub sequence: LatentSequence,
    /// `max_len` was reached before `<eos>`.
    pub truncated: bool,
}

impl ArPrior {
    pub fn vocab_size(&self) -> usize {
        match self {
            ArPrior::Tabular(p) => p.vocab_size,
            ArPrior::Neural(p) => p.vocab_size,
        }
    }

    pub fn next_probs(&self, class: usize, history: &[TokenId], tau: f64) -> Result<Vec<f64>> {
        match self {
            ArPrior::Tabular(p) => p.next_probs_tempered(class, history, tau),
            ArPrior::Neural(p) => p.next_probs_tempered(class, history, tau),
        }
    }

    /// Entropy of the first-token distribution at temperature `tau`.
    pub fn first_token_entropy(&self, class: usize, tau: f64) -> Result<f64> {
        Ok(entropy(&self.next_probs(class, &[], tau)?))
    }
}

/// `-sum_n log p(z_n | z_<n, c)` including the `<eos>` term.
pub fn ar_nll(prior: &ArPrior, class: usize, seq: &LatentSequence) -> Result<f64> {
    check_tokens(&seq.tokens, prior.vocab_size())?;
    let mut nll = 0.0;
    for n in 0..seq.tokens.len() {
        let p = prior.next_probs(class, &seq.tokens[..n], 1.0)?;
        nll -= p[seq.tokens[n] as usize - 1].ln();
    }
    Ok(nll)
}

/// Ancestral sampling until `<eos>` or `max_len` tokens.
pub fn ar_sample_with<R: Rng + ?Sized>(
    prior: &ArPrior,
    scheme: super::grammar::LatentScheme,
    class: usize,
    tau: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<ArDraw> {
    check_temperature(tau)?;
    let mut tokens: Vec<TokenId> = Vec::new();
    while tokens.len() < max_len {
        let p = prior.next_probs(class, &tokens, tau)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = p.iter().rposition(|&q| q > 0.0).expect("distribution has support");
        for (i, &q) in p.iter().enumerate() {
            acc += q;
            if u < acc && q > 0.0 {
                pick = i;
                break;
            }
        }
        let tok = pick as TokenId + 1;
        tokens.push(tok);
        if tok == EOS {
            return Ok(ArDraw {
                sequence: LatentSequence::new(scheme, tokens),
                truncated: false,
            });
        }
    }
    Ok(ArDraw {
        sequence: LatentSequence::new(scheme, tokens),
        truncated: true,
    })
}

pub fn ar_sample(
    prior: &ArPrior,
    scheme: super::grammar::LatentScheme,
    class: usize,
    tau: f64,
    seed: u64,
    max_len: usize,
) -> Result<ArDraw> {
    ar_sample_with(prior, scheme, class, tau, max_len, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latents::grammar::LatentScheme;

    fn seq(tokens: &[TokenId]) -> LatentSequence {
        LatentSequence::new(LatentScheme::Text, tokens.to_vec())
    }

    #[test]
    fn context_padding() {
        assert_eq!(context(&[], 3), vec![BOS, BOS, BOS]);
        assert_eq!(context(&[5, 6], 3), vec![BOS, 5, 6]);
        assert_eq!(context(&[5, 6, 7, 8], 3), vec![6, 7, 8]);
    }

    #[test]
    fn uniform_prior_nll() {
        // Fresh table, add-one smoothing: every context is uniform over V - 1.
        let p = ArPrior::Tabular(TabularPrior::new(6, 8, 1.0).unwrap());
        let s = seq(&[3, 4, EOS]);
        let nll = ar_nll(&p, 0, &s).unwrap();
        assert!((nll - 3.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn count_table_arithmetic() {
        // Tokens: bos eos # A B -> A = 3, B = 4.
        let corpus: Vec<(usize, LatentSequence)> = [3, 3, 3, 4].iter().map(|&t| (0, seq(&[t, EOS]))).collect();
        let p = ArPrior::Tabular(fit_tabular_prior(&corpus, 5, 8, 0.0).unwrap());
        let nll = ar_nll(&p, 0, &seq(&[3, EOS])).unwrap();
        assert!((nll + (0.75f64).ln()).abs() < 1e-12);
        let eos_only = ar_nll(&p, 0, &seq(&[EOS])).unwrap();
        assert!(eos_only.is_infinite());

        let smoothed = fit_tabular_prior(&corpus, 5, 8, 1.0).unwrap();
        let probs = smoothed.next_probs(0, &[]);
        assert!((probs[2] - 4.0 / 8.0).abs() < 1e-15);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_limit_and_determinism() {
        let corpus: Vec<(usize, LatentSequence)> =
            (0..10).map(|i| (0, seq(&[if i < 9 { 3 } else { 4 }, EOS]))).collect();
        let p = ArPrior::Tabular(fit_tabular_prior(&corpus, 5, 8, 1.0).unwrap());
        for s in 0..20 {
            let d = ar_sample(&p, LatentScheme::Text, 0, 1e-3, s, 4).unwrap();
            assert_eq!(d.sequence.tokens, vec![3, EOS]);
        }
        let a = ar_sample(&p, LatentScheme::Text, 0, 1.0, 7, 4).unwrap();
        let b = ar_sample(&p, LatentScheme::Text, 0, 1.0, 7, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncation_is_flagged() {
        let p = ArPrior::Tabular(TabularPrior::new(4, 2, 1.0).unwrap());
        let d = ar_sample(&p, LatentScheme::Voken, 0, 1e-6, 0, 0).unwrap();
        assert!(d.truncated);
    }

    #[test]
    fn temperature_raises_entropy() {
        let corpus: Vec<(usize, LatentSequence)> =
            [3, 3, 3, 4, 5].iter().map(|&t| (0, seq(&[t, EOS]))).collect();
        let p = ArPrior::Tabular(fit_tabular_prior(&corpus, 6, 8, 1.0).unwrap());
        let taus = [0.1, 0.5, 1.0, 2.0, 10.0];
        let hs: Vec<f64> = taus.iter().map(|&t| p.first_token_entropy(0, t).unwrap()).collect();
        for w in hs.windows(2) {
            assert!(w[0] <= w[1] + 1e-12);
        }
        assert!(p.next_probs(0, &[], 0.0).is_err());
    }

    #[test]
    fn neural_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prior = NeuralPrior::new(
            NeuralPriorConfig { embed_dim: 3, hidden: 5, window: 2 },
            6,
            2,
            &mut rng,
        )
        .unwrap();
        let s = seq(&[3, 4, 5, EOS]);
        let mut g = prior.zeros_like();
        let nll = prior.nll_and_grads(1, &s, 1.0, &mut g).unwrap();
        let wrapped = ArPrior::Neural(prior.clone());
        assert!((nll - ar_nll(&wrapped, 1, &s).unwrap()).abs() < 1e-12);
        let h = 1e-6;
        let grads: Vec<Vec<f64>> = g.tensors().iter().map(|t| t.to_vec()).collect();
        for (ti, gt) in grads.iter().enumerate() {
            for (j, &an) in gt.iter().enumerate() {
                let mut plus = prior.clone();
                plus.tensors_mut()[ti][j] += h;
                let mut minus = prior.clone();
                minus.tensors_mut()[ti][j] -= h;
                let fd = (ar_nll(&ArPrior::Neural(plus), 1, &s).unwrap()
                    - ar_nll(&ArPrior::Neural(minus), 1, &s).unwrap())
                    / (2.0 * h);
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-6, "tensor {ti} entry {j}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn pooled_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = NeuralPrior::new(NeuralPriorConfig::default(), 6, 2, &mut rng).unwrap();
        assert_eq!(p.embed_latents(&seq(&[EOS])).unwrap(), p.embedding(EOS));
        assert_eq!(p.embed_latents(&seq(&[3, EOS])).unwrap(), p.embedding(3));
        assert_ne!(p.embed_latents(&seq(&[3, EOS])).unwrap(), p.embed_latents(&seq(&[4, EOS])).unwrap());
    }
}

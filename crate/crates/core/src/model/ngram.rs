use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_context, LanguageModel, LogitVector, ModelFingerprint, TokenId, Vocab};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: BTreeMap<TokenId, u64>,
}

/// Back-off n-gram model with additive (Laplace) smoothing.
///
/// `P(w | h) = (c(h, w) + a) / (c(h) + a * V)` where `h` is the longest
/// history of at most `order - 1` tokens that was seen in training; unseen
/// histories back off by dropping their oldest token. Every vocabulary entry
/// receives smoothing mass, so all logits are finite.
///
/// Histories are read from the context after its last bos token and are
/// left-padded with bos, the same way training documents are padded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NGramRepr", into = "NGramRepr")]
pub struct NGramModel {
    vocab: Vocab,
    order: usize,
    smoothing: f64,
    /// `tables[j]` maps histories of length `j` to successor counts.
    tables: Vec<BTreeMap<Vec<TokenId>, ContextCounts>>,
    fingerprint: ModelFingerprint,
}

#[derive(Serialize, Deserialize)]
struct NGramRepr {
    order: usize,
    smoothing: f64,
    vocab: Vocab,
    tables: Vec<Vec<ContextEntry>>,
}

#[derive(Serialize, Deserialize)]
struct ContextEntry {
    context: Vec<TokenId>,
    counts: Vec<(TokenId, u64)>,
}

impl From<NGramModel> for NGramRepr {
    fn from(m: NGramModel) -> Self {
        m.to_repr()
    }
}

impl TryFrom<NGramRepr> for NGramModel {
    type Error = Error;

    fn try_from(repr: NGramRepr) -> Result<Self> {
        if repr.tables.len() != repr.order {
            return Err(Error::Config(format!(
                "n-gram of order {} needs {} count tables, found {}",
                repr.order,
                repr.order,
                repr.tables.len()
            )));
        }
        let v = repr.vocab.size() as TokenId;
        let mut tables = Vec::with_capacity(repr.order);
        for (len, entries) in repr.tables.into_iter().enumerate() {
            let mut table = BTreeMap::new();
            for entry in entries {
                if entry.context.len() != len
                    || entry.context.iter().any(|&t| t >= v)
                    || entry.counts.iter().any(|&(t, _)| t >= v)
                {
                    return Err(Error::Config(format!(
                        "malformed count-table entry for history {:?}",
                        entry.context
                    )));
                }
                let next: BTreeMap<TokenId, u64> = entry.counts.into_iter().collect();
                let total = next.values().sum();
                table.insert(entry.context, ContextCounts { total, next });
            }
            tables.push(table);
        }
        Self::from_parts(repr.vocab, repr.order, repr.smoothing, tables)
    }
}

impl NGramModel {
    /// Train a byte-level model. Each non-empty line of `corpus` is one document.
    pub fn train(corpus: &str, order: usize, smoothing: f64) -> Result<Self> {
        let lines: Vec<&[u8]> = corpus
            .lines()
            .map(str::as_bytes)
            .filter(|l| !l.is_empty())
            .collect();
        if lines.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let vocab = Vocab::from_bytes(lines.iter().flat_map(|l| l.iter().copied()));
        let docs: Vec<Vec<TokenId>> = lines
            .iter()
            .map(|l| l.iter().map(|&b| vocab.byte_id(b).unwrap()).collect())
            .collect();
        Self::train_tokens(vocab, &docs, order, smoothing)
    }

    /// Train on pre-tokenized documents over a given vocabulary. Documents
    /// must not contain bos or eos; both are added here.
    pub fn train_tokens(
        vocab: Vocab,
        docs: &[Vec<TokenId>],
        order: usize,
        smoothing: f64,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("n-gram order must be at least 1".into()));
        }
        if !(smoothing > 0.0 && smoothing.is_finite()) {
            return Err(Error::Config(format!(
                "smoothing must be positive and finite, got {smoothing}"
            )));
        }
        if docs.iter().all(|d| d.is_empty()) {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let (bos, eos) = (vocab.bos(), vocab.eos());
        let mut tables: Vec<BTreeMap<Vec<TokenId>, ContextCounts>> =
            vec![BTreeMap::new(); order];
        for doc in docs.iter().filter(|d| !d.is_empty()) {
            if let Some(&bad) = doc
                .iter()
                .find(|&&t| t == bos || t == eos || t as usize >= vocab.size())
            {
                return Err(Error::Config(format!(
                    "training document contains invalid token {bad}"
                )));
            }
            let mut padded = vec![bos; order - 1];
            padded.extend_from_slice(doc);
            padded.push(eos);
            for i in order - 1..padded.len() {
                let next = padded[i];
                for (len, table) in tables.iter_mut().enumerate() {
                    let counts = table.entry(padded[i - len..i].to_vec()).or_default();
                    counts.total += 1;
                    *counts.next.entry(next).or_default() += 1;
                }
            }
        }
        Self::from_parts(vocab, order, smoothing, tables)
    }

    fn from_parts(
        vocab: Vocab,
        order: usize,
        smoothing: f64,
        tables: Vec<BTreeMap<Vec<TokenId>, ContextCounts>>,
    ) -> Result<Self> {
        if order == 0 || !(smoothing > 0.0 && smoothing.is_finite()) {
            return Err(Error::Config(format!(
                "invalid n-gram parameters: order {order}, smoothing {smoothing}"
            )));
        }
        if tables[0].get(&Vec::new()).map_or(0, |c| c.total) == 0 {
            return Err(Error::Config("n-gram has no unigram counts".into()));
        }
        let mut model = Self {
            vocab,
            order,
            smoothing,
            tables,
            fingerprint: ModelFingerprint([0; 32]),
        };
        let mut hasher = Sha256::new();
        hasher.update(b"cfdecode/ngram/v1");
        hasher.update(serde_json::to_vec(&model.to_repr()).expect("model serializes"));
        model.fingerprint = ModelFingerprint(hasher.finalize().into());
        Ok(model)
    }

    fn to_repr(&self) -> NGramRepr {
        NGramRepr {
            order: self.order,
            smoothing: self.smoothing,
            vocab: self.vocab.clone(),
            tables: self
                .tables
                .iter()
                .map(|t| {
                    t.iter()
                        .map(|(ctx, c)| ContextEntry {
                            context: ctx.clone(),
                            counts: c.next.iter().map(|(&k, &v)| (k, v)).collect(),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    /// Count of `next` after `history` (exact history length, no back-off).
    pub fn count(&self, history: &[TokenId], next: TokenId) -> u64 {
        self.tables
            .get(history.len())
            .and_then(|t| t.get(history))
            .and_then(|c| c.next.get(&next).copied())
            .unwrap_or(0)
    }

    /// The padded history of length `order - 1` for a context.
    fn history(&self, context: &[TokenId]) -> Vec<TokenId> {
        let bos = self.vocab.bos();
        let start = context.iter().rposition(|&t| t == bos).map_or(0, |i| i + 1);
        let tail = &context[start..];
        let want = self.order - 1;
        let mut h = vec![bos; want.saturating_sub(tail.len())];
        h.extend_from_slice(&tail[tail.len().saturating_sub(want)..]);
        h
    }

    /// Length of the history actually used after back-off.
    pub fn backoff_length(&self, context: &[TokenId]) -> usize {
        let h = self.history(context);
        self.resolve(&h).0
    }

    fn resolve(&self, history: &[TokenId]) -> (usize, &ContextCounts) {
        for len in (0..self.order).rev() {
            let key = &history[history.len() - len..];
            if let Some(c) = self.tables[len].get(key) {
                if c.total > 0 {
                    return (len, c);
                }
            }
        }
        unreachable!("unigram table is never empty")
    }
}

impl LanguageModel for NGramModel {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn fingerprint(&self) -> ModelFingerprint {
        self.fingerprint
    }

    fn next_logits(&self, context: &[TokenId]) -> Result<LogitVector> {
        check_context(&self.vocab, context)?;
        let h = self.history(context);
        let (_, counts) = self.resolve(&h);
        let v = self.vocab.size();
        let log_norm = (counts.total as f64 + self.smoothing * v as f64).ln();
        let mut logits = vec![self.smoothing.ln() - log_norm; v];
        for (&tok, &c) in &counts.next {
            logits[tok as usize] = (c as f64 + self.smoothing).ln() - log_norm;
        }
        Ok(logits)
    }
}

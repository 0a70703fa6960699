use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_context, LanguageModel, LogitVector, ModelFingerprint, NGramModel, TokenId, Vocab};
use crate::error::{Error, Result};

/// A family of n-gram tables over one vocabulary, selected by the control
/// token that opens the context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConditionedRepr", into = "ConditionedRepr")]
pub struct ConditionedModel {
    vocab: Vocab,
    controls: Vec<TokenId>,
    tables: Vec<NGramModel>,
    fingerprint: ModelFingerprint,
}

#[derive(Serialize, Deserialize)]
struct ConditionedRepr {
    vocab: Vocab,
    controls: Vec<TokenId>,
    tables: Vec<NGramModel>,
}

impl TryFrom<ConditionedRepr> for ConditionedModel {
    type Error = Error;

    fn try_from(r: ConditionedRepr) -> Result<Self> {
        ConditionedModel::new(r.vocab, r.controls, r.tables)
    }
}

impl From<ConditionedModel> for ConditionedRepr {
    fn from(m: ConditionedModel) -> Self {
        ConditionedRepr {
            vocab: m.vocab,
            controls: m.controls,
            tables: m.tables,
        }
    }
}

impl ConditionedModel {
    /// `controls[i]` selects `tables[i]`. Every table must share `vocab`.
    pub fn new(vocab: Vocab, controls: Vec<TokenId>, tables: Vec<NGramModel>) -> Result<Self> {
        if controls.is_empty() || controls.len() != tables.len() {
            return Err(Error::Config(format!(
                "{} control tokens for {} tables",
                controls.len(),
                tables.len()
            )));
        }
        for &c in &controls {
            if !matches!(vocab.symbol(c), Some(super::Symbol::Control(_))) {
                return Err(Error::Config(format!("token {c} is not a control token")));
            }
        }
        if tables.iter().any(|t| t.vocab() != &vocab) {
            return Err(Error::Config(
                "conditioned tables must share one vocabulary".into(),
            ));
        }
        let mut hasher = Sha256::new();
        hasher.update(b"cfdecode/conditioned/v1");
        for (c, t) in controls.iter().zip(&tables) {
            hasher.update(c.to_le_bytes());
            hasher.update(t.fingerprint().0);
        }
        Ok(Self {
            vocab,
            controls,
            tables,
            fingerprint: ModelFingerprint(hasher.finalize().into()),
        })
    }

    pub fn controls(&self) -> &[TokenId] {
        &self.controls
    }

    pub fn tables(&self) -> &[NGramModel] {
        &self.tables
    }

    pub fn table_for(&self, control: TokenId) -> Option<&NGramModel> {
        self.controls
            .iter()
            .position(|&c| c == control)
            .map(|i| &self.tables[i])
    }
}

impl LanguageModel for ConditionedModel {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn fingerprint(&self) -> ModelFingerprint {
        self.fingerprint
    }

    fn next_logits(&self, context: &[TokenId]) -> Result<LogitVector> {
        check_context(&self.vocab, context)?;
        let table = self.table_for(context[0]).ok_or_else(|| {
            Error::Domain(format!(
                "context must open with a control token, found {}",
                context[0]
            ))
        })?;
        let rest = &context[1..];
        if rest.is_empty() {
            table.next_logits(&[self.vocab.bos()])
        } else {
            table.next_logits(rest)
        }
    }
}

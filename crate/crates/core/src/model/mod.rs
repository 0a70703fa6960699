//! Autoregressive model surface: vocabularies, logits, and the model trait.

mod conditioned;
mod ngram;
pub mod remote;

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use conditioned::ConditionedModel;
pub use ngram::NGramModel;
pub use remote::{Endpoint, RemoteModel};

pub type TokenId = u32;

/// Unnormalized log-odds, one per vocabulary entry.
pub type LogitVector = Vec<f64>;

/// What a vocabulary entry stands for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Symbol {
    Bos,
    Eos,
    Byte(u8),
    /// A dedicated conditioning token, written as `<name>` in text.
    Control(String),
    /// Entry of a remote vocabulary whose meaning is unknown locally.
    Opaque,
}

/// Dense vocabulary `0..size` with distinguished begin/end tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    symbols: Vec<Symbol>,
    bos: TokenId,
    eos: TokenId,
    byte_ids: Box<[Option<TokenId>; 256]>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    bos: TokenId,
    eos: TokenId,
    symbols: Vec<Symbol>,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;

    fn try_from(repr: VocabRepr) -> Result<Self> {
        Vocab::new(repr.symbols, repr.bos, repr.eos)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            bos: v.bos,
            eos: v.eos,
            symbols: v.symbols,
        }
    }
}

impl Vocab {
    pub fn new(symbols: Vec<Symbol>, bos: TokenId, eos: TokenId) -> Result<Self> {
        let size = symbols.len();
        if bos == eos {
            return Err(Error::Config("bos and eos must differ".into()));
        }
        if bos as usize >= size || eos as usize >= size {
            return Err(Error::Config(format!(
                "bos {bos} / eos {eos} out of range for vocabulary of size {size}"
            )));
        }
        if symbols[bos as usize] != Symbol::Bos || symbols[eos as usize] != Symbol::Eos {
            return Err(Error::Config(
                "bos/eos ids must point at bos/eos symbols".into(),
            ));
        }
        let mut byte_ids: Box<[Option<TokenId>; 256]> = Box::new([None; 256]);
        for (id, sym) in symbols.iter().enumerate() {
            match sym {
                Symbol::Bos if id != bos as usize => {
                    return Err(Error::Config("duplicate bos symbol".into()))
                }
                Symbol::Eos if id != eos as usize => {
                    return Err(Error::Config("duplicate eos symbol".into()))
                }
                Symbol::Byte(b) => {
                    if byte_ids[*b as usize].is_some() {
                        return Err(Error::Config(format!("duplicate byte symbol {b}")));
                    }
                    byte_ids[*b as usize] = Some(id as TokenId);
                }
                _ => {}
            }
        }
        Ok(Self {
            symbols,
            bos,
            eos,
            byte_ids,
        })
    }

    /// Byte-level vocabulary: bos = 0, eos = 1, then the given bytes in ascending order.
    pub fn from_bytes(bytes: impl IntoIterator<Item = u8>) -> Self {
        let mut seen = [false; 256];
        for b in bytes {
            seen[b as usize] = true;
        }
        let mut symbols = vec![Symbol::Bos, Symbol::Eos];
        symbols.extend((0..=255u8).filter(|b| seen[*b as usize]).map(Symbol::Byte));
        Self::new(symbols, 0, 1).expect("byte vocabulary is well formed")
    }

    /// Vocabulary known only by its size, as announced by a remote server.
    pub fn opaque(size: usize, bos: TokenId, eos: TokenId) -> Result<Self> {
        if size == 0 || bos as usize >= size || eos as usize >= size {
            return Err(Error::Config(format!(
                "bos {bos} / eos {eos} out of range for vocabulary of size {size}"
            )));
        }
        let mut symbols = vec![Symbol::Opaque; size];
        symbols[bos as usize] = Symbol::Bos;
        symbols[eos as usize] = Symbol::Eos;
        Self::new(symbols, bos, eos)
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    pub fn symbol(&self, id: TokenId) -> Option<&Symbol> {
        self.symbols.get(id as usize)
    }

    pub fn byte_id(&self, b: u8) -> Option<TokenId> {
        self.byte_ids[b as usize]
    }

    /// Id of the control token written `<name>` in text.
    pub fn control_id(&self, name: &str) -> Option<TokenId> {
        self.symbols
            .iter()
            .position(|s| matches!(s, Symbol::Control(n) if n == name))
            .map(|i| i as TokenId)
    }

    pub fn is_byte(&self, id: TokenId) -> bool {
        matches!(self.symbol(id), Some(Symbol::Byte(_)))
    }

    /// Text to tokens. `<name>` spans that name a control token become that
    /// token, `<bos>`/`<eos>` become the boundary tokens, and every other byte
    /// maps to its byte token.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i] == b'<' {
                if let Some(len) = bytes[i..].iter().position(|&b| b == b'>') {
                    let name = &text[i + 1..i + len];
                    let special = match name {
                        "bos" => Some(self.bos),
                        "eos" => Some(self.eos),
                        _ => self.control_id(name),
                    };
                    if let Some(id) = special {
                        out.push(id);
                        i += len + 1;
                        continue;
                    }
                }
            }
            let id = self.byte_id(bytes[i]).ok_or_else(|| {
                Error::Input(format!(
                    "byte {:#04x} at offset {i} is not in the vocabulary",
                    bytes[i]
                ))
            })?;
            out.push(id);
            i += 1;
        }
        Ok(out)
    }

    /// Tokens to text. Byte tokens are concatenated and decoded as UTF-8;
    /// boundary, control and opaque tokens are dropped.
    pub fn decode(&self, tokens: &[TokenId]) -> String {
        let bytes: Vec<u8> = tokens
            .iter()
            .filter_map(|&t| match self.symbol(t) {
                Some(Symbol::Byte(b)) => Some(*b),
                _ => None,
            })
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// SHA-256 over a model's parameters and vocabulary.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelFingerprint(pub [u8; 32]);

impl ModelFingerprint {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s)
            .map_err(|e| Error::Input(format!("bad fingerprint {s:?}: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Input(format!("fingerprint {s:?} is not 32 bytes")))?;
        Ok(Self(arr))
    }
}

impl fmt::Debug for ModelFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ModelFingerprint({})", self.to_hex())
    }
}

impl fmt::Display for ModelFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// An autoregressive model over a fixed vocabulary.
///
/// Implementations must be deterministic: the same context gives a
/// bitwise-identical logit vector for the lifetime of the process.
pub trait LanguageModel: Send + Sync {
    fn vocab(&self) -> &Vocab;

    fn fingerprint(&self) -> ModelFingerprint;

    /// Logits for the token following `context`.
    fn next_logits(&self, context: &[TokenId]) -> Result<LogitVector>;
}

impl<M: LanguageModel + ?Sized> LanguageModel for Arc<M> {
    fn vocab(&self) -> &Vocab {
        (**self).vocab()
    }
    fn fingerprint(&self) -> ModelFingerprint {
        (**self).fingerprint()
    }
    fn next_logits(&self, context: &[TokenId]) -> Result<LogitVector> {
        (**self).next_logits(context)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for Box<M> {
    fn vocab(&self) -> &Vocab {
        (**self).vocab()
    }
    fn fingerprint(&self) -> ModelFingerprint {
        (**self).fingerprint()
    }
    fn next_logits(&self, context: &[TokenId]) -> Result<LogitVector> {
        (**self).next_logits(context)
    }
}

pub(crate) fn check_context(vocab: &Vocab, context: &[TokenId]) -> Result<()> {
    if context.is_empty() {
        return Err(Error::Domain("context must not be empty".into()));
    }
    if let Some(&bad) = context.iter().find(|&&t| t as usize >= vocab.size()) {
        return Err(Error::Domain(format!(
            "token id {bad} out of range for vocabulary of size {}",
            vocab.size()
        )));
    }
    Ok(())
}

/// Probabilities from logits, with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> TokenId {
    let mut best = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if i == 0 || v > best_val {
            best = i;
            best_val = v;
        }
    }
    best as TokenId
}

/// Gumbel-Max selection: `argmax_v (logits[v] + noise[v])`, lowest id on ties.
pub fn gumbel_argmax(logits: &[f64], noise: &[f64]) -> TokenId {
    assert_eq!(logits.len(), noise.len(), "logits and noise lengths differ");
    argmax(logits.iter().zip(noise).map(|(l, g)| l + g))
}

/// A toy model as stored on disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ToyModel {
    Ngram(NGramModel),
    Conditioned(ConditionedModel),
}

impl ToyModel {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("cannot parse model file {}: {e}", path.display()))
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        serde_json::to_writer(&mut f, self)?;
        Ok(())
    }

    pub fn into_shared(self) -> Arc<dyn LanguageModel> {
        match self {
            ToyModel::Ngram(m) => Arc::new(m),
            ToyModel::Conditioned(m) => Arc::new(m),
        }
    }

    pub fn vocab(&self) -> &Vocab {
        match self {
            ToyModel::Ngram(m) => m.vocab(),
            ToyModel::Conditioned(m) => m.vocab(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_fixed_values() {
        // exp(1), exp(0), exp(-1) normalized
        let p = softmax(&[1.0, 0.0, -1.0]);
        let z = 1f64.exp() + 1.0 + (-1f64).exp();
        let want = [1f64.exp() / z, 1.0 / z, (-1f64).exp() / z];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p[0] - 0.6652).abs() < 1e-4);
        assert!((p[1] - 0.2447).abs() < 1e-4);
        assert!((p[2] - 0.0900).abs() < 1e-4);
        let u = softmax(&[2.5, 2.5, 2.5]);
        assert!(u.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(&[1000.0, 999.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(gumbel_argmax(&[1.0, 0.0, -1.0], &[0.0; 3]), 0);
        assert_eq!(gumbel_argmax(&[0.0, 0.0], &[0.0, 0.0]), 0);
        assert_eq!(gumbel_argmax(&[0.0, 1.0, 1.0], &[0.0; 3]), 1);
        assert_eq!(argmax([f64::NEG_INFINITY, f64::NEG_INFINITY]), 0);
    }

    #[test]
    fn vocab_validation() {
        assert!(Vocab::new(vec![Symbol::Bos, Symbol::Eos], 0, 0).is_err());
        assert!(Vocab::new(vec![Symbol::Bos, Symbol::Eos], 0, 2).is_err());
        assert!(Vocab::new(vec![Symbol::Eos, Symbol::Bos], 0, 1).is_err());
        assert!(Vocab::new(
            vec![Symbol::Bos, Symbol::Eos, Symbol::Byte(1), Symbol::Byte(1)],
            0,
            1
        )
        .is_err());
        let v = Vocab::opaque(10, 3, 4).unwrap();
        assert_eq!(v.size(), 10);
        assert!(Vocab::opaque(4, 3, 4).is_err());
    }

    #[test]
    fn encode_decode_text() {
        let mut symbols = vec![Symbol::Bos, Symbol::Eos];
        symbols.extend(b"ab<>".iter().map(|&b| Symbol::Byte(b)));
        symbols.push(Symbol::Control("z1".into()));
        let v = Vocab::new(symbols, 0, 1).unwrap();
        let toks = v.encode("<z1>ab<a><bos>").unwrap();
        // `<a>` names no control token, so it stays three byte tokens
        assert_eq!(toks, vec![6, 2, 3, 4, 2, 5, 0]);
        assert_eq!(v.decode(&toks), "ab<a>");
    }

    #[test]
    fn encode_unknown_byte_errors() {
        let v = Vocab::from_bytes(b"ab".iter().copied());
        assert!(matches!(v.encode("abc"), Err(Error::Input(_))));
        let toks = v.encode("ba<eos>").unwrap();
        assert_eq!(toks, vec![3, 2, 1]);
        assert_eq!(v.decode(&toks), "ba");
    }

    #[test]
    fn fingerprint_hex_round_trip() {
        let fp = ModelFingerprint([7u8; 32]);
        assert_eq!(ModelFingerprint::from_hex(&fp.to_hex()).unwrap(), fp);
        assert!(ModelFingerprint::from_hex("abcd").is_err());
    }
}

//! Comparison decoders: fresh-noise sampling, greedy, and reference-token
//! logit bias.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::gumbel::{gumbel_from_uniform, UniformStream};
use crate::hindsight::{DecodeParams, Decoded};
use crate::model::{argmax, LanguageModel, TokenId};

/// Stream stage shared by fresh-noise sampling and vocabulary bias, so that
/// a zero bias reproduces plain sampling draw for draw.
pub const STAGE_DECODE: &str = "decode";

/// Shared autoregressive loop: `pick` turns each step's logits into a token.
fn decode_with<M, F>(model: &M, prompt: &[TokenId], max_len: usize, mut pick: F) -> Result<Decoded>
where
    M: LanguageModel + ?Sized,
    F: FnMut(&[f64]) -> TokenId,
{
    if max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    let v = model.vocab().size();
    let eos = model.vocab().eos();
    let mut context = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len {
        let logits = model.next_logits(&context)?;
        if logits.len() != v || logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Model(format!(
                "step {}: model returned invalid logits",
                out.len()
            )));
        }
        let tok = pick(&logits);
        out.push(tok);
        context.push(tok);
        if tok == eos {
            break;
        }
    }
    let truncated = out.last() != Some(&eos);
    Ok(Decoded {
        tokens: out,
        truncated,
    })
}

/// Ancestral sampling via Gumbel-Max over `logits / temperature`.
pub fn sample_decode<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    temperature: f64,
    params: &DecodeParams,
    stream: &mut UniformStream,
) -> Result<Decoded> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    decode_with(model, prompt, params.max_len, |logits| {
        argmax(
            logits
                .iter()
                .map(|l| l / temperature + gumbel_from_uniform(stream.next_uniform())),
        )
    })
}

/// Unperturbed argmax at every step, lowest id on ties.
pub fn greedy_decode<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    params: &DecodeParams,
) -> Result<Decoded> {
    decode_with(model, prompt, params.max_len, |logits| {
        argmax(logits.iter().copied())
    })
}

/// Bias toward the tokens of a reference.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabBiasParams {
    pub alpha: f64,
    pub reference_tokens: BTreeSet<TokenId>,
}

impl VocabBiasParams {
    /// The bias set is every distinct token of `reference`, eos included
    /// when the reference carries it.
    pub fn new(alpha: f64, reference: &[TokenId]) -> Self {
        Self {
            alpha,
            reference_tokens: reference.iter().copied().collect(),
        }
    }
}

/// Add `alpha` to the logits of every reference token, then sample with
/// fresh Gumbel noise at temperature 1.
pub fn vocab_bias_decode<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    reference: &[TokenId],
    alpha: f64,
    params: &DecodeParams,
    stream: &mut UniformStream,
) -> Result<Decoded> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!(
            "alpha must be finite and non-negative, got {alpha}"
        )));
    }
    let bias = VocabBiasParams::new(alpha, reference);
    let mut biased = vec![0.0; model.vocab().size()];
    for &t in &bias.reference_tokens {
        if let Some(b) = biased.get_mut(t as usize) {
            *b = alpha;
        }
    }
    decode_with(model, prompt, params.max_len, |logits| {
        argmax(
            logits
                .iter()
                .zip(&biased)
                .map(|(l, b)| (l + b) + gumbel_from_uniform(stream.next_uniform())),
        )
    })
}

//! Noise recovery and beta-scaled replay.
//!
//! [`recover_noise`] walks a reference sequence under teacher forcing. At each
//! step the reference token's noise is drawn from a Gumbel truncated below at
//! `max_logit - logit[y]`, which fixes the winning perturbed logit (the
//! ceiling). Every other token's noise is then drawn truncated above at
//! `ceiling - logit[v]`, so the reference token is the strict argmax.
//!
//! [`replay`] decodes under another prompt with `logit[v] + beta * noise[v]`
//! for the recovered steps and plain Gumbel-Max past the end of the trace.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gumbel::{
    derive_stream, gumbel_from_uniform, lower_truncated_from_uniform,
    upper_truncated_from_uniform, UniformStream,
};
use crate::model::{argmax, LanguageModel, ModelFingerprint, TokenId};

pub const STAGE_RECOVER: &str = "recover";
pub const STAGE_REPLAY_CONTINUATION: &str = "replay-cont";

/// Where a trace's randomness came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceProvenance {
    pub global_seed: u64,
    pub record_id: String,
}

/// Recovered noise for a reference: `steps × vocab_size` values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseTrace {
    pub vocab_size: usize,
    pub reference: Vec<TokenId>,
    pub noise: Vec<f64>,
    pub model_fingerprint: ModelFingerprint,
    pub provenance: Option<TraceProvenance>,
}

impl NoiseTrace {
    pub fn num_steps(&self) -> usize {
        self.reference.len()
    }

    pub fn step(&self, t: usize) -> &[f64] {
        &self.noise[t * self.vocab_size..(t + 1) * self.vocab_size]
    }

    /// Bitwise equality, including the sign of zero and NaN payloads.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.vocab_size == other.vocab_size
            && self.reference == other.reference
            && self.model_fingerprint == other.model_fingerprint
            && self.provenance == other.provenance
            && self.noise.len() == other.noise.len()
            && self
                .noise
                .iter()
                .zip(&other.noise)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub beta: f64,
    pub max_len: usize,
    /// Whether prompts carry the reference text. Consumed by prompt
    /// construction in the harness; the decoders themselves ignore it.
    pub include_reference_in_prompt: bool,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            beta: 1.0,
            max_len: 512,
            include_reference_in_prompt: false,
        }
    }
}

/// A decoded token sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    /// Generation stopped at `max_len` without emitting eos.
    pub truncated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    BetaHindsight,
    VocabBias,
    Sample,
    Greedy,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::BetaHindsight => "beta-hindsight",
            Method::VocabBias => "vocab-bias",
            Method::Sample => "sample",
            Method::Greedy => "greedy",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "beta-hindsight" => Method::BetaHindsight,
            "vocab-bias" => Method::VocabBias,
            "sample" => Method::Sample,
            "greedy" => Method::Greedy,
            other => return Err(Error::Config(format!("unknown method {other:?}"))),
        })
    }
}

/// One counterfactual generation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub method: Method,
    /// beta, alpha or temperature depending on `method`; 0 for greedy.
    pub param: f64,
    pub seed: u64,
    pub prompt: Vec<TokenId>,
    pub intervened_prompt: Vec<TokenId>,
    pub reference: Vec<TokenId>,
    pub output: Vec<TokenId>,
    pub truncated: bool,
}

/// Seed material for the streams of one record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordSeeds {
    pub global_seed: u64,
    pub record_id: String,
}

impl RecordSeeds {
    pub fn new(global_seed: u64, record_id: impl Into<String>) -> Self {
        Self {
            global_seed,
            record_id: record_id.into(),
        }
    }

    pub fn stream(&self, stage: &str) -> UniformStream {
        derive_stream(self.global_seed, &self.record_id, stage, 0)
    }
}

fn check_logits(logits: &[f64], vocab_size: usize, step: usize) -> Result<()> {
    if logits.len() != vocab_size {
        return Err(Error::Model(format!(
            "step {step}: expected {vocab_size} logits, got {}",
            logits.len()
        )));
    }
    if let Some(v) = logits.iter().position(|l| !l.is_finite()) {
        return Err(Error::Model(format!(
            "step {step}: logit for token {v} is {}",
            logits[v]
        )));
    }
    Ok(())
}

/// Noise for one step that makes `target` the strict Gumbel-Max winner.
///
/// Consumes exactly `logits.len()` uniforms: the target first, then every
/// other token in ascending id order.
pub fn recover_step(logits: &[f64], target: TokenId, stream: &mut UniformStream) -> Vec<f64> {
    let y = target as usize;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut noise = vec![0.0; logits.len()];
    noise[y] = lower_truncated_from_uniform(max - logits[y], stream.next_uniform());
    let ceiling = logits[y] + noise[y];
    for v in (0..logits.len()).filter(|&v| v != y) {
        let mut g = upper_truncated_from_uniform(ceiling - logits[v], stream.next_uniform());
        // Rounding in `logits[v] + g` can reach the ceiling even though
        // g < ceiling - logits[v] holds; step g down until the sum is strictly below.
        let ulp = (ceiling.abs() * f64::EPSILON).max(f64::MIN_POSITIVE);
        while logits[v] + g >= ceiling {
            g -= (logits[v] + g - ceiling) + ulp;
        }
        noise[v] = g;
    }
    noise
}

/// Recover the noise that makes `model` emit `reference` after `prompt`.
pub fn recover_noise<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    reference: &[TokenId],
    stream: &mut UniformStream,
) -> Result<NoiseTrace> {
    let vocab = model.vocab();
    let v = vocab.size();
    if reference.last() != Some(&vocab.eos()) {
        return Err(Error::Input(
            "reference must be non-empty and end with eos".into(),
        ));
    }
    if let Some(&bad) = reference.iter().find(|&&t| t as usize >= v) {
        return Err(Error::Input(format!(
            "reference token {bad} out of range for vocabulary of size {v}"
        )));
    }
    let mut context = prompt.to_vec();
    let mut noise = Vec::with_capacity(reference.len() * v);
    for (t, &y) in reference.iter().enumerate() {
        let logits = model.next_logits(&context)?;
        check_logits(&logits, v, t)?;
        noise.extend(recover_step(&logits, y, stream));
        context.push(y);
    }
    Ok(NoiseTrace {
        vocab_size: v,
        reference: reference.to_vec(),
        noise,
        model_fingerprint: model.fingerprint(),
        provenance: None,
    })
}

/// Decode under `intervened_prompt`, steering with the recovered noise.
///
/// Steps within the trace pick `argmax(logit + beta * noise)`; later steps use
/// fresh, unscaled standard Gumbel noise drawn from `stream` (one uniform per
/// vocabulary entry per step).
pub fn replay<M: LanguageModel + ?Sized>(
    model: &M,
    intervened_prompt: &[TokenId],
    trace: &NoiseTrace,
    params: &DecodeParams,
    stream: &mut UniformStream,
) -> Result<Decoded> {
    let fp = model.fingerprint();
    if trace.model_fingerprint != fp {
        return Err(Error::FingerprintMismatch {
            trace: trace.model_fingerprint.to_hex(),
            model: fp.to_hex(),
        });
    }
    let vocab = model.vocab();
    let v = vocab.size();
    if trace.vocab_size != v {
        return Err(Error::Input(format!(
            "trace has vocabulary size {}, model has {v}",
            trace.vocab_size
        )));
    }
    if !(params.beta >= 0.0 && params.beta.is_finite()) {
        return Err(Error::Config(format!(
            "beta must be finite and non-negative, got {}",
            params.beta
        )));
    }
    if params.max_len < trace.num_steps() {
        return Err(Error::Config(format!(
            "max_len {} is shorter than the {}-token reference",
            params.max_len,
            trace.num_steps()
        )));
    }
    let eos = vocab.eos();
    let mut context = intervened_prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < params.max_len {
        let t = out.len();
        let logits = model.next_logits(&context)?;
        check_logits(&logits, v, t)?;
        let tok = if t < trace.num_steps() {
            let g = trace.step(t);
            argmax(logits.iter().zip(g).map(|(l, n)| l + params.beta * n))
        } else {
            argmax(
                logits
                    .iter()
                    .map(|l| l + gumbel_from_uniform(stream.next_uniform())),
            )
        };
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

/// Recover noise for `reference` under `prompt`, then replay it under
/// `intervened_prompt`. Recovery and continuation draw from separately
/// derived streams.
pub fn beta_hindsight<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    reference: &[TokenId],
    intervened_prompt: &[TokenId],
    params: &DecodeParams,
    seeds: &RecordSeeds,
) -> Result<GenerationRecord> {
    let mut recover_stream = seeds.stream(STAGE_RECOVER);
    let mut trace = recover_noise(model, prompt, reference, &mut recover_stream)?;
    trace.provenance = Some(TraceProvenance {
        global_seed: seeds.global_seed,
        record_id: seeds.record_id.clone(),
    });
    let mut cont = seeds.stream(STAGE_REPLAY_CONTINUATION);
    let out = replay(model, intervened_prompt, &trace, params, &mut cont)?;
    Ok(GenerationRecord {
        id: seeds.record_id.clone(),
        method: Method::BetaHindsight,
        param: params.beta,
        seed: seeds.global_seed,
        prompt: prompt.to_vec(),
        intervened_prompt: intervened_prompt.to_vec(),
        reference: reference.to_vec(),
        output: out.tokens,
        truncated: out.truncated,
    })
}

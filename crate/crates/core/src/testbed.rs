//! A synthetic ordinal task with a known scoring rule.
//!
//! Texts are lowercase letter strings. Letters `a..=m` form the high-register
//! group H and `n..=z` the low-register group L. Class `c` text draws each
//! letter from H with probability `class_mix[c]`, so the fraction of H letters
//! tracks the class. The rule scorer thresholds that fraction, and a
//! control-token-conditioned n-gram model plays the role of a score-conditioned
//! generator.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::sample_decode;
use crate::error::{Error, Result};
use crate::gumbel::{derive_stream, UniformStream};
use crate::harness::dataset::{load_dataset, save_dataset, DatasetRecord};
use crate::hindsight::DecodeParams;
use crate::metrics::OrdinalScore;
use crate::model::{ConditionedModel, LanguageModel, NGramModel, Symbol, TokenId, ToyModel, Vocab};

pub const CRITERION: &str = "register";

const GROUP_SIZE: u8 = 13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestbedSpec {
    pub k: u32,
    /// Probability of drawing from H, per class, strictly ascending.
    pub class_mix: Vec<f64>,
    /// `k - 1` strictly ascending cut points on the H fraction.
    pub thresholds: Vec<f64>,
    pub mean_len: f64,
    /// Training characters generated per class.
    pub corpus_chars: usize,
    pub order: usize,
    pub smoothing: f64,
    pub seed: u64,
    /// Number of transition records in the bundled dataset.
    pub transitions_cap: usize,
    /// Longest reference accepted into the dataset.
    pub max_ref_len: usize,
}

impl Default for TestbedSpec {
    fn default() -> Self {
        Self {
            k: 4,
            class_mix: vec![0.2, 0.4, 0.6, 0.8],
            thresholds: vec![0.3, 0.5, 0.7],
            mean_len: 60.0,
            corpus_chars: 20_000,
            order: 3,
            smoothing: 0.1,
            seed: 0,
            transitions_cap: 240,
            max_ref_len: 240,
        }
    }
}

fn strictly_ascending(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

impl TestbedSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if self.class_mix.len() != self.k as usize {
            return bad(format!("class_mix needs {} entries", self.k));
        }
        if !strictly_ascending(&self.class_mix) || self.class_mix.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("class_mix must be strictly ascending within [0, 1]".into());
        }
        Thresholds::new(self.thresholds.clone())?;
        if self.thresholds.len() != self.k as usize - 1 {
            return bad(format!("thresholds needs {} entries", self.k - 1));
        }
        if !(self.mean_len >= 1.0 && self.mean_len.is_finite()) {
            return bad(format!("mean_len must be at least 1, got {}", self.mean_len));
        }
        if self.corpus_chars == 0 || self.order == 0 || self.max_ref_len == 0 {
            return bad("corpus_chars, order and max_ref_len must be positive".into());
        }
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            return bad(format!("smoothing must be positive, got {}", self.smoothing));
        }
        Ok(())
    }
}

/// Ascending cut points; a text scores `1 + #{cuts strictly below f}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ThresholdsRepr", into = "ThresholdsRepr")]
pub struct Thresholds {
    cuts: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ThresholdsRepr {
    thresholds: Vec<f64>,
}

impl TryFrom<ThresholdsRepr> for Thresholds {
    type Error = Error;
    fn try_from(r: ThresholdsRepr) -> Result<Self> {
        Thresholds::new(r.thresholds)
    }
}

impl From<Thresholds> for ThresholdsRepr {
    fn from(t: Thresholds) -> Self {
        ThresholdsRepr { thresholds: t.cuts }
    }
}

impl Thresholds {
    pub fn new(cuts: Vec<f64>) -> Result<Self> {
        if cuts.is_empty() || !strictly_ascending(&cuts) || cuts.iter().any(|c| !(*c > 0.0 && *c < 1.0)) {
            return Err(Error::Config(format!(
                "thresholds must be non-empty, strictly ascending and inside (0, 1): {cuts:?}"
            )));
        }
        Ok(Self { cuts })
    }

    pub fn cuts(&self) -> &[f64] {
        &self.cuts
    }

    /// Number of score classes.
    pub fn k(&self) -> u32 {
        self.cuts.len() as u32 + 1
    }
}

/// Fraction of ASCII letters that fall in `a..=m` (case-insensitive), or
/// `None` when the text has no letters.
pub fn high_register_fraction(text: &str) -> Option<f64> {
    let (mut letters, mut high) = (0usize, 0usize);
    for b in text.bytes().filter(u8::is_ascii_alphabetic) {
        letters += 1;
        if b.to_ascii_lowercase() <= b'm' {
            high += 1;
        }
    }
    (letters > 0).then(|| high as f64 / letters as f64)
}

/// Deterministic rubric: 1 plus the number of thresholds the H fraction
/// strictly exceeds. Texts without letters score 1.
pub fn rule_score(text: &str, thresholds: &Thresholds) -> OrdinalScore {
    let passed = high_register_fraction(text)
        .map_or(0, |f| thresholds.cuts.iter().filter(|&&c| f > c).count());
    OrdinalScore::new(passed as u32 + 1, thresholds.k()).expect("score within scale")
}

pub fn control_name(class: u32) -> String {
    format!("z{class}")
}

/// `<zN>` as written in prompt text.
pub fn control_text(class: u32) -> String {
    format!("<{}>", control_name(class))
}

/// bos, eos, `a..=z`, then one control token per class.
pub fn testbed_vocab(k: u32) -> Vocab {
    let mut symbols = vec![Symbol::Bos, Symbol::Eos];
    symbols.extend((b'a'..=b'z').map(Symbol::Byte));
    symbols.extend((1..=k).map(|c| Symbol::Control(control_name(c))));
    Vocab::new(symbols, 0, 1).expect("testbed vocabulary is well formed")
}

/// Built testbed: conditioned model, scorer, and transition dataset.
#[derive(Clone, Debug)]
pub struct TestbedBundle {
    pub spec: TestbedSpec,
    pub model: ConditionedModel,
    pub thresholds: Thresholds,
    pub dataset: Vec<DatasetRecord>,
}

fn generate_document(mix: f64, mean_len: f64, vocab: &Vocab, s: &mut UniformStream) -> Vec<TokenId> {
    // geometric length on 1.. with the given mean
    let stop = 1.0 / mean_len;
    let len = if stop >= 1.0 {
        1
    } else {
        1 + (s.next_uniform().ln() / (1.0 - stop).ln()).floor() as usize
    };
    (0..len)
        .map(|_| {
            let high = s.next_uniform() < mix;
            let offset = ((s.next_uniform() * GROUP_SIZE as f64) as u8).min(GROUP_SIZE - 1);
            let letter = if high { b'a' + offset } else { b'n' + offset };
            vocab.byte_id(letter).unwrap()
        })
        .collect()
}

/// Generate the per-class corpora and train the conditioned model, then draw
/// the transition dataset.
pub fn build_testbed(spec: &TestbedSpec) -> Result<TestbedBundle> {
    spec.validate()?;
    let vocab = testbed_vocab(spec.k);
    let mut tables = Vec::with_capacity(spec.k as usize);
    for (c, &mix) in spec.class_mix.iter().enumerate() {
        let mut s = derive_stream(spec.seed, "testbed", "corpus", c as u64);
        let mut docs = Vec::new();
        let mut chars = 0;
        while chars < spec.corpus_chars {
            let doc = generate_document(mix, spec.mean_len, &vocab, &mut s);
            chars += doc.len();
            docs.push(doc);
        }
        tables.push(NGramModel::train_tokens(vocab.clone(), &docs, spec.order, spec.smoothing)?);
    }
    let controls = (1..=spec.k)
        .map(|c| vocab.control_id(&control_name(c)).unwrap())
        .collect();
    let model = ConditionedModel::new(vocab, controls, tables)?;
    let thresholds = Thresholds::new(spec.thresholds.clone())?;
    let mut stream = derive_stream(spec.seed, "testbed", "dataset", 0);
    let dataset = build_transition_dataset(
        &model,
        &thresholds,
        spec.transitions_cap,
        spec.max_ref_len,
        &mut stream,
    )?;
    Ok(TestbedBundle {
        spec: spec.clone(),
        model,
        thresholds,
        dataset,
    })
}

/// Sample one text from the class-`class` model; `None` if it was cut off
/// at `max_len` or produced a token that is not a letter.
pub fn sample_class_text(
    model: &ConditionedModel,
    class: u32,
    max_len: usize,
    stream: &mut UniformStream,
) -> Result<Option<String>> {
    let vocab = model.vocab();
    let prompt = [model.controls()[class as usize - 1], vocab.bos()];
    let params = DecodeParams {
        beta: 0.0,
        max_len,
        include_reference_in_prompt: false,
    };
    let out = sample_decode(model, &prompt, 1.0, &params, stream)?;
    let body = &out.tokens[..out.tokens.len().saturating_sub(1)];
    if out.truncated || body.is_empty() || !body.iter().all(|&t| vocab.is_byte(t)) {
        return Ok(None);
    }
    Ok(Some(vocab.decode(body)))
}

/// Records covering every ordered score transition `(z, z')`, `z != z'`,
/// as evenly as `cap` allows. Each reference is drawn from the class-`z`
/// model and kept only if the rule scorer agrees it is class `z`.
pub fn build_transition_dataset(
    model: &ConditionedModel,
    thresholds: &Thresholds,
    cap: usize,
    max_ref_len: usize,
    stream: &mut UniformStream,
) -> Result<Vec<DatasetRecord>> {
    let k = thresholds.k();
    if model.controls().len() != k as usize {
        return Err(Error::Config(format!(
            "model has {} classes, scorer has {k}",
            model.controls().len()
        )));
    }
    let transitions: Vec<(u32, u32)> = (1..=k)
        .flat_map(|z| (1..=k).filter(move |&t| t != z).map(move |t| (z, t)))
        .collect();
    let base = cap / transitions.len();
    let extra = cap % transitions.len();
    let counts: Vec<usize> = (0..transitions.len())
        .map(|i| base + usize::from(i < extra))
        .collect();

    let mut references: Vec<Vec<String>> = Vec::with_capacity(k as usize);
    for z in 1..=k {
        let needed: usize = transitions
            .iter()
            .zip(&counts)
            .filter(|((src, _), _)| *src == z)
            .map(|(_, &n)| n)
            .sum();
        let mut found = Vec::with_capacity(needed);
        let mut attempts = 0;
        while found.len() < needed && attempts < 10 * needed {
            attempts += 1;
            if let Some(text) = sample_class_text(model, z, max_ref_len, stream)? {
                if rule_score(&text, thresholds).value() == z {
                    found.push(text);
                }
            }
        }
        if found.len() < needed {
            return Err(Error::Config(format!(
                "class {z}: only {} of {needed} references scored as class {z} after {attempts} draws",
                found.len()
            )));
        }
        references.push(found);
    }

    let mut used = vec![0usize; k as usize];
    let mut records = Vec::with_capacity(cap);
    for (&(z, t), &n) in transitions.iter().zip(&counts) {
        for j in 0..n {
            let slot = &mut used[z as usize - 1];
            let reference = references[z as usize - 1][*slot].clone();
            *slot += 1;
            records.push(DatasetRecord {
                id: format!("z{z}-to-z{t}-{j:03}"),
                prompt: control_text(z),
                reference,
                intervened_prompt: control_text(t),
                source: Some(z),
                target: Some(t),
                criterion: Some(CRITERION.to_string()),
            });
        }
    }
    Ok(records)
}

pub const MODEL_FILE: &str = "model.json";
pub const SCORER_FILE: &str = "scorer.json";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const SPEC_FILE: &str = "testbed.json";

impl TestbedBundle {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        ToyModel::Conditioned(self.model.clone()).save(dir.join(MODEL_FILE))?;
        fs::write(dir.join(SCORER_FILE), serde_json::to_vec_pretty(&self.thresholds)?)?;
        fs::write(dir.join(SPEC_FILE), serde_json::to_vec_pretty(&self.spec)?)?;
        save_dataset(dir.join(DATASET_FILE), &self.dataset)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let model = match ToyModel::load(dir.join(MODEL_FILE))? {
            ToyModel::Conditioned(m) => m,
            ToyModel::Ngram(_) => {
                return Err(Error::Config(format!(
                    "{} holds a plain n-gram, expected a conditioned model",
                    dir.join(MODEL_FILE).display()
                )))
            }
        };
        let thresholds: Thresholds =
            serde_json::from_slice(&fs::read(dir.join(SCORER_FILE))?)?;
        let spec: TestbedSpec = serde_json::from_slice(&fs::read(dir.join(SPEC_FILE))?)?;
        let dataset = load_dataset(dir.join(DATASET_FILE))?;
        Ok(Self {
            spec,
            model,
            thresholds,
            dataset,
        })
    }
}

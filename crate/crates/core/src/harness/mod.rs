//! Experiment plumbing: configuration, model sources, dataset and trace
//! files, sweeps, and the logit server.

pub mod dataset;
pub mod server;
pub mod sweep;
pub mod trace;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hindsight::Method;
use crate::model::remote::DEFAULT_TIMEOUT;
use crate::model::{Endpoint, LanguageModel, RemoteModel, TokenId, ToyModel, Vocab};
use crate::testbed::{TestbedBundle, Thresholds, MODEL_FILE, SCORER_FILE};

pub use dataset::{load_dataset, save_dataset, DatasetRecord};
pub use sweep::{run_sweep, ResultsRow, ResultsTable};
pub use trace::{read_trace, write_trace};

/// Where logits come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSource {
    /// A toy model JSON file.
    Toy(PathBuf),
    /// A testbed bundle directory (model plus rule scorer).
    Testbed(PathBuf),
    /// A logit server. `vocab` optionally names a toy model file or testbed
    /// directory whose symbol table (and scorer) should be used for text.
    Remote {
        endpoint: Endpoint,
        #[serde(default)]
        vocab: Option<PathBuf>,
    },
}

impl FromStr for ModelSource {
    type Err = Error;

    /// `toy:PATH`, `testbed:DIR`, `tcp:HOST:PORT` or `cmd:PROGRAM ARGS`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(p) = s.strip_prefix("toy:") {
            Ok(ModelSource::Toy(p.into()))
        } else if let Some(p) = s.strip_prefix("testbed:") {
            Ok(ModelSource::Testbed(p.into()))
        } else if s.starts_with("tcp:") || s.starts_with("cmd:") {
            Ok(ModelSource::Remote {
                endpoint: s.parse()?,
                vocab: None,
            })
        } else {
            Err(Error::Config(format!(
                "model source {s:?} must start with toy:, testbed:, tcp: or cmd:"
            )))
        }
    }
}

impl fmt::Display for ModelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSource::Toy(p) => write!(f, "toy:{}", p.display()),
            ModelSource::Testbed(p) => write!(f, "testbed:{}", p.display()),
            ModelSource::Remote { endpoint, .. } => write!(f, "{endpoint}"),
        }
    }
}

impl ModelSource {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            ModelSource::Toy(p) | ModelSource::Testbed(p) => fix(p),
            ModelSource::Remote { vocab, .. } => {
                if let Some(p) = vocab {
                    fix(p)
                }
            }
        }
    }
}

/// Symbol table and optional scorer stored at `path` (toy file or testbed dir).
fn load_vocab_and_scorer(path: &Path) -> Result<(Vocab, Option<Thresholds>)> {
    if path.is_dir() {
        let model = ToyModel::load(path.join(MODEL_FILE))?;
        let scorer = load_scorer(&path.join(SCORER_FILE))?;
        Ok((model.vocab().clone(), Some(scorer)))
    } else {
        Ok((ToyModel::load(path)?.vocab().clone(), None))
    }
}

pub fn load_scorer(path: &Path) -> Result<Thresholds> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("cannot parse scorer {}: {e}", path.display())))
}

/// An opened model source. In-process models are shared; remote sources
/// open one connection per [`ModelProvider::connect`] call.
pub struct ModelProvider {
    source: ModelSource,
    shared: Option<Arc<dyn LanguageModel>>,
    vocab: Vocab,
    scorer: Option<Thresholds>,
    remote_vocab: Option<Vocab>,
    timeout: Duration,
}

impl ModelProvider {
    pub fn open(source: &ModelSource) -> Result<Self> {
        Self::open_with_timeout(source, DEFAULT_TIMEOUT)
    }

    pub fn open_with_timeout(source: &ModelSource, timeout: Duration) -> Result<Self> {
        match source {
            ModelSource::Toy(path) => {
                let model = ToyModel::load(path)?.into_shared();
                Ok(Self::in_process(source.clone(), model, None))
            }
            ModelSource::Testbed(dir) => {
                let bundle = TestbedBundle::load(dir)?;
                let model: Arc<dyn LanguageModel> = Arc::new(bundle.model);
                Ok(Self::in_process(source.clone(), model, Some(bundle.thresholds)))
            }
            ModelSource::Remote { endpoint, vocab } => {
                let (local_vocab, scorer) = match vocab {
                    Some(p) => {
                        let (v, s) = load_vocab_and_scorer(p)?;
                        (Some(v), s)
                    }
                    None => (None, None),
                };
                let probe = RemoteModel::connect(endpoint, timeout)?;
                let probe = match &local_vocab {
                    Some(v) => probe.with_vocab(v.clone())?,
                    None => probe,
                };
                Ok(Self {
                    source: source.clone(),
                    vocab: probe.vocab().clone(),
                    shared: None,
                    scorer,
                    remote_vocab: local_vocab,
                    timeout,
                })
            }
        }
    }

    /// Wrap an already constructed model.
    pub fn in_process(
        source: ModelSource,
        model: Arc<dyn LanguageModel>,
        scorer: Option<Thresholds>,
    ) -> Self {
        Self {
            source,
            vocab: model.vocab().clone(),
            shared: Some(model),
            scorer,
            remote_vocab: None,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn source(&self) -> &ModelSource {
        &self.source
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn scorer(&self) -> Option<&Thresholds> {
        self.scorer.as_ref()
    }

    pub fn set_scorer(&mut self, scorer: Option<Thresholds>) {
        self.scorer = scorer;
    }

    pub fn connect(&self) -> Result<Arc<dyn LanguageModel>> {
        if let Some(m) = &self.shared {
            return Ok(Arc::clone(m));
        }
        let ModelSource::Remote { endpoint, .. } = &self.source else {
            unreachable!("in-process sources always hold a shared model")
        };
        let remote = RemoteModel::connect(endpoint, self.timeout)?;
        let remote = match &self.remote_vocab {
            Some(v) => remote.with_vocab(v.clone())?,
            None => remote,
        };
        Ok(Arc::new(remote))
    }
}

/// Prompt tokens: the encoded prompt text, optionally the reference body,
/// then bos to open the generated continuation.
pub fn encode_prompt(vocab: &Vocab, text: &str, reference: Option<&[TokenId]>) -> Result<Vec<TokenId>> {
    let mut tokens = vocab.encode(text)?;
    if let Some(r) = reference {
        tokens.extend(r.iter().copied().filter(|&t| t != vocab.eos()));
    }
    tokens.push(vocab.bos());
    Ok(tokens)
}

/// Reference tokens, eos-terminated.
pub fn encode_reference(vocab: &Vocab, text: &str) -> Result<Vec<TokenId>> {
    let mut tokens = vocab.encode(text)?;
    if tokens.last() != Some(&vocab.eos()) {
        tokens.push(vocab.eos());
    }
    Ok(tokens)
}

/// The sweep grid used when a config omits `betas`.
pub const DEFAULT_BETAS: [f64; 6] = [0.001, 0.1, 0.2, 0.3, 0.4, 1.0];
/// The sweep grid used when a config omits `alphas`.
pub const DEFAULT_ALPHAS: [f64; 3] = [0.01, 5.0, 10.0];

fn default_betas() -> Vec<f64> {
    DEFAULT_BETAS.to_vec()
}
fn default_alphas() -> Vec<f64> {
    DEFAULT_ALPHAS.to_vec()
}
fn default_temperature() -> f64 {
    1.0
}
fn default_max_len() -> usize {
    512
}
fn default_workers() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_retries() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    pub methods: Vec<Method>,
    #[serde(default = "default_betas")]
    pub betas: Vec<f64>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// JSONL dataset; defaults to the testbed's own dataset.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub include_reference_in_prompt: bool,
    /// Record wall-clock seconds per cell. Disable for byte-reproducible CSVs.
    #[serde(default = "default_true")]
    pub timing: bool,
    /// Reconnect attempts per record after a lost remote connection.
    #[serde(default = "default_retries")]
    pub retries: usize,
    /// Scorer JSON overriding the one bundled with a testbed.
    #[serde(default)]
    pub scorer: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parse a config file; relative paths are taken relative to it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.model.resolve(base);
        for p in [&mut self.dataset, &mut self.scorer].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("config lists no methods".into()));
        }
        if self.methods.contains(&Method::BetaHindsight) && self.betas.is_empty() {
            return Err(Error::Config("beta-hindsight needs a non-empty betas list".into()));
        }
        if self.methods.contains(&Method::VocabBias) && self.alphas.is_empty() {
            return Err(Error::Config("vocab-bias needs a non-empty alphas list".into()));
        }
        if let Some(b) = self.betas.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
            return Err(Error::Config(format!("beta {b} must be finite and non-negative")));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
            return Err(Error::Config(format!("alpha {a} must be finite and non-negative")));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.max_len == 0 || self.workers == 0 {
            return Err(Error::Config("max_len and workers must be positive".into()));
        }
        if self.dataset.is_none() && !matches!(self.model, ModelSource::Testbed(_)) {
            return Err(Error::Config(
                "dataset is required unless the model is a testbed bundle".into(),
            ));
        }
        if self.betas.iter().any(|&b| b > 1.0) && self.methods.contains(&Method::BetaHindsight) {
            log::warn!("beta above 1.0 amplifies recovered noise beyond the recovered scale; expect degraded fluency");
        }
        Ok(())
    }

    /// (method, parameter) cells in run order.
    pub fn cells(&self) -> Vec<(Method, f64)> {
        let mut out = Vec::new();
        for &m in &self.methods {
            match m {
                Method::BetaHindsight => out.extend(self.betas.iter().map(|&b| (m, b))),
                Method::VocabBias => out.extend(self.alphas.iter().map(|&a| (m, a))),
                Method::Sample => out.push((m, self.temperature)),
                Method::Greedy => out.push((m, 0.0)),
            }
        }
        out
    }
}

//! Parameter sweeps over a dataset.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{encode_prompt, encode_reference, load_scorer, DatasetRecord, ExperimentConfig, ModelProvider, ModelSource};
use crate::baselines::{greedy_decode, sample_decode, vocab_bias_decode, STAGE_DECODE};
use crate::error::{Error, Result};
use crate::hindsight::{beta_hindsight, DecodeParams, Decoded, Method, RecordSeeds};
use crate::metrics::{aggregate, similarity, ScoredOutput};
use crate::model::{LanguageModel, Symbol, TokenId, Vocab};
use crate::testbed::{rule_score, Thresholds, DATASET_FILE};

pub const RESULTS_FILE: &str = "results.csv";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const CSV_HEADER: &str = "method,param,n,mean_similarity,qwk,seconds";

/// One generated output, as written to `records.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub id: String,
    pub method: Method,
    pub param: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criterion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub achieved: Option<u32>,
    pub reference: String,
    pub output: String,
    pub similarity: f64,
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Aggregates for one (method, parameter) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub method: Method,
    pub param: f64,
    /// Records that contributed: attempted minus skipped.
    pub n: usize,
    pub attempted: usize,
    pub skipped: usize,
    pub mean_similarity: Option<f64>,
    pub qwk: Option<f64>,
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultsRow>,
}

impl ResultsTable {
    pub fn row(&self, method: Method, param: f64) -> Option<&ResultsRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.param.to_bits() == param.to_bits())
    }

    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>, prec: usize| x.map_or(String::new(), |v| format!("{v:.prec$}"));
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.method,
                r.param,
                r.n,
                opt(r.mean_similarity, 6),
                opt(r.qwk, 6),
                opt(r.seconds, 3)
            )
            .unwrap();
        }
        out
    }
}

/// Everything a sweep produces.
#[derive(Clone, Debug, Default)]
pub struct SweepOutput {
    pub table: ResultsTable,
    pub outcomes: Vec<RecordOutcome>,
}

/// Generate one output for `record` with the given method and parameter.
pub fn generate(
    model: &dyn LanguageModel,
    record: &DatasetRecord,
    method: Method,
    param: f64,
    config: &ExperimentConfig,
) -> Result<(Vec<TokenId>, Decoded)> {
    let vocab = model.vocab();
    let reference = encode_reference(vocab, &record.reference)?;
    let in_prompt = config.include_reference_in_prompt.then_some(&reference[..]);
    let intervened = encode_prompt(vocab, &record.intervened_prompt, in_prompt)?;
    let params = DecodeParams {
        beta: if method == Method::BetaHindsight { param } else { 1.0 },
        max_len: config.max_len,
        include_reference_in_prompt: config.include_reference_in_prompt,
    };
    let seeds = RecordSeeds::new(config.seed, record.id.clone());
    let decoded = match method {
        Method::BetaHindsight => {
            let prompt = encode_prompt(vocab, &record.prompt, in_prompt)?;
            let g = beta_hindsight(model, &prompt, &reference, &intervened, &params, &seeds)?;
            Decoded {
                tokens: g.output,
                truncated: g.truncated,
            }
        }
        Method::Sample => sample_decode(model, &intervened, param, &params, &mut seeds.stream(STAGE_DECODE))?,
        Method::VocabBias => vocab_bias_decode(
            model,
            &intervened,
            &reference,
            param,
            &params,
            &mut seeds.stream(STAGE_DECODE),
        )?,
        Method::Greedy => greedy_decode(model, &intervened, &params)?,
    };
    Ok((reference, decoded))
}

fn is_connection_error(e: &Error) -> bool {
    matches!(e, Error::Connection(_) | Error::Io(_))
}

/// Per-worker model handles, indexed by rayon thread.
struct Connections<'a> {
    provider: &'a ModelProvider,
    slots: Vec<Mutex<Option<Arc<dyn LanguageModel>>>>,
}

impl<'a> Connections<'a> {
    fn new(provider: &'a ModelProvider, workers: usize) -> Self {
        Self {
            provider,
            slots: (0..workers).map(|_| Mutex::new(None)).collect(),
        }
    }

    fn slot(&self) -> &Mutex<Option<Arc<dyn LanguageModel>>> {
        let i = rayon::current_thread_index().unwrap_or(0) % self.slots.len();
        &self.slots[i]
    }

    fn get(&self) -> Result<Arc<dyn LanguageModel>> {
        let mut slot = self.slot().lock().unwrap();
        if let Some(m) = slot.as_ref() {
            return Ok(Arc::clone(m));
        }
        let m = self.provider.connect()?;
        *slot = Some(Arc::clone(&m));
        Ok(m)
    }

    fn drop_current(&self) {
        self.slot().lock().unwrap().take();
    }
}

fn run_record(
    conns: &Connections<'_>,
    vocab: &Vocab,
    scorer: Option<&Thresholds>,
    record: &DatasetRecord,
    method: Method,
    param: f64,
    config: &ExperimentConfig,
) -> Result<RecordOutcome> {
    let mut attempt = 0;
    let result = loop {
        let model = match conns.get() {
            Ok(m) => m,
            Err(e) if is_connection_error(&e) && attempt < config.retries => {
                attempt += 1;
                log::warn!("record {}: connect failed ({e}); retry {attempt}", record.id);
                continue;
            }
            Err(e) => return Err(e),
        };
        match generate(model.as_ref(), record, method, param, config) {
            Err(e) if is_connection_error(&e) => {
                conns.drop_current();
                if attempt >= config.retries {
                    return Err(e);
                }
                attempt += 1;
                log::warn!("record {}: connection lost ({e}); retry {attempt}", record.id);
            }
            other => break other,
        }
    };
    let mut outcome = RecordOutcome {
        id: record.id.clone(),
        method,
        param,
        criterion: record.criterion.clone(),
        source: record.source,
        target: record.target,
        achieved: None,
        reference: record.reference.clone(),
        output: String::new(),
        similarity: 0.0,
        truncated: false,
        error: None,
    };
    match result {
        Ok((reference, decoded)) => {
            let reference_text = vocab.decode(&reference);
            let output = vocab.decode(&decoded.tokens);
            outcome.similarity = similarity(&reference_text, &output);
            outcome.achieved = scorer.map(|t| rule_score(&output, t).value());
            outcome.reference = reference_text;
            outcome.output = output;
            outcome.truncated = decoded.truncated;
        }
        Err(e) => {
            log::warn!("record {} ({method} {param}) skipped: {e}", record.id);
            outcome.error = Some(e.to_string());
        }
    }
    Ok(outcome)
}

/// Run every configured cell over `records`.
pub fn sweep_records(
    provider: &ModelProvider,
    records: &[DatasetRecord],
    config: &ExperimentConfig,
) -> Result<SweepOutput> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let conns = Connections::new(provider, config.workers);
    let vocab = provider.vocab();
    let scorer = provider.scorer();
    let k = scorer.map_or(2, Thresholds::k);
    let mut out = SweepOutput::default();
    for (method, param) in config.cells() {
        log::info!("running {method} {param} over {} records", records.len());
        let start = Instant::now();
        let outcomes: Vec<RecordOutcome> = pool.install(|| {
            records
                .par_iter()
                .map(|r| run_record(&conns, vocab, scorer, r, method, param, config))
                .collect::<Result<_>>()
        })?;
        let seconds = start.elapsed().as_secs_f64();
        let ok: Vec<ScoredOutput> = outcomes
            .iter()
            .filter(|o| o.error.is_none())
            .map(|o| ScoredOutput {
                reference: o.reference.clone(),
                output: o.output.clone(),
                criterion: o.criterion.clone(),
                target: o.target,
                achieved: o.achieved,
            })
            .collect();
        let report = aggregate(&ok, k, scorer.is_some())?;
        let skipped = outcomes.len() - report.n;
        out.table.rows.push(ResultsRow {
            method,
            param,
            n: report.n,
            attempted: outcomes.len(),
            skipped,
            mean_similarity: (report.n > 0).then_some(report.mean_similarity),
            qwk: report.qwk,
            seconds: config.timing.then_some(seconds),
        });
        out.outcomes.extend(outcomes);
    }
    Ok(out)
}

pub fn write_outputs(dir: &Path, output: &SweepOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESULTS_FILE), output.table.to_csv())?;
    let mut w = BufWriter::new(fs::File::create(dir.join(RECORDS_FILE))?);
    for o in &output.outcomes {
        serde_json::to_writer(&mut w, o)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Open the configured model and dataset, run the sweep, and write
/// `results.csv` and `records.jsonl` into the output directory.
pub fn run_sweep(config: &ExperimentConfig) -> Result<ResultsTable> {
    config.validate()?;
    let mut provider = ModelProvider::open(&config.model)?;
    if provider.vocab().symbols().iter().all(|s| matches!(s, Symbol::Opaque | Symbol::Bos | Symbol::Eos)) {
        return Err(Error::Config(format!(
            "model {} has no symbol table for text; give the remote source a \"vocab\" (toy model file or testbed directory)",
            config.model
        )));
    }
    if let Some(p) = &config.scorer {
        provider.set_scorer(Some(load_scorer(p)?));
    }
    let dataset_path = match (&config.dataset, &config.model) {
        (Some(p), _) => p.clone(),
        (None, ModelSource::Testbed(dir)) => dir.join(DATASET_FILE),
        (None, _) => unreachable!("validate requires a dataset"),
    };
    let records = super::load_dataset(&dataset_path)?;
    let output = sweep_records(&provider, &records, config)?;
    write_outputs(&config.output_dir, &output)?;
    Ok(output.table)
}

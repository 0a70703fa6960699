use std::fs;
use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cfdecode::baselines::{greedy_decode, sample_decode, vocab_bias_decode, STAGE_DECODE};
use cfdecode::harness::server::{bind, serve_listener, serve_stdio};
use cfdecode::harness::{
    encode_prompt, encode_reference, read_trace, run_sweep, write_trace, ExperimentConfig, ModelProvider,
    ModelSource,
};
use cfdecode::hindsight::{
    recover_noise, replay, DecodeParams, Decoded, Method, RecordSeeds, TraceProvenance, STAGE_RECOVER,
    STAGE_REPLAY_CONTINUATION,
};
use cfdecode::metrics::{aggregate, ScoredOutput};
use cfdecode::model::{LanguageModel, NGramModel, ToyModel};
use cfdecode::testbed::{build_testbed, TestbedSpec};
use cfdecode::{Error, Result};

#[derive(Parser)]
#[command(name = "cfdecode", version, about = "Counterfactual decoding with recovered Gumbel noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a byte-level n-gram model on a text corpus (one document per line).
    TrainToy {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 3)]
        order: usize,
        #[arg(long, default_value_t = 0.1)]
        smoothing: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the synthetic register testbed into a directory.
    MakeTestbed {
        #[arg(long)]
        out: PathBuf,
        /// JSON testbed settings; unspecified fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recover the noise trace that reproduces a reference.
    Recover {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        reference: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a stored trace under an intervened prompt.
    Replay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        intervened: String,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
    },
    /// Recover and replay in one step.
    Cf {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        reference: String,
        #[arg(long)]
        intervened: String,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
    },
    /// Generate with a comparison decoder.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// sample, greedy or vocab-bias
        #[arg(long)]
        method: Method,
        #[arg(long)]
        intervened: String,
        /// Required for vocab-bias.
        #[arg(long)]
        reference: Option<String>,
        /// Temperature for sample, alpha for vocab-bias.
        #[arg(long, default_value_t = 1.0)]
        param: f64,
    },
    /// Aggregate scored outputs (JSONL with reference, output, and optional
    /// criterion/target/achieved).
    Evaluate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        k: u32,
        /// Skip records without scores instead of dropping QWK.
        #[arg(long)]
        require_scores: bool,
    },
    /// Run a configured sweep and write results.csv and records.jsonl.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Serve a model over the logit protocol.
    ServeLogits {
        /// toy:PATH or testbed:DIR
        #[arg(long)]
        model: ModelSource,
        /// Address to listen on, for example 127.0.0.1:7070.
        #[arg(long, conflicts_with = "stdio", required_unless_present = "stdio")]
        listen: Option<String>,
        #[arg(long)]
        stdio: bool,
    },
}

#[derive(Args)]
struct Common {
    /// toy:PATH, testbed:DIR, tcp:HOST:PORT or cmd:PROGRAM ARGS
    #[arg(long)]
    model: ModelSource,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "cli")]
    record_id: String,
    #[arg(long, default_value_t = 512)]
    max_len: usize,
    /// Append the reference to prompts before the opening bos.
    #[arg(long)]
    include_reference: bool,
}

impl Common {
    fn open(&self) -> Result<std::sync::Arc<dyn LanguageModel>> {
        ModelProvider::open(&self.model)?.connect()
    }

    fn seeds(&self) -> RecordSeeds {
        RecordSeeds::new(self.seed, self.record_id.clone())
    }

    fn params(&self, beta: f64) -> DecodeParams {
        DecodeParams {
            beta,
            max_len: self.max_len,
            include_reference_in_prompt: self.include_reference,
        }
    }
}

fn print_decoded(model: &dyn LanguageModel, d: &Decoded) -> Result<()> {
    let line = json!({
        "output": model.vocab().decode(&d.tokens),
        "tokens": d.tokens,
        "truncated": d.truncated,
    });
    println!("{line}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainToy {
            corpus,
            order,
            smoothing,
            out,
        } => {
            let text = fs::read_to_string(&corpus)?;
            let model = NGramModel::train(&text, order, smoothing)?;
            let fp = model.fingerprint();
            ToyModel::Ngram(model).save(&out)?;
            println!("{fp}");
        }
        Command::MakeTestbed { out, spec, seed } => {
            let mut spec: TestbedSpec = match spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p)?)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                None => TestbedSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let bundle = build_testbed(&spec)?;
            bundle.save(&out)?;
            println!(
                "{} records, model {}",
                bundle.dataset.len(),
                bundle.model.fingerprint()
            );
        }
        Command::Recover {
            common,
            prompt,
            reference,
            out,
        } => {
            let model = common.open()?;
            let vocab = model.vocab();
            let reference = encode_reference(vocab, &reference)?;
            let in_prompt = common.include_reference.then_some(&reference[..]);
            let prompt = encode_prompt(vocab, &prompt, in_prompt)?;
            let seeds = common.seeds();
            let mut trace = recover_noise(model.as_ref(), &prompt, &reference, &mut seeds.stream(STAGE_RECOVER))?;
            trace.provenance = Some(TraceProvenance {
                global_seed: seeds.global_seed,
                record_id: seeds.record_id,
            });
            write_trace(&trace, &out)?;
            println!("{} steps x {} tokens -> {}", trace.num_steps(), trace.vocab_size, out.display());
        }
        Command::Replay {
            common,
            trace,
            intervened,
            beta,
        } => {
            let model = common.open()?;
            let trace = read_trace(&trace)?;
            let seeds = match &trace.provenance {
                Some(p) => RecordSeeds::new(p.global_seed, p.record_id.clone()),
                None => common.seeds(),
            };
            let vocab = model.vocab();
            let reference_body = common.include_reference.then_some(&trace.reference[..]);
            let intervened = encode_prompt(vocab, &intervened, reference_body)?;
            let d = replay(
                model.as_ref(),
                &intervened,
                &trace,
                &common.params(beta),
                &mut seeds.stream(STAGE_REPLAY_CONTINUATION),
            )?;
            print_decoded(model.as_ref(), &d)?;
        }
        Command::Cf {
            common,
            prompt,
            reference,
            intervened,
            beta,
        } => {
            let model = common.open()?;
            let vocab = model.vocab();
            let reference = encode_reference(vocab, &reference)?;
            let in_prompt = common.include_reference.then_some(&reference[..]);
            let prompt = encode_prompt(vocab, &prompt, in_prompt)?;
            let intervened = encode_prompt(vocab, &intervened, in_prompt)?;
            let g = cfdecode::hindsight::beta_hindsight(
                model.as_ref(),
                &prompt,
                &reference,
                &intervened,
                &common.params(beta),
                &common.seeds(),
            )?;
            print_decoded(
                model.as_ref(),
                &Decoded {
                    tokens: g.output,
                    truncated: g.truncated,
                },
            )?;
        }
        Command::Baseline {
            common,
            method,
            intervened,
            reference,
            param,
        } => {
            let model = common.open()?;
            let vocab = model.vocab();
            let reference = reference.map(|r| encode_reference(vocab, &r)).transpose()?;
            let in_prompt = if common.include_reference { reference.as_deref() } else { None };
            let prompt = encode_prompt(vocab, &intervened, in_prompt)?;
            let params = common.params(1.0);
            let mut stream = common.seeds().stream(STAGE_DECODE);
            let d = match method {
                Method::Sample => sample_decode(model.as_ref(), &prompt, param, &params, &mut stream)?,
                Method::Greedy => greedy_decode(model.as_ref(), &prompt, &params)?,
                Method::VocabBias => {
                    let r = reference
                        .as_deref()
                        .ok_or_else(|| Error::Config("vocab-bias needs --reference".into()))?;
                    vocab_bias_decode(model.as_ref(), &prompt, r, param, &params, &mut stream)?
                }
                Method::BetaHindsight => {
                    return Err(Error::Config("use `cf` for beta-hindsight".into()));
                }
            };
            print_decoded(model.as_ref(), &d)?;
        }
        Command::Evaluate {
            input,
            k,
            require_scores,
        } => {
            let file = io::BufReader::new(fs::File::open(&input)?);
            let mut records = Vec::new();
            for (i, line) in file.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: ScoredOutput = serde_json::from_str(&line).map_err(|e| Error::Dataset {
                    path: input.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                records.push(r);
            }
            let report = aggregate(&records, k, require_scores)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Sweep { config, workers } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let table = run_sweep(&cfg)?;
            io::stdout().write_all(table.to_csv().as_bytes())?;
        }
        Command::ServeLogits { model, listen, stdio } => {
            if matches!(model, ModelSource::Remote { .. }) {
                return Err(Error::Config("serve-logits needs a toy: or testbed: model".into()));
            }
            let model = ModelProvider::open(&model)?.connect()?;
            if stdio {
                serve_stdio(model.as_ref())?;
            } else {
                let (listener, addr) = bind(listen.expect("clap enforces --listen"))?;
                eprintln!("listening on {addr}");
                serve_listener(model, listener)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

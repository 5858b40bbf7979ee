use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use colosla_core::canonical::sha256_hex;
use colosla_core::docio::{PiiConfig, RawDocument, SanitizedDocument};
use colosla_core::labeler::{LabeledDataset, Split};
use colosla_core::model::{evaluate, load_checkpoint};
use colosla_core::stream::{verify_lines, ChainStatus, Contract, StreamConfig};
use colosla_core::telemetry::write_csv;

use crate::config::ServiceConfig;
use crate::error::CliError;
use crate::pipeline::{self, BackendChoice, SimParams, TrainFile};

#[derive(Debug, Parser)]
#[command(name = "colosla", version, about = "SLA compliance engine for colocation telemetry")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a contract and scrub PII into a sanitized document.
    Ingest {
        file: PathBuf,
        /// PII dictionary and patterns (TOML).
        #[arg(long)]
        pii: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Extract rules from a sanitized document.
    Extract {
        document: PathBuf,
        #[arg(long, value_enum, default_value_t = BackendChoice::Deterministic)]
        backend: BackendChoice,
        /// Write rules as JSON lines here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the reasoning trace (JSON lines).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Generate synthetic telemetry with scheduled violation episodes.
    Simulate {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        racks: usize,
        #[arg(long, default_value_t = 6.0)]
        days: f64,
        #[arg(long, default_value_t = 8.0)]
        slot_hours: f64,
        #[arg(long)]
        rules: Option<PathBuf>,
        /// CSV output; the digest is printed either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Window and label telemetry against the rules.
    Label {
        telemetry: PathBuf,
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the per-customer model.
    Train {
        /// `default` or a TOML file with [simulation], [model] and [train] tables.
        #[arg(long, default_value = "default")]
        config: String,
        /// Labeled dataset; simulated from the config when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long, default_value = "Customer_A")]
        customer: String,
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
        /// Evaluation report (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Stream telemetry through the inference engine.
    Infer {
        telemetry: PathBuf,
        /// Checkpoint path, or `stub` for the rule-persistence predictor.
        #[arg(long, default_value = "stub")]
        model: String,
        #[arg(long)]
        rules: Option<PathBuf>,
        /// CUSTOMER=MRC_USD, repeatable.
        #[arg(long = "contract", value_parser = parse_contract)]
        contracts: Vec<Contract>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Verify an audit chain file.
    VerifyChain { file: PathBuf },
    /// Evaluate a checkpoint on a labeled dataset.
    Report {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// train, validation, test or all
        #[arg(long, default_value = "all")]
        split: String,
    },
}

fn parse_contract(s: &str) -> Result<Contract, String> {
    let (customer, mrc) = s.split_once('=').ok_or("expected CUSTOMER=MRC_USD")?;
    let mrc_usd: f64 = mrc.parse().map_err(|_| format!("bad MRC {mrc:?}"))?;
    Ok(Contract { customer: customer.to_string(), mrc_usd, billing_period: String::new() })
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("COLOSLA_LOG").unwrap_or_else(|_| "warn".into()))
        .try_init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.one_line());
            ExitCode::FAILURE
        }
    }
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Ingest { file, pii, out_dir } => {
            let pii = match pii {
                Some(p) => PiiConfig::load(&p)?,
                None => PiiConfig::default(),
            };
            let raw = RawDocument::from_file(&file)?;
            let (doc, path) = pipeline::ingest(&raw, &pii, &out_dir)?;
            println!("{} sections={} tables={} redactions={} customer={}", path.display(), doc.sections.len(), doc.tables.len(), doc.redaction_count, doc.customer_alias);
        }
        Command::Extract { document, backend, out, trace } => {
            let doc = SanitizedDocument::read(&document)?;
            let result = pipeline::extract(&doc, backend)?;
            let x = match &result {
                Ok(x) | Err(x) => x,
            };
            if let Some(path) = trace {
                let mut buf = Vec::new();
                x.write_trace(&mut buf).map_err(CliError::io(&path))?;
                pipeline::write_file(&path, &buf)?;
            }
            let text = pipeline::rules_jsonl(&x.rules)?;
            match &out {
                Some(path) => pipeline::write_file(path, text.as_bytes())?,
                None => print!("{text}"),
            }
            if let Err(x) = result {
                return Err(CliError::Incomplete(x.open_questions));
            }
        }
        Command::Simulate { seed, racks, days, slot_hours, rules, out } => {
            let rules = pipeline::load_rules(rules.as_deref())?;
            let params = SimParams { seed, racks, days, slot_hours, ..SimParams::default() };
            let points = params.run(&rules)?;
            let mut csv = Vec::new();
            write_csv(&points, &mut csv)?;
            if let Some(path) = &out {
                pipeline::write_file(path, &csv)?;
            }
            println!("points={} sha256={}", points.len(), sha256_hex(&csv));
        }
        Command::Label { telemetry, rules, out } => {
            let rules = pipeline::load_rules(rules.as_deref())?;
            let ds = pipeline::label(&pipeline::read_telemetry(&telemetry)?, &rules)?;
            ds.write(&out)?;
            let bytes = std::fs::read(&out).map_err(CliError::io(&out))?;
            println!("windows={} labels={} sha256={}", ds.len(), serde_json::to_string(&ds.label_counts())?, sha256_hex(&bytes));
        }
        Command::Train { config, dataset, rules, customer, out, report } => {
            let file = TrainFile::load(&config)?;
            let rules = pipeline::load_rules(rules.as_deref())?;
            let ds = match dataset {
                Some(p) => LabeledDataset::read(&p)?,
                None => pipeline::label(&file.simulation.run(&rules)?, &rules)?,
            };
            let (model, rep) = pipeline::train_model(&ds, &rules, &customer, &file)?;
            pipeline::save_model(&model, &out)?;
            println!("param_count={}", model.param_count());
            println!("windows={} epochs={}", ds.len(), rep.train_loss_history.len());
            if let (Some(first), Some(last)) = (rep.train_loss_history.first(), rep.train_loss_history.last()) {
                println!("train_loss first={first:.6} final={last:.6}");
            }
            if let Some(v) = rep.validation_loss_history.last() {
                println!("validation_loss final={v:.6}");
            }
            for r in &rep.rules {
                println!("{} macro_f1={:.4} forecast_mu={:.4} forecast_sd={:.4}", r.rule_id, r.macro_f1, r.forecast_error_mean, r.forecast_error_std);
            }
            if let Some(path) = report {
                pipeline::write_file(&path, serde_json::to_string_pretty(&rep)?.as_bytes())?;
            }
            println!("checkpoint={}", out.display());
        }
        Command::Serve { config } => {
            let cfg = ServiceConfig::load(config.as_deref())?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Config(e.to_string()))?;
            rt.block_on(crate::service::serve(cfg))?;
        }
        Command::Infer { telemetry, model, rules, contracts, out_dir } => {
            let rules = pipeline::load_rules(rules.as_deref())?;
            let contracts: BTreeMap<String, Contract> = contracts.into_iter().map(|c| (c.customer.clone(), c)).collect();
            let points = pipeline::read_telemetry(&telemetry)?;
            let out = pipeline::infer(&points, &rules, &model, &contracts, StreamConfig::default())?;
            pipeline::write_jsonl(&out_dir.join("events.jsonl"), &out.events)?;
            let audit: Vec<String> = out.audit.iter().map(|r| r.to_line()).collect();
            pipeline::write_file(&out_dir.join("audit.jsonl"), (audit.join("\n") + if audit.is_empty() { "" } else { "\n" }).as_bytes())?;
            pipeline::write_jsonl(&out_dir.join("finance.jsonl"), &out.finance)?;
            pipeline::write_jsonl(&out_dir.join("ops.jsonl"), &out.ops)?;
            let mut levels = [0usize; 3];
            for e in &out.events {
                levels[e.level.index()] += 1;
            }
            let credit: f64 = out.finance.iter().map(|f| f.expected_credit_usd).sum();
            println!("events={} none={} l1={} l2={} expected_credit_usd={credit:.2} out={}", out.events.len(), levels[0], levels[1], levels[2], out_dir.display());
        }
        Command::VerifyChain { file } => {
            let bytes = std::fs::read(&file).map_err(CliError::io(&file))?;
            match verify_lines(&bytes) {
                ChainStatus::Ok { records } => println!("ok records={records}"),
                ChainStatus::Broken { index, reason } => return Err(CliError::ChainBroken { index, reason }),
            }
        }
        Command::Report { model, dataset, split } => {
            let model = load_checkpoint(&model)?;
            let ds = LabeledDataset::read(&dataset)?;
            let wanted = match split.as_str() {
                "all" => None,
                "train" => Some(Split::Train),
                "validation" => Some(Split::Validation),
                "test" => Some(Split::Test),
                other => return Err(CliError::Invalid(format!("unknown split {other}"))),
            };
            let rep = evaluate(&model, ds.examples.iter().filter(|e| wanted.is_none_or(|s| e.split == s)))?;
            println!("{}", serde_json::to_string_pretty(&rep)?);
        }
    }
    Ok(())
}


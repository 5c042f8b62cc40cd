//! `dualattn` command line: corpus generation, the two training stages,
//! decoding, scoring, FLOPs reports and attention traces.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dualattn::biasing::{write_trace_csv, BiasMode};
use dualattn::checkpoint;
use dualattn::datagen::{generate_corpus, read_jsonl, write_jsonl, Utterance};
use dualattn::evalkit::{self, MetricsReport};
use dualattn::experiment::{attention_focus, decode_all, decode_utterance, score, ExperimentConfig};
use dualattn::model::Model;
use dualattn::runtime::{param_count, DecodeOptions, FlopsReport};
use dualattn::training::{finetune_biasing, pretrain};
use dualattn::Error;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "dualattn", version, about = "Bifocal transducer with dual-attention catalog biasing")]
struct Cli {
    /// JSON run config; omitted keys take their defaults, unknown keys are errors.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seeds the corpus, model initialisation and both training stages.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Projection size of the small (wake-word) attention.
    #[arg(long, global = true)]
    lambda: Option<usize>,
    /// pretrained-base | single-attn-base | single-attn-catalog-mask | dual-attn
    #[arg(long, global = true)]
    mode: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Writes train, held-out and pretraining corpora as JSONL.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the bifocal transducer without biasing.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the biasing layers on top of a frozen pretrained transducer.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decodes a JSONL corpus and writes hypotheses plus a metrics report.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Decode with the biasing layers removed.
        #[arg(long)]
        ablate: bool,
    },
    /// Relative deltas of a candidate metrics report over a baseline.
    Eval {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic per-frame attention cost and parameter counts.
    Flops {
        #[arg(long, default_value_t = 6)]
        n_ww: usize,
        #[arg(long, default_value_t = 300)]
        n_pn: usize,
        #[arg(long, default_value_t = 1)]
        leadin_frames: usize,
        #[arg(long, default_value_t = 1)]
        postww_frames: usize,
    },
    /// Attention weights per frame for one utterance (CSV), or wake-word
    /// focus statistics over a whole corpus (JSON) when `--id` is omitted.
    AttnTrace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure classes, each with its own exit status.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Config(String),
    MissingFile(String),
    Checkpoint(String),
    Divergence(String),
    Runtime(String),
}

impl Failure {
    fn parts(&self) -> (&'static str, u8, &str) {
        match self {
            Failure::Usage(m) => ("usage", 2, m),
            Failure::Config(m) => ("config", 3, m),
            Failure::MissingFile(m) => ("missing_file", 4, m),
            Failure::Checkpoint(m) => ("checkpoint", 5, m),
            Failure::Divergence(m) => ("divergence", 6, m),
            Failure::Runtime(m) => ("runtime", 1, m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Config(_) | Error::Manifest(_) => Failure::Config(m),
            Error::Checkpoint(_) => Failure::Checkpoint(m),
            Error::Divergence { .. } => Failure::Divergence(m),
            Error::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => Failure::MissingFile(m),
            _ => Failure::Runtime(m),
        }
    }
}

type Res<T> = std::result::Result<T, Failure>;

fn open(path: &Path) -> Res<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Failure::MissingFile(format!("{}: not found", path.display())),
        _ => Failure::Runtime(format!("{}: {e}", path.display())),
    })
}

fn load_checkpoint(path: &Path) -> Res<Model> {
    open(path)?;
    Ok(checkpoint::load(path, None)?)
}

fn create(path: &Path) -> Res<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &Value) -> Res<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, v).map_err(|e| Failure::Runtime(e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Failure::Runtime(e.to_string()))
}

fn read_json(path: &Path) -> Res<Value> {
    serde_json::from_reader(BufReader::new(open(path)?))
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

/// Config file (if any) with command-line overrides applied.
fn resolve_config(cli: &Cli) -> Res<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => serde_json::from_reader(BufReader::new(open(p)?))
            .map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.corpus.seed = s;
        cfg.model_seed = s;
        cfg.pretrain.seed = s;
        cfg.finetune.seed = s;
    }
    if let Some(l) = cli.lambda {
        cfg.model.biasing.lambda = l;
    }
    if let Some(m) = &cli.mode {
        cfg.model.biasing.mode = BiasMode::parse(m)?;
    }
    cfg.model.validate()?;
    cfg.corpus.validate()?;
    cfg.pretrain.validate()?;
    cfg.finetune.validate()?;
    Ok(cfg)
}

fn config_json(cfg: &ExperimentConfig) -> Value {
    serde_json::to_value(cfg).expect("config serialises")
}

fn load_corpus(path: &Path) -> Res<Vec<Utterance>> {
    let mut utts = read_jsonl(BufReader::new(open(path)?))?;
    utts.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(utts)
}

fn save_jsonl(path: &Path, utts: &[Utterance]) -> Res<()> {
    let mut w = create(path)?;
    write_jsonl(utts, &mut w)?;
    w.flush().map_err(|e| Failure::Runtime(e.to_string()))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn run(cli: &Cli) -> Res<()> {
    let cfg = resolve_config(cli)?;
    match &cli.cmd {
        Cmd::GenData { out } => {
            let corpus = generate_corpus(&cfg.corpus)?;
            let pre = generate_corpus(&cfg.corpus.pretraining())?;
            save_jsonl(&out.join("train.jsonl"), &corpus.train)?;
            save_jsonl(&out.join("held_out.jsonl"), &corpus.held_out)?;
            save_jsonl(&out.join("pretrain.jsonl"), &pre.train)?;
            write_json(
                &out.join("corpus.json"),
                &json!({
                    "config": config_json(&cfg),
                    "train": corpus.train.len(),
                    "held_out": corpus.held_out.len(),
                    "pretrain": pre.train.len(),
                }),
            )
        }
        Cmd::Pretrain { data, out } => {
            let utts = load_corpus(&data.join("pretrain.jsonl"))?;
            let mut model = Model::new(&cfg.pretrain_model_config(), cfg.model_seed)?;
            let log = pretrain(&mut model, &utts, &cfg.pretrain)?;
            checkpoint::save(&model, out)?;
            write_json(&sidecar(out), &json!({ "config": config_json(&cfg), "stage": "pretrain", "log": log }))
        }
        Cmd::Finetune { data, pretrained, out } => {
            let utts = load_corpus(&data.join("train.jsonl"))?;
            let pre = load_checkpoint(pretrained)?;
            if !cfg.model.mode().has_biasing() {
                return Err(Failure::Config("fine-tuning needs a biased mode".into()));
            }
            let mut model = Model::from_pretrained(&pre, &cfg.model, cfg.model_seed)?;
            let log = finetune_biasing(&mut model, &utts, &cfg.corpus.wake_words, &cfg.finetune)?;
            checkpoint::save(&model, out)?;
            write_json(&sidecar(out), &json!({ "config": config_json(&cfg), "stage": "finetune", "log": log }))
        }
        Cmd::Decode { checkpoint: ckpt, input, out, report, ablate } => {
            let mut model = load_checkpoint(ckpt)?;
            if *ablate {
                model = model.ablated()?;
            }
            let utts = load_corpus(input)?;
            let opts = DecodeOptions { max_symbols_per_frame: cfg.max_symbols_per_frame, trace: false };
            let decoded = decode_all(&model, &utts, &cfg.corpus.wake_words, opts)?;
            let mut w = create(out)?;
            for (u, d) in utts.iter().zip(&decoded) {
                let rec = json!({
                    "id": u.id,
                    "reference": u.transcript,
                    "hypothesis": d.text,
                    "post_ww_hypothesis": d.post_ww_text,
                    "is_true_ww": u.is_true_ww,
                    "accepted": evalkit::ww_accept(&d.text, &cfg.corpus.wake_words, &cfg.corpus.fillers),
                });
                writeln!(w, "{rec}").map_err(|e| Failure::Runtime(e.to_string()))?;
            }
            w.flush().map_err(|e| Failure::Runtime(e.to_string()))?;
            let metrics = score(&utts, &decoded, &cfg.corpus.wake_words, &cfg.corpus.fillers)?;
            write_json(
                report,
                &json!({
                    "config": config_json(&cfg),
                    "model": model.config(),
                    "metrics": metrics,
                }),
            )
        }
        Cmd::Eval { baseline, candidate, out } => {
            let metrics = |v: &Value, p: &Path| -> Res<(MetricsReport, String)> {
                let m = v.get("metrics").cloned().ok_or_else(|| Failure::Config(format!("{}: no metrics field", p.display())))?;
                let m: MetricsReport = serde_json::from_value(m).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
                let name = v.pointer("/model/biasing/mode").and_then(Value::as_str).unwrap_or("model").to_string();
                let lambda = v.pointer("/model/biasing/lambda").and_then(Value::as_u64);
                let name = match (name.as_str(), lambda) {
                    ("dual-attn", Some(l)) => format!("dual-attn-{l}"),
                    _ => name,
                };
                Ok((m, name))
            };
            let (bv, cv) = (read_json(baseline)?, read_json(candidate)?);
            let (base, base_name) = metrics(&bv, baseline)?;
            let (cand, cand_name) = metrics(&cv, candidate)?;
            let rel = evalkit::relative_report(&base, &cand);
            let table = evalkit::format_table(&base_name, &[(cand_name, rel.clone())]);
            print!("{table}");
            if let Some(out) = out {
                write_json(
                    out,
                    &json!({
                        "config": config_json(&cfg),
                        "baseline": bv,
                        "candidate": cv,
                        "relative": rel,
                    }),
                )?;
            }
            Ok(())
        }
        Cmd::Flops { n_ww, n_pn, leadin_frames, postww_frames } => {
            let report = FlopsReport::new(&cfg.model, *n_ww, *n_pn, *leadin_frames, *postww_frames);
            let v = json!({
                "config": config_json(&cfg),
                "flops": report,
                "params": param_count(&cfg.model),
            });
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            Ok(())
        }
        Cmd::AttnTrace { checkpoint: ckpt, input, id, out } => {
            let model = load_checkpoint(ckpt)?;
            let Some(b) = model.biasing() else {
                return Err(Failure::Config("checkpoint has no biasing layers to trace".into()));
            };
            let utts = load_corpus(input)?;
            match id {
                Some(id) => {
                    let u = utts
                        .iter()
                        .find(|u| &u.id == id)
                        .ok_or_else(|| Failure::Runtime(format!("no utterance {id} in {}", input.display())))?;
                    let opts = DecodeOptions { max_symbols_per_frame: cfg.max_symbols_per_frame, trace: true };
                    let d = decode_utterance(&model, u, &cfg.corpus.wake_words, opts)?;
                    let cache = b.build_cache(&model.store, &u.catalog(&cfg.corpus.wake_words)?)?;
                    let trace = d.output.trace.expect("biased decode with tracing on");
                    let mut w = create(out)?;
                    write_trace_csv(&trace, &cache, &mut w)?;
                    w.flush().map_err(|e| Failure::Runtime(e.to_string()))
                }
                None => {
                    let focus = attention_focus(&model, &utts, &cfg.corpus)?;
                    write_json(
                        out,
                        &json!({
                            "config": config_json(&cfg),
                            "focus": focus,
                            "argmax_rate": focus.argmax_rate(),
                            "ww_rate": focus.ww_rate(),
                        }),
                    )
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let failure = match Cli::try_parse() {
        Ok(cli) => match run(&cli) {
            Ok(()) => return ExitCode::SUCCESS,
            Err(f) => f,
        },
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => {
            let text = e.render().to_string();
            let head: Vec<&str> = text.lines().map(str::trim).take_while(|l| !l.starts_with("Usage:")).filter(|l| !l.is_empty()).collect();
            Failure::Usage(head.join(" ").trim_start_matches("error: ").to_string())
        }
    };
    let (kind, code, msg) = failure.parts();
    eprintln!("{}", json!({ "error": kind, "exit_code": code, "message": msg }));
    ExitCode::from(code)
}

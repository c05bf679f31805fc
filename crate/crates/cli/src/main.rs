use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use emvi::config::{ForceStage, RunConfig};
use emvi::corpus::{generate_corpus, ingest_chatlog, ChatlogFormat, Corpus, GeneratorConfig};
use emvi::em::{run_pretraining, Stage};
use emvi::encoder::{load_checkpoint, read_manifest, Encoder};
use emvi::eval::{evaluate, export_metrics, MetricsRow, RankConfig};
use emvi::tensor::{DType, Real};
use emvi::{Error, Result};

#[derive(Parser)]
#[command(name = "emvi", version, about = "Latent reply-structure inference and discourse-aware pre-training")]
struct Cli {
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with known reply graphs.
    GenCorpus {
        #[arg(long, default_value_t = 2000)]
        dialogues: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        lambda: f64,
        #[arg(long, default_value_t = 8)]
        speakers: u32,
    },
    /// Convert a chat log (jsonl or tsv) into a corpus file.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the two-stage pre-training schedule.
    Pretrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Flat `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_trunks: Option<usize>,
        /// 1, 2 or auto.
        #[arg(long)]
        force_stage: Option<String>,
    },
    /// Evaluate a checkpoint on the labeled dialogues of a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        /// Evaluate only the last N labeled dialogues.
        #[arg(long)]
        last: Option<usize>,
        #[arg(long, default_value_t = 64)]
        rank_items: usize,
    },
    /// Print a checkpoint manifest.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error kind={} code={}: {message}", e.kind(), e.exit_code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenCorpus {
            dialogues,
            seed,
            out,
            lambda,
            speakers,
        } => {
            let cfg = GeneratorConfig {
                n_dialogues: dialogues,
                seed,
                lambda,
                n_speakers: speakers,
                ..GeneratorConfig::default()
            };
            cfg.validate()?;
            let corpus = generate_corpus(&cfg)?;
            corpus.write(&out)?;
            println!("wrote {} dialogues to {}", corpus.dialogues.len(), out.display());
            Ok(())
        }
        Command::Ingest { input, format, out } => {
            let fmt = ChatlogFormat::parse(&format)?;
            let corpus = ingest_chatlog(&input, fmt)?;
            corpus.write(&out)?;
            println!("wrote {} dialogues to {}", corpus.dialogues.len(), out.display());
            Ok(())
        }
        Command::Pretrain {
            corpus,
            config,
            out_dir,
            seed,
            max_trunks,
            force_stage,
        } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            cfg.apply_env(std::env::vars())?;
            if corpus.is_some() {
                cfg.corpus = corpus;
            }
            if out_dir.is_some() {
                cfg.out_dir = out_dir;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = max_trunks {
                cfg.max_trunks = m;
            }
            if let Some(f) = force_stage {
                cfg.force_stage = ForceStage::parse(&f)
                    .ok_or_else(|| Error::Config(format!("--force-stage must be 1, 2 or auto, got {f:?}")))?;
            }
            cfg.validate()?;
            let corpus_path = cfg
                .corpus
                .clone()
                .ok_or_else(|| Error::Config("no corpus given (--corpus or corpus key)".into()))?;
            let out = cfg
                .out_dir
                .clone()
                .ok_or_else(|| Error::Config("no output directory given (--out-dir or out_dir key)".into()))?;
            let corpus = Corpus::read(&corpus_path)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let snap = out.join("config.effective");
            std::fs::write(&snap, cfg.to_text()).map_err(|e| Error::io(&snap, e))?;
            match cfg.dtype {
                DType::F32 => pretrain::<f32>(&corpus, &cfg, &out),
                DType::F64 => pretrain::<f64>(&corpus, &cfg, &out),
            }
        }
        Command::Eval {
            checkpoint,
            corpus,
            metrics_out,
            last,
            rank_items,
        } => {
            let manifest = read_manifest(&checkpoint)?;
            let corpus = Corpus::read(&corpus)?;
            match manifest.dtype {
                DType::F32 => eval::<f32>(&checkpoint, &corpus, metrics_out.as_deref(), last, rank_items),
                DType::F64 => eval::<f64>(&checkpoint, &corpus, metrics_out.as_deref(), last, rank_items),
            }
        }
        Command::Inspect { checkpoint } => {
            let manifest = read_manifest(&checkpoint)?;
            let text = serde_json::to_string_pretty(&manifest)
                .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
            println!("{text}");
            Ok(())
        }
    }
}

fn pretrain<T: Real>(corpus: &Corpus, cfg: &RunConfig, out: &Path) -> Result<()> {
    let result = run_pretraining::<T>(corpus, cfg, Some(out))?;
    let metrics = cfg.metrics_out.clone().unwrap_or_else(|| out.join("metrics.csv"));
    export_metrics(&result.rows, &metrics)?;
    let summary = out.join("trunks.json");
    let text = serde_json::to_string_pretty(&result.trunks).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&summary, text + "\n").map_err(|e| Error::io(&summary, e))?;
    for t in &result.trunks {
        println!(
            "trunk={} stage={} addr_acc={} used_acc={} tv_distance={} f1_g={}",
            t.index, t.stage, t.addr_acc, t.used_acc, t.tv_distance, t.f1_g
        );
    }
    println!("cold_start_acc={}", result.cold_start_acc);
    println!("metrics={}", metrics.display());
    Ok(())
}

fn eval<T: Real>(
    checkpoint: &Path,
    corpus: &Corpus,
    metrics_out: Option<&Path>,
    last: Option<usize>,
    rank_items: usize,
) -> Result<()> {
    let (enc, manifest): (Encoder<T>, _) = load_checkpoint(checkpoint)?;
    if enc.cfg.vocab_size != corpus.vocab.size() {
        return Err(Error::Data(format!(
            "checkpoint vocabulary has {} entries, corpus has {}",
            enc.cfg.vocab_size,
            corpus.vocab.size()
        )));
    }
    let meta: &BTreeMap<String, String> = &manifest.meta;
    let stage = match meta.get("stage").map(String::as_str) {
        Some("2") => Stage::Two,
        _ => Stage::One,
    };
    let mut labeled: Vec<usize> = (0..corpus.dialogues.len())
        .filter(|&d| corpus.dialogues[d].gold_graph().is_some())
        .collect();
    if let Some(n) = last {
        labeled = labeled.split_off(labeled.len().saturating_sub(n));
    }
    let rank = RankConfig {
        items: rank_items,
        candidates: 10,
        seed: manifest.seed,
    };
    let snap = evaluate(&enc, corpus, &labeled, stage, rank)?;
    print!("{}", snap.to_lines());
    if let Some(path) = metrics_out {
        let trunk = meta.get("trunk").and_then(|t| t.parse().ok()).unwrap_or(0);
        let row = MetricsRow {
            trunk,
            iter: 0,
            stage: stage.number(),
            norm_choice: Some(snap.norm_choice.clone()),
            addr_acc: Some(snap.addr_acc),
            used_acc: Some(snap.used_acc),
            mrr: Some(snap.mrr),
            recall_at_1: Some(snap.recall_at_1),
            tv_distance: Some(snap.tv_distance),
            histogram: snap.histogram.clone(),
            ..Default::default()
        };
        export_metrics(&[row], path)?;
    }
    Ok(())
}

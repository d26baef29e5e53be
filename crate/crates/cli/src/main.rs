mod data;
mod manifest;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lsec_core::datagen::generate;
use lsec_core::eval::{evaluate, write_user_csv, DEFAULT_KS};
use lsec_core::graph_store::{Dataset, Edge, EntityKind};
use lsec_core::influence::{run_analysis, Setting};
use lsec_core::model::{load_checkpoint, save_checkpoint, EntityCounts, Model};
use lsec_core::trainer::{ablation_table, evaluate_test, fit, run_ablation};
use lsec_core::{Error, Result};
use serde_json::json;

use crate::data::{dominant_streamer, load_dataset, load_split, split_dataset, write_json, write_split_dir, SplitData};
use crate::manifest::RunManifest;

#[derive(Parser)]
#[command(name = "lsec", version, about = "Tripartite user/item/streamer recommender pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run manifest JSON; defaults apply when omitted.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Dataset or split directory, overriding the manifest.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn manifest(&self) -> Result<RunManifest> {
        let mut m = match &self.manifest {
            Some(p) => RunManifest::load(p)?,
            None => RunManifest::default(),
        };
        if let Some(d) = &self.data {
            m.data_dir = Some(d.clone());
        }
        Ok(m)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as buy/follow/sell TSV files.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Probability a purchase comes from a followed streamer's catalog.
        #[arg(long)]
        influence_strength: Option<f64>,
    },
    /// Chronologically split a dataset into train/val/test.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Streamer-influence report: purchase probabilities and pair similarities.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Settings to simulate (repeatable); defaults to the manifest's.
        #[arg(long = "setting")]
        settings: Vec<Setting>,
        #[arg(long)]
        n_mc: Option<usize>,
        #[arg(long)]
        n_pairs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Skip the pair-similarity tables.
        #[arg(long)]
        no_similarity: bool,
        /// JSON report path; the text report always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train with early stopping; writes checkpoint, history and metrics.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full-ranking metrics of a checkpoint on a held-out split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = HeldOut::Test)]
        split: HeldOut,
        /// Metrics JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-user metrics CSV.
        #[arg(long)]
        per_user: Option<PathBuf>,
    },
    /// Unified embeddings of every node with a dominant-streamer label.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the relation/task ablation grid and report mean and std.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        repeat: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum HeldOut {
    Val,
    Test,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn output_dir(flag: Option<PathBuf>, manifest: &RunManifest) -> std::result::Result<PathBuf, Failure> {
    flag.or_else(|| manifest.output_dir.clone())
        .ok_or_else(|| Failure::Usage("no output directory: pass --out or set output_dir".into()))
}

fn configure_threads() -> std::result::Result<(), Failure> {
    let Ok(raw) = std::env::var("LSEC_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("LSEC_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Generate {
            common,
            out,
            seed,
            influence_strength,
        } => {
            let mut m = common.manifest()?;
            if let Some(s) = seed {
                m.gen.seed = s;
            }
            if let Some(b) = influence_strength {
                m.gen.influence_strength = b;
            }
            m.gen.validate()?;
            let out = out
                .or_else(|| m.data_dir.clone())
                .ok_or_else(|| Failure::Usage("no output directory: pass --out or set data_dir".into()))?;
            let graph = generate(&m.gen)?;
            let ds = Dataset::synthetic(graph);
            ds.write_dir(&out)?;
            write_json(&out.join("gen.json"), &m.gen)?;
            println!(
                "users={} items={} streamers={} buys={} follows={} sells={}",
                ds.graph.n_users,
                ds.graph.n_items,
                ds.graph.n_streamers,
                ds.graph.buy.n_edges(),
                ds.graph.follow.n_edges(),
                ds.graph.sell.n_edges()
            );
        }
        Command::Split { common, out } => {
            let m = common.manifest()?;
            let out = output_dir(out, &m)?;
            let data = split_dataset(&load_dataset(&m)?, &m.split)?;
            write_split_dir(&data, &out)?;
            println!("{}", serde_json::to_string(&data.split.report).map_err(Error::from)?);
        }
        Command::Analyze {
            common,
            settings,
            n_mc,
            n_pairs,
            seed,
            no_similarity,
            out,
        } => {
            let mut m = common.manifest()?;
            let a = &mut m.analysis;
            if !settings.is_empty() {
                a.settings = settings;
            }
            if n_mc.is_some() {
                a.n_mc = n_mc;
            }
            if let Some(n) = n_pairs {
                a.n_pairs = n;
            }
            if let Some(s) = seed {
                a.seed = s;
            }
            if no_similarity {
                a.similarity = false;
            }
            let ds = load_dataset(&m)?;
            let report = run_analysis(&ds.graph, &m.analysis)?;
            emit(&report.to_text());
            if let Some(p) = out {
                write_json(&p, &report)?;
            }
        }
        Command::Train { common, seed, out } => {
            let mut m = common.manifest()?;
            if let Some(s) = seed {
                m.train.seed = s;
            }
            let out = output_dir(out, &m)?;
            m.output_dir = Some(out.clone());
            m.validate()?;
            let data = load_split(&m)?;
            fs::create_dir_all(&out).map_err(Error::from)?;
            fs::write(out.join("config.json"), m.to_json()?).map_err(Error::from)?;
            let result = fit(&m.model, &m.train, &data.split)?;
            save_checkpoint(&result.model, &out.join("checkpoint.bin"))?;
            write_json(&out.join("history.json"), &result.history)?;
            let best_val = match result.history.best_epoch {
                0 => &result.history.initial,
                e => result.history.epochs[e - 1]
                    .val
                    .as_ref()
                    .unwrap_or(&result.history.initial),
            };
            let (test, _) = evaluate_test(&result.model, &data.split)?;
            let metrics = json!({
                "best_epoch": result.history.best_epoch,
                "val": best_val,
                "test": test,
            });
            write_json(&out.join("metrics.json"), &metrics)?;
            println!(
                "best_epoch={} val_recall10={:.6} test_recall10={:.6} test_auc={:.6}",
                result.history.best_epoch,
                best_val.recall_at(10),
                test.recall_at(10),
                test.auc
            );
        }
        Command::Evaluate {
            common,
            checkpoint,
            split,
            out,
            per_user,
        } => {
            let m = common.manifest()?;
            let data = load_split(&m)?;
            let model = load_for(&checkpoint, &data)?;
            let s = &data.split;
            let pairs = |edges: &[Edge]| -> Vec<(usize, usize)> {
                edges.iter().map(|e| (e.left, e.right)).collect()
            };
            let (held, mask) = match split {
                HeldOut::Val => (pairs(&s.val), Vec::new()),
                HeldOut::Test => (pairs(&s.test), pairs(&s.val)),
            };
            let (metrics, users) = evaluate(&model, &s.train, &held, &mask, &DEFAULT_KS)?;
            let text = serde_json::to_string_pretty(&metrics).map_err(Error::from)?;
            match out {
                Some(p) => fs::write(p, text + "\n").map_err(Error::from)?,
                None => emit(&(text + "\n")),
            }
            if let Some(p) = per_user {
                let mut w = BufWriter::new(fs::File::create(p).map_err(Error::from)?);
                write_user_csv(&mut w, &users, &DEFAULT_KS, |u| {
                    data.ids.users.decode(u).unwrap_or("?").to_string()
                })?;
                w.flush().map_err(Error::from)?;
            }
        }
        Command::ExportEmbeddings {
            common,
            checkpoint,
            out,
        } => {
            let m = common.manifest()?;
            let data = load_split(&m)?;
            let model = load_for(&checkpoint, &data)?;
            export_embeddings(&model, &data, &out)?;
        }
        Command::Ablate {
            common,
            repeat,
            seed,
            out,
        } => {
            let mut m = common.manifest()?;
            if let Some(r) = repeat {
                m.repeat_count = r;
            }
            if let Some(s) = seed {
                m.train.seed = s;
            }
            let out = output_dir(out, &m)?;
            m.output_dir = Some(out.clone());
            m.validate()?;
            let data = load_split(&m)?;
            fs::create_dir_all(&out).map_err(Error::from)?;
            fs::write(out.join("config.json"), m.to_json()?).map_err(Error::from)?;
            let rows = run_ablation(&m.model, &m.train, &data.split, m.repeat_count)?;
            let table = ablation_table(&rows);
            write_json(&out.join("ablation.json"), &rows)?;
            fs::write(out.join("ablation.txt"), &table).map_err(Error::from)?;
            emit(&table);
        }
    }
    Ok(())
}

/// Stdout writes that tolerate a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn load_for(path: &Path, data: &SplitData) -> Result<Model> {
    let model = load_checkpoint(path)?;
    let counts = EntityCounts::of(&data.split.train);
    if model.counts != counts {
        return Err(Error::Index(format!(
            "checkpoint was trained on {:?} but the data has {:?}",
            model.counts, counts
        )));
    }
    Ok(model)
}

/// `kind<TAB>raw_id<TAB>v1,...,vd<TAB>label`, label being the dominant
/// streamer's raw id or `NA`. Kinds the model does not embed are skipped.
fn export_embeddings(model: &Model, data: &SplitData, path: &Path) -> Result<()> {
    let graph = &data.split.train;
    let unified = model.embed_all(graph)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    for kind in [EntityKind::User, EntityKind::Item, EntityKind::Streamer] {
        let Ok(emb) = unified.get(kind) else { continue };
        let ids = data.ids.get(kind);
        for node in 0..graph.count(kind) {
            let raw = ids
                .decode(node)
                .ok_or_else(|| Error::Index(format!("no raw id for {kind} {node}")))?;
            let values: Vec<String> = emb.row(node).iter().map(|v| format!("{v}")).collect();
            let label = dominant_streamer(graph, kind, node)
                .and_then(|s| data.ids.streamers.decode(s))
                .unwrap_or("NA");
            writeln!(w, "{}\t{raw}\t{}\t{label}", kind.name(), values.join(","))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: code=usage msg={first}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: code=usage msg={msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: code={} msg={msg}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

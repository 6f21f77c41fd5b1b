use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use graphmatch::evaluation::MultiTaskAuc;
use graphmatch::graph::{Graph, GraphDataset, Split};
use graphmatch::io::{load_dataset, load_run_config, save_dataset, RunConfig};
use graphmatch::synth::{synth_motif_benchmark, SynthCounts, SynthSizes};
use graphmatch::trainer::{
    bench_q, finetune, load_checkpoint, pretrain_cl, pretrain_sup, save_checkpoint, FinetuneModel, Mode,
};

const USAGE: u8 = 1;
const DATA: u8 = 2;
const CHECK_FAILED: u8 = 3;

/// Graph-matching pre-training for graph neural networks.
#[derive(Parser, Debug)]
#[command(name = "graphmatch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration with [train] and [model] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SupMode {
    Continuous,
    Discrete,
}

impl SupMode {
    fn mode(self) -> Mode {
        match self {
            SupMode::Continuous => Mode::SupContinuous,
            SupMode::Discrete => Mode::SupDiscrete,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Contrastive pre-training; writes a checkpoint.
    PretrainCl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Anchors per batch; overrides train.q.
        #[arg(long)]
        q: Option<usize>,
    },
    /// Supervised pre-training on graph pairs; writes a checkpoint.
    PretrainSup {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label similarity regression or per-graph task prediction.
        #[arg(long, value_enum)]
        mode: Option<SupMode>,
    },
    /// Fine-tunes on the train split and reports test ROC-AUC. Without
    /// --ckpt the encoder starts from random weights.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Metric table; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also writes the fine-tuned encoder and head.
        #[arg(long)]
        save_model: Option<PathBuf>,
    },
    /// Scores a fine-tuned model on one split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time, similarity work and peak similarity memory of one
    /// contrastive epoch for each anchor count.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        q_list: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs the gradient and property self-checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Writes pretrain.jsonl and downstream.jsonl into --out.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SynthCounts::default().pretrain)]
        pretrain: usize,
        #[arg(long, default_value_t = SynthCounts::default().train)]
        train: usize,
        #[arg(long, default_value_t = SynthCounts::default().valid)]
        valid: usize,
        #[arg(long, default_value_t = SynthCounts::default().test)]
        test: usize,
    },
}

/// A flag combination the command cannot honour.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return USAGE;
    }
    match err.downcast_ref::<graphmatch::Error>() {
        Some(graphmatch::Error::Config(_) | graphmatch::Error::Io { .. }) => USAGE,
        _ => DATA,
    }
}

fn resolve(common: &Common, mode: Mode) -> Result<RunConfig> {
    let mut run = match &common.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig::default(),
    };
    if run.train.mode != Mode::Cl && run.train.mode != mode {
        bail!(usage(format!(
            "config sets mode {:?} but the command runs {mode:?}",
            run.train.mode
        )));
    }
    run.train.mode = mode;
    if let Some(seed) = common.seed {
        run.train.seed = seed;
    }
    Ok(run)
}

fn log_config(run: &RunConfig) {
    log::info!("resolved config (seed {}):\n{}", run.train.seed, run.to_toml());
}

fn dataset(path: &Path) -> Result<GraphDataset> {
    let data = load_dataset(path)?;
    log::info!(
        "loaded {} graphs from {} (node dim {}, edge dim {})",
        data.len(),
        path.display(),
        data.node_dim(),
        data.edge_dim()
    );
    Ok(data)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn auc_table(column: &str, auc: &MultiTaskAuc) -> String {
    let mut s = format!("task\t{column}\n");
    for (t, v) in auc.per_task.iter().enumerate() {
        match v {
            Some(v) => writeln!(s, "{t}\t{v:.6}"),
            None => writeln!(s, "{t}\tNA"),
        }
        .expect("writing to a string");
    }
    writeln!(s, "mean\t{:.6}", auc.mean).expect("writing to a string");
    s
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::PretrainCl { common, data, out, q } => {
            let mut run = resolve(&common, Mode::Cl)?;
            if let Some(q) = q {
                run.train.q = q;
            }
            log_config(&run);
            let data = dataset(&data)?;
            let result = pretrain_cl(&data, &run.model, &run.train)?;
            save_checkpoint(&out, &result.checkpoint)?;
            println!("epoch\tloss\tsim_ops\tpeak_entries\tseconds");
            for e in &result.history {
                println!(
                    "{}\t{:.6}\t{}\t{}\t{:.3}",
                    e.epoch, e.mean_loss, e.sim_ops, e.peak_held_entries, e.seconds
                );
            }
            log::info!("wrote {}", out.display());
        }
        Command::PretrainSup { common, data, out, mode } => {
            let configured = match &common.config {
                Some(path) => load_run_config(path)?.train.mode,
                None => Mode::Cl,
            };
            let mode = match (mode, configured) {
                (Some(m), _) => m.mode(),
                (None, m @ (Mode::SupContinuous | Mode::SupDiscrete)) => m,
                (None, _) => bail!(usage("pretrain-sup needs --mode continuous|discrete")),
            };
            let run = resolve(&common, mode)?;
            log_config(&run);
            let data = dataset(&data)?;
            let result = pretrain_sup(&data, &run.model, &run.train)?;
            save_checkpoint(&out, &result.checkpoint)?;
            println!("epoch\tloss");
            for (i, l) in result.history.iter().enumerate() {
                println!("{}\t{l:.6}", i + 1);
            }
            log::info!("wrote {}", out.display());
        }
        Command::Finetune {
            common,
            data,
            ckpt,
            out,
            save_model,
        } => {
            let run = resolve(&common, Mode::Finetune)?;
            log_config(&run);
            let checkpoint = ckpt.as_deref().map(load_checkpoint).transpose()?;
            if checkpoint.is_none() {
                log::info!("no checkpoint given: fine-tuning from random initialization");
            }
            let data = dataset(&data)?;
            let (report, model) = finetune(checkpoint.as_ref(), &data, &run.model, &run.train)?;
            log::info!(
                "best epoch {}, validation auc {:?}, pretrained {}",
                report.best_epoch,
                report.val_auc,
                report.pretrained
            );
            if let Some(path) = save_model {
                save_checkpoint(&path, &model.to_checkpoint(report.best_epoch, run.train.seed))?;
                log::info!("wrote {}", path.display());
            }
            emit(out.as_deref(), &auc_table("test_auc", &report.test))?;
        }
        Command::Evaluate { data, ckpt, split, out } => {
            let model = FinetuneModel::from_finetuned(&load_checkpoint(&ckpt)?)?;
            let data = dataset(&data)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Valid => Split::Valid,
                SplitArg::Test => Split::Test,
            };
            let graphs: Vec<&Graph> = data.split_indices(split).into_iter().map(|i| &data.graphs()[i]).collect();
            if graphs.is_empty() {
                bail!(usage(format!("dataset has no {split:?} graphs")));
            }
            let auc = model.evaluate(&graphs)?;
            emit(out.as_deref(), &auc_table(&format!("{split:?}_auc").to_lowercase(), &auc))?;
        }
        Command::Bench {
            common,
            data,
            q_list,
            out,
        } => {
            let run = resolve(&common, Mode::Cl)?;
            log_config(&run);
            let data = dataset(&data)?;
            let rows = bench_q(&data, &run.model, &run.train, &q_list)?;
            let mut table = String::from("q\tseconds_per_epoch\tsim_op_count\tpeak_live_entries\n");
            for r in rows {
                writeln!(table, "{}\t{:.4}\t{}\t{}", r.q, r.seconds, r.sim_ops, r.peak_held_entries)
                    .expect("writing to a string");
            }
            emit(out.as_deref(), &table)?;
        }
        Command::Gradcheck { seed } => {
            let results = graphmatch::checks::run_all(seed)?;
            let mut failed = 0;
            for r in &results {
                println!("{}\t{}\t{}", if r.passed { "ok" } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            println!("{} checks, {failed} failed", results.len());
            if failed > 0 {
                return Ok(ExitCode::from(CHECK_FAILED));
            }
        }
        Command::Synth {
            seed,
            out,
            pretrain,
            train,
            valid,
            test,
        } => {
            let counts = SynthCounts {
                pretrain,
                train,
                valid,
                test,
            };
            log::info!("synth seed {seed}, {counts:?}");
            let (pre, down) = synth_motif_benchmark(seed, counts, SynthSizes::default())?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            save_dataset(&out.join("pretrain.jsonl"), &pre)?;
            save_dataset(&out.join("downstream.jsonl"), &down)?;
            println!("wrote {} pre-training and {} downstream graphs to {}", pre.len(), down.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

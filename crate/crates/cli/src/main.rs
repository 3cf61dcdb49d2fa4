mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::Failure;

#[derive(Parser)]
#[command(name = "llamba", version, about = "Distill, run, quantize and benchmark Llamba models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    AttentionToy,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    #[value(name = "1b")]
    B1,
    #[value(name = "3b")]
    B3,
    #[value(name = "8b")]
    B8,
}

#[derive(Subcommand)]
enum Command {
    /// Stream a continuation of a prompt.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_tokens: usize,
        #[arg(long, default_value_t = 0.0)]
        temp: f64,
        /// Overridden by LLAMBA_SEED.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Re-run the whole sequence in one pass and compare against the decoded logits.
        #[arg(long)]
        verify: bool,
    },
    /// Run MOHAWK stages against a teacher.
    Distill {
        /// key=value file; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// 1, 2, 3 or all.
        #[arg(long, default_value = "all")]
        stage: String,
        #[arg(long)]
        teacher: PathBuf,
        /// Checkpoint written after each stage; reports go next to it as `<stem>.stageN.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Student or checkpoint to start from instead of a fresh identity init.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Quantize every linear weight to 4 bits.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 4)]
        bits: u32,
        #[arg(long, default_value_t = llamba::quant::DEFAULT_GROUP_SIZE)]
        group: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode throughput and memory over a context × batch grid.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long, value_delimiter = ',', default_values_t = llamba::bench::DEFAULT_CONTEXTS)]
        contexts: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = llamba::bench::DEFAULT_BATCHES)]
        batches: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        decode_steps: usize,
        /// Cells whose decode state would exceed this many bytes are reported as OOM.
        #[arg(long)]
        memory_limit: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the bundled toy attention teacher on its Markov corpus.
    Teacher {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Write a freshly initialized toy-scale student.
    Init {
        #[arg(long, value_enum, default_value = "1b")]
        preset: PresetArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate {
            model,
            prompt,
            max_tokens,
            temp,
            seed,
            verify,
        } => {
            let seed = match std::env::var("LLAMBA_SEED") {
                Ok(v) => v
                    .parse()
                    .map_err(|_| Failure::input(format!("LLAMBA_SEED `{v}` is not an integer")))?,
                Err(_) => seed,
            };
            commands::generate(&model, &prompt, max_tokens, temp, seed, verify)
        }
        Command::Distill {
            config,
            stage,
            teacher,
            out,
            init,
        } => commands::distill(config.as_deref(), &stage, &teacher, &out, init.as_deref()),
        Command::Quantize {
            model,
            bits,
            group,
            out,
        } => commands::quantize(&model, bits, group, &out),
        Command::Bench {
            model,
            baseline,
            contexts,
            batches,
            decode_steps,
            memory_limit,
            threads,
            out,
        } => {
            let mut cfg = llamba::bench::BenchConfig {
                contexts,
                batches,
                decode_steps,
                memory_limit,
                ..Default::default()
            };
            if let Some(t) = threads {
                cfg.threads = t.max(1);
            }
            let with_baseline = matches!(baseline, Some(Baseline::AttentionToy));
            commands::bench(&model, with_baseline, &cfg, out.as_deref())
        }
        Command::Teacher { out, seed, steps } => commands::teacher(&out, seed, steps),
        Command::Init { preset, out, seed } => {
            let p = match preset {
                PresetArg::B1 => llamba::model::Preset::B1,
                PresetArg::B3 => llamba::model::Preset::B3,
                PresetArg::B8 => llamba::model::Preset::B8,
            };
            commands::init(p, &out, seed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use domainmix::compare::{compare_presets, load_aggregates};
use domainmix::config::{parse_seeds, ExperimentConfig, RunSpec};
use domainmix::preset::parse_presets;
use domainmix::run_experiment;
use domainmix_core::eval::evaluate;
use domainmix_core::model::{Checkpoint, ModelParams};
use domainmix_core::synthgen::{dump_csv, generate, load_csv, BenchmarkSpec};

#[derive(Parser)]
#[command(name = "domainmix", version, about = "Domain-mixing re-id experiments on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one or more presets over a list of seeds.
    Run {
        /// Experiment TOML; defaults apply to every missing key.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Preset name, a comma-separated list, or `all`.
        #[arg(long, default_value = "domainmix_unlabeled")]
        preset: String,
        /// Seeds such as `1,2,3` or `1-5`.
        #[arg(long, default_value = "1-5")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a benchmark CSV written by `gen-benchmark`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        query_fraction: f64,
        /// Write the report JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a benchmark and write it as CSV.
    GenBenchmark {
        /// Benchmark TOML, either bare keys or a `[benchmark]` section.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate aggregate.json files against the dbscan baseline.
    Compare {
        #[arg(required = true, num_args = 2..)]
        aggregates: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = real_main() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn real_main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if let Some(n) = domainmix::init_thread_pool()? {
        log::info!("using {n} worker threads");
    }
    match cli.command {
        Command::Run {
            config,
            preset,
            seeds,
            out,
        } => {
            let config = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            let presets = parse_presets(&preset)?;
            let seeds = parse_seeds(&seeds)?;
            let mut aggregates = Vec::new();
            for preset in presets {
                let spec = RunSpec {
                    config: config.clone(),
                    preset,
                    out_dir: out.clone(),
                    seeds: seeds.clone(),
                };
                aggregates.push(run_experiment(&spec).with_context(|| format!("preset {preset}"))?);
            }
            if aggregates.len() > 1 {
                print!("{}", compare_presets(&aggregates)?.to_markdown());
            } else {
                let a = &aggregates[0];
                println!("{}: median mAP {:.4}, median rank-1 {:.4}", a.preset, a.median_map, a.median_rank1);
            }
        }
        Command::Eval {
            checkpoint,
            benchmark,
            query_fraction,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let params = ModelParams::from_checkpoint(&ckpt)?;
            let bench = load_csv(&benchmark, query_fraction)?;
            if params.encoder.input_dim() != bench.d_in() {
                bail!(
                    "checkpoint expects {}-dimensional inputs, benchmark has {}",
                    params.encoder.input_dim(),
                    bench.d_in()
                );
            }
            let report = evaluate(&params.encoder, &bench.query_c, &bench.gallery_c)?;
            match out {
                Some(p) => report.write_json(&p)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
            log::info!("mAP {:.4}, rank-1 {:.4}", report.map, report.rank1());
        }
        Command::GenBenchmark { spec, seed, out } => {
            let mut bench_spec = match spec {
                Some(p) => load_benchmark_spec(&p)?,
                None => BenchmarkSpec::default(),
            };
            if let Some(s) = seed {
                bench_spec.seed = s;
            }
            let bench = generate(&bench_spec)?;
            dump_csv(&bench, &out)?;
            log::info!(
                "wrote {} samples to {}",
                bench.train_a.len() + bench.train_b.len() + bench.query_c.len() + bench.gallery_c.len(),
                out.display()
            );
        }
        Command::Compare {
            aggregates,
            format,
            out,
        } => {
            let table = compare_presets(&load_aggregates(&aggregates)?)?;
            let text = match format {
                Format::Markdown => table.to_markdown(),
                Format::Csv => table.to_csv()?,
            };
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn load_benchmark_spec(path: &PathBuf) -> anyhow::Result<BenchmarkSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let spec = match table.get("benchmark") {
        Some(section) => section.clone().try_into(),
        None => table.try_into(),
    };
    spec.with_context(|| format!("parsing {}", path.display()))
}

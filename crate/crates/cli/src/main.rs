use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use protouda::embeddings::write_embeddings;
use protouda::error::Result;
use protouda::runner::{ArtifactStatus, PipelineConfig, RunOptions, Runner};
use protouda::synth::{synth_domains, SynthConfig};

/// Prototype-based domain adaptation over precomputed embeddings.
#[derive(Parser)]
#[command(name = "protouda", version)]
struct Cli {
    /// TOML configuration; relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of every configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for clustering and distance computation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Recompute artifacts even when they exist, replacing stale ones.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Directory that sample ids resolve against for report thumbnails.
    #[arg(long, global = true)]
    image_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster both domains.
    Cluster,
    /// Select cluster prototypes and attach source labels.
    Prototypes,
    /// Compute the cluster distance matrix and the label transfer.
    Match,
    /// Classify source and target samples by nearest prototype.
    Predict,
    /// Score every seed and write eval.json.
    Evaluate,
    /// Write nearest-prototype reports for target queries.
    Report,
    /// Write a synthetic labeled (source, target) pair.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    per_class: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    shift: f64,
    #[arg(long)]
    out_src: PathBuf,
    #[arg(long)]
    out_tgt: PathBuf,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_toml_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(root) = &cli.image_root {
        cfg.image_root = Some(root.clone());
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn print_events(runner: &Runner) {
    for (path, status) in runner.events() {
        let verb = match status {
            ArtifactStatus::Computed => "computed",
            ArtifactStatus::Reused => "reused",
        };
        println!("{verb} {}", path.display());
    }
}

fn synth(args: &SynthArgs, seed: u64) -> Result<()> {
    let (source, target) = synth_domains(&SynthConfig::new(args.classes, args.per_class, args.dim, args.shift, seed))?;
    write_embeddings(&source, &args.out_src)?;
    write_embeddings(&target, &args.out_tgt)?;
    println!("wrote {} and {}", args.out_src.display(), args.out_tgt.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Synth(args) = &cli.command {
        return synth(args, cli.seed.unwrap_or(0));
    }
    let cfg = load_config(cli)?;
    let seeds = cfg.seeds.clone();
    let runner = Runner::new(
        cfg,
        RunOptions {
            threads: cli.threads,
            force: cli.force,
        },
    )?;
    let result = (|| {
        match &cli.command {
            Command::Cluster => seeds.iter().try_for_each(|&s| runner.cluster(s)),
            Command::Prototypes => seeds.iter().try_for_each(|&s| runner.prototypes(s)),
            Command::Match => seeds.iter().try_for_each(|&s| runner.match_domains(s).map(drop)),
            Command::Predict => seeds.iter().try_for_each(|&s| {
                let p = runner.predict(s)?;
                if let Some(acc) = p.target_accuracy {
                    println!("seed {s}: target accuracy {acc:.4}");
                }
                Ok(())
            }),
            Command::Evaluate => {
                let report = runner.evaluate()?;
                for pair in &report.pairs {
                    let ci = pair.ci95_halfwidth.map_or_else(String::new, |h| format!(" ± {h:.4}"));
                    println!(
                        "{} -> {} ({}): target accuracy {:.4}{ci} over seeds {:?}",
                        pair.source, pair.target, pair.metric, pair.mean, pair.seeds
                    );
                }
                Ok(())
            }
            Command::Report => runner.report(seeds[0]).map(drop),
            Command::Synth(_) => unreachable!("handled above"),
        }
    })();
    print_events(&runner);
    result
}

fn one_line(message: &str) -> String {
    message.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn fail(code: &str, message: &str, exit: u8) -> ExitCode {
    eprintln!("error[{code}]: {}", one_line(message));
    ExitCode::from(exit)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            return fail("usage", first.trim_start_matches("error: "), 2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.code(), &e.to_string(), 1),
    }
}

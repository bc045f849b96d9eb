use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tempora_core::checkpoint::Checkpoint;
use tempora_core::data::{generate_corpus, write_corpus, EventVocab};
use tempora_recipe::config::RecipeConfig;
use tempora_recipe::grid::{ablation_grid, Axis};
use tempora_recipe::report::{append_reports, read_reports, summarize};
use tempora_recipe::run::{evaluate_checkpoint, run_and_save};
use tempora_recipe::tasks::Suite;

#[derive(Parser)]
#[command(name = "tempora", version, about = "Temporal video-language recipe runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.finetune_steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RecipeConfig> {
        let base = match &self.config {
            Some(p) => RecipeConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RecipeConfig::default(),
        };
        let cfg = base.with_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clip corpus as JSON lines.
    GenData {
        #[arg(long, value_enum, default_value = "order_critical")]
        suite: Suite,
        #[arg(long, default_value_t = 128)]
        clips: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train and evaluate one configuration for each of its seeds.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a saved checkpoint on the eval split of its configuration.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a one-axis ablation grid over the configuration.
    Grid {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values; the standard grid when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Aggregate report files into a mean ± sd table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Table the summary follows, written into the header.
        #[arg(long, default_value = "-")]
        mirrors: String,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { suite, clips, seed, out } => {
            if clips == 0 {
                bail!("--clips must be positive");
            }
            let vocab = EventVocab::default_vocab();
            let corpus = generate_corpus(seed, &suite.corpus_spec(clips), &vocab)?;
            write_corpus(&out, &corpus)?;
            eprintln!("wrote {} clips to {}", corpus.len(), out.display());
        }
        Command::Train { config } => {
            let cfg = config.load()?;
            let dir = cfg.output_dir.join(&cfg.name);
            let mut reports = Vec::new();
            for &seed in &cfg.seeds {
                let out = run_and_save(&cfg, seed, &dir)?;
                println!("{}", serde_json::to_string(&out.report)?);
                eprintln!("seed {seed}: accuracy {:.3} in {:.1}s", out.report.accuracy, out.report.wall_clock_secs);
                reports.push(out.report);
            }
            print!("{}", summarize(&reports, "-").render());
        }
        Command::Eval { config, checkpoint, seed } => {
            let cfg = config.load()?;
            let ck = Checkpoint::read(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let report = evaluate_checkpoint(&cfg, seed, &ck)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Grid { config, axis, values } => {
            let cfg = config.load()?;
            let values = (!values.is_empty()).then_some(values);
            let result = ablation_grid(&cfg, axis, values.as_deref())?;
            let dir = cfg.output_dir.join(&cfg.name);
            std::fs::create_dir_all(&dir)?;
            append_reports(&dir.join(format!("grid-{axis}.jsonl")), &result.reports)?;
            let table = result.table.render();
            std::fs::write(dir.join(format!("grid-{axis}.txt")), &table)?;
            for r in &result.reports {
                println!("{}", serde_json::to_string(r)?);
            }
            print!("{table}");
        }
        Command::Report { inputs, mirrors } => {
            let mut reports = Vec::new();
            for p in &inputs {
                reports.extend(read_reports(p)?);
            }
            if reports.is_empty() {
                bail!("no reports in the given files");
            }
            print!("{}", summarize(&reports, &mirrors).render());
        }
    }
    Ok(())
}

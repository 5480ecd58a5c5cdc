use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sqlguard::config::{ConfigError, FilterOrder, PipelineConfig};
use sqlguard::corpus::SimilarityMode;
use sqlguard::pipeline::{self, PipelineError, FILTERED_PREDICTIONS_FILE, GENERATED_PREDICTIONS_FILE};
use sqlguard::reliability::ReportFormat;
use sqlguard::selftrain::PseudoCount;

#[derive(Parser)]
#[command(name = "sqlguard", version, about = "Reliability-gated text-to-SQL pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Pipeline configuration (TOML).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set filter.rho=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    database: Option<PathBuf>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate predictions for the configured questions.
    Generate,
    /// Apply entropy and execution filters to a prediction file.
    Filter {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        order: Option<FilterOrder>,
    },
    /// Build the null-augmented fine-tuning file from filtered predictions.
    Augment {
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Number of pseudo-null samples, or `all`.
        #[arg(long)]
        k: Option<PseudoCount>,
    },
    /// Score predictions against gold labels.
    Score {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        label: String,
        #[arg(long)]
        format: Option<ReportFormat>,
    },
    /// Print the serialized database schema.
    Schema,
    /// Print dataset statistics and, optionally, embedding similarity.
    Stats {
        #[arg(long, requires = "embeddings_b")]
        embeddings_a: Option<PathBuf>,
        #[arg(long, requires = "embeddings_a")]
        embeddings_b: Option<PathBuf>,
        /// Use best-match similarity instead of the all-pairs mean.
        #[arg(long)]
        nearest: bool,
    },
    /// Run generate, filter, augment and score in sequence.
    Run,
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, ConfigError> {
    let g = &cli.global;
    let mut overrides = Vec::new();
    if let Some(d) = &g.output_dir {
        overrides.push(format!("paths.output_dir={}", toml_str(d)));
    }
    if let Some(d) = &g.database {
        overrides.push(format!("paths.database={}", toml_str(d)));
    }
    if let Some(p) = g.parallelism {
        overrides.push(format!("parallelism={p}"));
    }
    match &cli.command {
        Command::Filter { rho, order, .. } => {
            if let Some(r) = rho {
                overrides.push(format!("filter.rho={r}"));
            }
            if let Some(o) = order {
                overrides.push(format!("filter.order=\"{o}\""));
            }
        }
        Command::Augment { k: Some(k), .. } => overrides.push(format!("augment.k=\"{k}\"")),
        Command::Score { format: Some(f), .. } => {
            let f = match f {
                ReportFormat::Table => "table",
                ReportFormat::Json => "json",
            };
            overrides.push(format!("score.format=\"{f}\""));
        }
        _ => {}
    }
    overrides.extend(g.overrides.iter().cloned());
    PipelineConfig::load(g.config.as_deref(), &overrides)
}

fn toml_str(p: &std::path::Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = build_config(&cli)?;
    let out = cfg.paths.output_dir.clone();
    match cli.command {
        Command::Generate => {
            let preds = pipeline::cmd_generate(&cfg)?;
            println!("wrote {} predictions to {}", preds.len(), out.join(GENERATED_PREDICTIONS_FILE).display());
        }
        Command::Filter { predictions, .. } => {
            let input = predictions.unwrap_or_else(|| out.join(GENERATED_PREDICTIONS_FILE));
            let (preds, audit) = pipeline::cmd_filter(&cfg, &input)?;
            if let Some(t) = &audit.entropy_threshold {
                println!("entropy threshold {:.6} nats (rho {}, population {})", t.value, t.calibration_rho, t.population_size);
            }
            let kept = preds.iter().filter(|p| p.decision.is_generate()).count();
            println!("{} abstentions added, {kept}/{} predictions keep SQL", audit.abstentions.len(), preds.len());
        }
        Command::Augment { predictions, .. } => {
            let input = predictions.unwrap_or_else(|| out.join(FILTERED_PREDICTIONS_FILE));
            let pseudo = pipeline::cmd_augment(&cfg, &input)?;
            println!("added {pseudo} pseudo-null samples");
        }
        Command::Score { predictions, labels, label, .. } => {
            let input = predictions.unwrap_or_else(|| out.join(FILTERED_PREDICTIONS_FILE));
            let labels = match labels {
                Some(l) => l,
                None => PipelineConfig::require("paths.labels", &cfg.paths.labels)?.to_path_buf(),
            };
            let (_, rendered) = pipeline::cmd_score(&cfg, &input, &labels, &label)?;
            print!("{rendered}");
        }
        Command::Schema => println!("{}", pipeline::cmd_schema(&cfg)?),
        Command::Stats { embeddings_a, embeddings_b, nearest } => {
            let mode = if nearest { SimilarityMode::NearestNeighbor } else { SimilarityMode::AllPairs };
            let emb = embeddings_a.as_deref().zip(embeddings_b.as_deref());
            let stats = pipeline::cmd_stats(&cfg, emb, mode)?;
            println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
        }
        Command::Run => {
            let summary = pipeline::run_all(&cfg)?;
            println!("{} predictions, {} filter abstentions", summary.predictions.len(), summary.audit.abstentions.len());
            if let Some(n) = summary.pseudo_nulls {
                println!("added {n} pseudo-null samples");
            }
            if let Some((_, rendered)) = summary.report {
                print!("{rendered}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dealbench::bandit::{RewardSpec, Schedule, ScriptedPromptEnv};
use dealbench::catalog::{catalog_to_json, load_catalog, sample_indices};
use dealbench::metrics::{emit_report, imbalance_report, MetricsOptions, MetricsReport, RpMode};
use dealbench::prompts::{Role, StrategyAction, TemplateSet};
use dealbench::runner::{
    self, ExecuteOptions, ExperimentConfig, LiveEnv, OptimizeError, OptimizeOptions, RunError,
};

#[derive(Parser)]
#[command(name = "dealbench", version, about = "Buyer/seller negotiation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Product catalog tools.
    Catalog {
        #[command(subcommand)]
        action: CatalogCmd,
    },
    /// Run the experiment matrix described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recompute metrics and reports from a run directory.
    Metrics {
        run_dir: PathBuf,
        #[arg(long)]
        reference_seller: Option<String>,
        #[arg(long, default_value = "global")]
        rp_mode: RpMode,
        /// JSON object of model -> capability score to correlate against.
        #[arg(long)]
        capabilities: Option<PathBuf>,
        /// Baseline pairing for the imbalance table, as BUYER,SELLER.
        #[arg(long)]
        baseline: Option<String>,
        /// Write reports here instead of the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search the strategy prompt space with the softmax bandit.
    Optimize {
        #[arg(long, default_value_t = 500)]
        steps: u64,
        #[arg(long, default_value_t = 0.1)]
        eta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        coverage_interval: u64,
        #[arg(long, value_enum, default_value = "scripted")]
        env: EnvKind,
        /// Experiment config: catalog and, for the live env, endpoints.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Catalog for the scripted env when no config is given.
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Inspect prompt templates.
    Prompts {
        #[command(subcommand)]
        action: PromptsCmd,
    },
}

#[derive(Subcommand)]
enum CatalogCmd {
    /// Parse and check a catalog; print the normalized records with --echo.
    Validate {
        file: PathBuf,
        #[arg(long)]
        echo: bool,
    },
}

#[derive(Subcommand)]
enum PromptsCmd {
    Show {
        #[arg(long)]
        role: Role,
        /// Strategy action index (0..96); buyer role only.
        #[arg(long)]
        action: Option<usize>,
        #[arg(long)]
        templates_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvKind {
    Scripted,
    Live,
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn run_error(e: RunError) -> ExitCode {
    fail(e.exit_code() as u8, e)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Catalog {
            action: CatalogCmd::Validate { file, echo },
        } => validate_catalog(&file, echo),
        Command::Run { config } => run(&config),
        Command::Metrics {
            run_dir,
            reference_seller,
            rp_mode,
            capabilities,
            baseline,
            out,
        } => metrics(
            &run_dir,
            MetricsOptions {
                reference_seller,
                rp_mode,
            },
            capabilities.as_deref(),
            baseline.as_deref(),
            out.as_deref(),
        ),
        Command::Optimize {
            steps,
            eta,
            seed,
            coverage_interval,
            env,
            config,
            catalog,
            out,
            resume,
        } => {
            let schedule = Schedule {
                total_steps: steps,
                eta,
                coverage_interval,
                ..Schedule::default()
            };
            let opts = OptimizeOptions {
                schedule,
                reward: RewardSpec::default(),
                seed,
                out_dir: out,
                resume,
                checkpoint_every: 10,
                stop_after: None,
            };
            optimize(env, config.as_deref(), catalog.as_deref(), &opts)
        }
        Command::Prompts {
            action:
                PromptsCmd::Show {
                    role,
                    action,
                    templates_dir,
                },
        } => show_prompt(role, action, templates_dir.as_deref()),
    }
}

fn validate_catalog(file: &Path, echo: bool) -> ExitCode {
    let bytes = match fs::read(file) {
        Ok(b) => b,
        Err(e) => return fail(2, format!("{}: {e}", file.display())),
    };
    match load_catalog(&bytes) {
        Ok(products) => {
            let mut by_cat: BTreeMap<&str, usize> = BTreeMap::new();
            for p in &products {
                *by_cat.entry(p.category.as_str()).or_default() += 1;
            }
            eprintln!("{}: {} products {:?}", file.display(), products.len(), by_cat);
            if echo {
                println!("{}", serde_json::to_string_pretty(&catalog_to_json(&products)).expect("json"));
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(2, format!("{}: {e}", file.display())),
    }
}

fn run(config: &Path) -> ExitCode {
    let cfg = match ExperimentConfig::load(config) {
        Ok(c) => c,
        Err(e) => return run_error(e),
    };
    let summary = match runner::execute(&cfg, &ExecuteOptions::default()) {
        Ok(s) => s,
        Err(e) => return run_error(e),
    };
    println!(
        "run {} -> {}: {} jobs, {} completed, {} aborted ({:.2}%), {} resumed",
        summary.manifest.run_id,
        summary.run_dir.display(),
        summary.planned,
        summary.completed,
        summary.aborted,
        summary.abort_fraction * 100.0,
        summary.skipped
    );
    if summary.threshold_breached {
        eprintln!(
            "error: abort fraction {:.4} exceeds threshold {}",
            summary.abort_fraction, cfg.abort_threshold
        );
    } else if summary.report.is_none() {
        eprintln!("error: no completed negotiations");
    }
    ExitCode::from(summary.exit_code() as u8)
}

fn metrics(
    run_dir: &Path,
    opts: MetricsOptions,
    capabilities: Option<&Path>,
    baseline: Option<&str>,
    out: Option<&Path>,
) -> ExitCode {
    let deals = match runner::deal_records(run_dir) {
        Ok(d) => d,
        Err(e) => return run_error(e),
    };
    let mut report = MetricsReport::build(&deals, &opts);
    if let Some(path) = capabilities {
        let scores: BTreeMap<String, f64> = match fs::read_to_string(path)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
        {
            Ok(s) => s,
            Err(e) => return fail(2, format!("{}: {e}", path.display())),
        };
        report.correlate_capabilities(&scores);
    }
    if let Some(b) = baseline {
        let Some((buyer, seller)) = b.split_once(',') else {
            return fail(2, "--baseline expects BUYER,SELLER");
        };
        match imbalance_report(&deals, (buyer.trim(), seller.trim()), &[]) {
            Ok(rows) => report.imbalance = rows,
            Err(e) => return fail(4, e),
        }
    }
    let dir = out.unwrap_or(run_dir);
    if let Err(e) = fs::create_dir_all(dir)
        .map_err(|source| RunError::Io {
            path: dir.to_path_buf(),
            source,
        })
        .and_then(|_| runner::write_reports(&report, dir))
    {
        return run_error(e);
    }
    match emit_report(&report, "markdown") {
        Ok(md) => {
            print!("{md}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(1, e),
    }
}

fn optimize(
    env: EnvKind,
    config: Option<&Path>,
    catalog: Option<&Path>,
    opts: &OptimizeOptions,
) -> ExitCode {
    let cfg = match config.map(ExperimentConfig::load).transpose() {
        Ok(c) => c,
        Err(e) => return run_error(e),
    };
    let result = match env {
        EnvKind::Scripted => {
            let products = match (&cfg, catalog) {
                (_, Some(path)) => fs::read(path)
                    .map_err(|e| e.to_string())
                    .and_then(|b| load_catalog(&b).map_err(|e| e.to_string())),
                (Some(c), None) => c.catalog().map_err(|e| e.to_string()).map(|(_, all)| {
                    sample_indices(all.len(), c.products_sample.count, c.products_sample.seed)
                        .into_iter()
                        .map(|i| all[i].clone())
                        .collect()
                }),
                (None, None) => Err("the scripted env needs --catalog or --config".into()),
            };
            let products = match products {
                Ok(p) if !p.is_empty() => p,
                Ok(_) => return fail(2, "catalog is empty"),
                Err(e) => return fail(2, e),
            };
            let t_max = cfg.as_ref().map_or(30, |c| c.t_max);
            let mut env = ScriptedPromptEnv::new(products, t_max);
            runner::optimize(&mut env, opts)
        }
        EnvKind::Live => {
            let Some(cfg) = cfg else {
                return fail(2, "the live env needs --config");
            };
            let mut env = match LiveEnv::from_config(&cfg) {
                Ok(e) => e,
                Err(e) => return run_error(e),
            };
            runner::optimize(&mut env, opts)
        }
    };
    match result {
        Ok(Some(best)) => {
            println!("{}", serde_json::to_string_pretty(&best).expect("json"));
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(OptimizeError::Run(e)) => run_error(e),
        Err(e @ OptimizeError::Bandit(_)) => fail(
            1,
            format!("{e}; progress saved, rerun with --resume to continue"),
        ),
    }
}

fn show_prompt(role: Role, action: Option<usize>, dir: Option<&Path>) -> ExitCode {
    let templates = match dir.map(TemplateSet::from_dir).transpose() {
        Ok(t) => t.unwrap_or_default(),
        Err(e) => return fail(2, e),
    };
    match action {
        None => println!("{}", templates.get(role).body),
        Some(i) if role == Role::BuyerSystem => match StrategyAction::from_index(i) {
            Ok(a) => println!("{}", templates.strategy_prompt(&a).body),
            Err(e) => return fail(2, e),
        },
        Some(_) => return fail(2, "--action applies to the buyer system prompt only"),
    }
    ExitCode::SUCCESS
}

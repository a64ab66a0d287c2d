use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use simrec_core::config::PipelineConfig;
use simrec_core::harness::WorldSpec;
use simrec_core::pipeline::{self, Bundle, PipelineError, TraceFormat};

/// Exit status for an unknown subcommand or other usage error.
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(
    name = "simrec",
    version,
    about = "Explainable ensemble user simulator and RL recommender pipeline",
    after_help = "Configuration precedence: --config file < SIMREC__<SECTION>__<KEY> environment variables < flags.\n\
                  Exit codes: 0 ok, 2 config, 3 missing input, 4 backend failure, 5 internal invariant, 64 usage."
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Pipeline config file (TOML)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Global seed; overrides the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rerun even when outputs are newer than inputs
    #[arg(long, global = true, num_args = 0..=1, require_equals = true, default_value_t = false, default_missing_value = "true", action = ArgAction::Set)]
    force: bool,
    /// Human-readable warnings only instead of JSON event logs
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Clean a raw catalog and reviews into categories and histories
    Ingest {
        #[arg(long, value_name = "PATH")]
        items: PathBuf,
        #[arg(long, value_name = "PATH")]
        reviews: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        cat_low: Option<usize>,
        #[arg(long)]
        cat_high: Option<f64>,
    },
    /// Distill keyword profiles for every item of an ingested directory
    Distill {
        /// Ingest output directory
        #[arg(long, value_name = "DIR")]
        items: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// mock:<seed> | mock | http
        #[arg(long)]
        llm: Option<String>,
        #[arg(long)]
        review_cap: Option<usize>,
        #[arg(long)]
        retries: Option<usize>,
        #[arg(long)]
        concurrency: Option<usize>,
        /// Item noun used in the prompts ("business", "Movie", ...)
        #[arg(long)]
        domain_noun: Option<String>,
    },
    /// Embed profile keywords into a cache file
    Embed {
        #[arg(long, value_name = "PATH")]
        profiles: PathBuf,
        /// Cache file to create or extend
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// remote | file:<path> | hash:<seed> | hash
        #[arg(long)]
        provider: Option<String>,
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Train the sequential statistical model
    TrainSta {
        #[arg(long, value_name = "PATH")]
        histories: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        maxlen: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Train an RL agent against the simulator
    TrainRl {
        /// Pipeline config describing the environment (same as --config)
        #[arg(long, value_name = "PATH")]
        env: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Algo::Dqn)]
        algo: Algo,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        curve: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        action_cap: Option<usize>,
    },
    /// Evaluate an agent (or the random policy) and write a report directory
    Eval {
        #[arg(long, value_name = "PATH", conflicts_with = "random")]
        agent: Option<PathBuf>,
        /// Evaluate the uniform random policy instead of an agent
        #[arg(long)]
        random: bool,
        #[arg(long, value_name = "PATH")]
        env: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Render the explanation table of one stored evaluation episode
    Trace {
        #[arg(long)]
        episode: usize,
        /// Report directory written by `eval`
        #[arg(long, value_name = "DIR")]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Generate a synthetic world with planted preferences (and ingest it)
    Genworld {
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        categories: Option<usize>,
        #[arg(long)]
        history_len: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Algo {
    Dqn,
    Ppo,
    Trpo,
    A2c,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Format {
    Text,
    Csv,
}

fn init_logging(quiet: bool) {
    let builder = tracing_subscriber::fmt().with_writer(std::io::stderr);
    if quiet {
        builder.with_max_level(tracing::Level::WARN).without_time().with_target(false).init();
    } else {
        let filter = tracing_subscriber::EnvFilter::try_from_env("SIMREC_LOG")
            .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
        builder.json().with_env_filter(filter).init();
    }
}

fn load_config(global: &Global, override_path: Option<&Path>) -> Result<PipelineConfig, PipelineError> {
    let path = match (override_path, global.config.as_deref()) {
        (Some(a), Some(b)) if a != b => {
            return Err(PipelineError::Config("--env and --config name different files".into()));
        }
        (a, b) => a.or(b),
    };
    if let Some(p) = path {
        if !p.exists() {
            return Err(PipelineError::MissingInput(p.display().to_string()));
        }
    }
    let mut cfg = PipelineConfig::from_env_and_file(path)?;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    cfg.sync_seeds();
    Ok(cfg)
}

/// Skip when not forced and every output is newer than every input.
fn fresh(global: &Global, inputs: &[PathBuf], outputs: &[PathBuf]) -> bool {
    let mut inputs = inputs.to_vec();
    inputs.extend(global.config.clone());
    let skip = !global.force && pipeline::up_to_date(&inputs, outputs);
    if skip {
        tracing::info!(outputs = ?outputs, "outputs are up to date; skipping (use --force to rerun)");
    }
    skip
}

fn skipped() -> serde_json::Value {
    json!({"status": "skipped"})
}

fn run(cli: Cli) -> Result<serde_json::Value, PipelineError> {
    let g = &cli.global;
    match cli.command {
        Command::Ingest {
            items,
            reviews,
            out,
            threshold,
            cat_low,
            cat_high,
        } => {
            let mut cfg = load_config(g, None)?;
            cfg.ingest.threshold = threshold.unwrap_or(cfg.ingest.threshold);
            cfg.ingest.cat_low = cat_low.unwrap_or(cfg.ingest.cat_low);
            cfg.ingest.cat_high = cat_high.unwrap_or(cfg.ingest.cat_high);
            cfg.validate()?;
            if fresh(g, &[items.clone(), reviews.clone()], &pipeline::ingest_outputs(&out)) {
                return Ok(skipped());
            }
            let s = pipeline::ingest(&items, &reviews, &out, &cfg)?;
            Ok(json!({"status": "ok", "ingest": s}))
        }
        Command::Distill {
            items,
            out,
            llm,
            review_cap,
            retries,
            concurrency,
            domain_noun,
        } => {
            let mut cfg = load_config(g, None)?;
            if let Some(l) = llm {
                cfg.distill.llm = l;
            }
            cfg.distill.review_cap = review_cap.unwrap_or(cfg.distill.review_cap);
            cfg.distill.retries = retries.unwrap_or(cfg.distill.retries);
            cfg.distill.concurrency = concurrency.unwrap_or(cfg.distill.concurrency);
            if let Some(d) = domain_noun {
                cfg.distill.domain_noun = d;
            }
            cfg.validate()?;
            let inputs: Vec<PathBuf> =
                [pipeline::ITEMS, pipeline::CATEGORIES, pipeline::REVIEWS].iter().map(|f| items.join(f)).collect();
            if fresh(g, &inputs, std::slice::from_ref(&out)) {
                return Ok(skipped());
            }
            let s = pipeline::distill(&items, &out, &cfg)?;
            Ok(json!({"status": "ok", "distill": s}))
        }
        Command::Embed {
            profiles,
            out,
            provider,
            dim,
        } => {
            let mut cfg = load_config(g, None)?;
            if let Some(p) = provider {
                cfg.embed.provider = p;
            }
            cfg.embed.dim = dim.unwrap_or(cfg.embed.dim);
            cfg.validate()?;
            if fresh(g, std::slice::from_ref(&profiles), std::slice::from_ref(&out)) {
                return Ok(skipped());
            }
            let s = pipeline::embed(&profiles, &out, &cfg)?;
            Ok(json!({"status": "ok", "embed": s}))
        }
        Command::TrainSta {
            histories,
            out,
            dim,
            layers,
            maxlen,
            epochs,
            lr,
            batch_size,
        } => {
            let mut cfg = load_config(g, None)?;
            let h = &mut cfg.sta;
            h.dim = dim.unwrap_or(h.dim);
            h.layers = layers.unwrap_or(h.layers);
            h.max_len = maxlen.unwrap_or(h.max_len);
            h.epochs = epochs.unwrap_or(h.epochs);
            h.lr = lr.unwrap_or(h.lr);
            h.batch_size = batch_size.unwrap_or(h.batch_size);
            cfg.validate()?;
            if fresh(g, std::slice::from_ref(&histories), &[out.clone(), pipeline::training_log_path(&out)]) {
                return Ok(skipped());
            }
            let log = pipeline::train_sta(&histories, &out, &cfg)?;
            Ok(json!({"status": "ok", "heldout_auc": log.heldout_auc, "epoch_losses": log.epoch_losses}))
        }
        Command::TrainRl {
            env,
            algo,
            episodes,
            out,
            curve,
            horizon,
            action_cap,
        } => {
            if !matches!(algo, Algo::Dqn) {
                return Err(PipelineError::Config(format!("algorithm {algo:?} is not implemented; use dqn")));
            }
            let mut cfg = load_config(g, env.as_deref())?;
            cfg.env.horizon = horizon.unwrap_or(cfg.env.horizon);
            if action_cap.is_some() {
                cfg.env.action_cap = action_cap;
            }
            cfg.validate()?;
            let episodes = episodes.unwrap_or(cfg.run.train_episodes);
            let out = out.unwrap_or_else(|| cfg.paths.resolve(&cfg.paths.agent));
            let curve = curve.unwrap_or_else(|| out.with_file_name("curve.csv"));
            if fresh(g, &Bundle::input_paths(&cfg), &[out.clone(), curve.clone()]) {
                return Ok(skipped());
            }
            let points = pipeline::train_rl(&cfg, episodes, &out, &curve)?;
            let tail = &points[points.len().saturating_sub(100)..];
            let mean = tail.iter().map(|p| p.total_reward).sum::<f64>() / tail.len().max(1) as f64;
            Ok(json!({"status": "ok", "episodes": episodes, "final_mean_reward": mean, "agent": out, "curve": curve}))
        }
        Command::Eval {
            agent,
            random,
            env,
            episodes,
            out,
        } => {
            let cfg = load_config(g, env.as_deref())?;
            cfg.validate()?;
            let agent = match (agent, random) {
                (Some(a), _) => Some(a),
                (None, true) => None,
                (None, false) => Some(cfg.paths.resolve(&cfg.paths.agent)),
            };
            let episodes = episodes.unwrap_or(cfg.run.eval_episodes);
            let out = out.unwrap_or_else(|| cfg.paths.resolve(&cfg.paths.reports));
            let mut inputs = Bundle::input_paths(&cfg);
            inputs.extend(agent.clone());
            if fresh(g, &inputs, &[out.join(pipeline::REPORT_JSON), out.join(pipeline::TRACES_JSONL)]) {
                return Ok(skipped());
            }
            let report = pipeline::evaluate(&cfg, agent.as_deref(), episodes, &out)?;
            if g.quiet {
                eprint!("{}", pipeline::report_table(&[&report]));
            }
            Ok(json!({"status": "ok", "report": report, "out": out}))
        }
        Command::Trace { episode, report, format } => {
            let cfg = load_config(g, None)?;
            let dir = report.unwrap_or_else(|| cfg.paths.resolve(&cfg.paths.reports));
            let fmt = match format {
                Format::Text => TraceFormat::Text,
                Format::Csv => TraceFormat::Csv,
            };
            print!("{}", pipeline::render_trace(&dir, episode, fmt)?);
            Ok(serde_json::Value::Null)
        }
        Command::Genworld {
            users,
            items,
            categories,
            history_len,
            out,
        } => {
            let cfg = load_config(g, None)?;
            let d = WorldSpec::default();
            let spec = WorldSpec {
                users: users.unwrap_or(d.users),
                items: items.unwrap_or(d.items),
                categories: categories.unwrap_or(d.categories),
                history_len: history_len.unwrap_or(d.history_len),
                seed: cfg.seed,
                ..d
            };
            cfg.validate()?;
            let world_json = out.join(pipeline::WORLD_SPEC);
            let same_spec = std::fs::read_to_string(&world_json)
                .ok()
                .and_then(|t| serde_json::from_str::<WorldSpec>(&t).ok())
                .is_some_and(|s| s == spec);
            if !g.force && same_spec && pipeline::up_to_date(&[world_json], &pipeline::ingest_outputs(&out)) {
                tracing::info!("world is up to date; skipping (use --force to rerun)");
                return Ok(skipped());
            }
            let world = pipeline::genworld(&spec, &out, &cfg)?;
            Ok(json!({
                "status": "ok",
                "items": world.items.len(),
                "users": world.users.len(),
                "categories": world.categories,
                "like_rate": world.exact_like_rate(),
            }))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::*;
            return match e.kind() {
                DisplayHelp | DisplayVersion | DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    if e.kind() == DisplayHelpOnMissingArgumentOrSubcommand {
                        ExitCode::from(EXIT_USAGE)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                InvalidSubcommand => {
                    let msg = e.render().to_string();
                    println!("{}", json!({"error": "usage", "message": msg.lines().next().unwrap_or_default()}));
                    ExitCode::from(EXIT_USAGE)
                }
                _ => {
                    let msg = e.render().to_string();
                    println!("{}", json!({"error": "config", "message": msg.lines().next().unwrap_or_default()}));
                    ExitCode::from(2)
                }
            };
        }
    };
    init_logging(cli.global.quiet);
    match run(cli) {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            println!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

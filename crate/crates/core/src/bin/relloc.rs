use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use relloc::config::Config;
use relloc::evaluation::{Averaging, Task};
use relloc::io::dataset::read_json;
use relloc::pipeline;
use relloc::synth::{write_dataset, SynthSpec};
use relloc::training::instances::Component;
use relloc::{Error, Result};

/// Relative-location-guided visual relationship detection.
///
/// Every command prints a one-line JSON summary on success.
#[derive(Debug, Parser)]
#[command(name = "relloc", version)]
struct Cli {
    /// Seed for every random choice (overrides seeds in config and spec files).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON config file; defaults to $RELLOC_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Location anchors.
    Anchors {
        #[command(subcommand)]
        action: AnchorsCmd,
    },
    /// Predicate graph.
    Graph {
        #[command(subcommand)]
        action: GraphCmd,
    },
    /// Train the rating head (orm) or the predicate model (prm).
    Train {
        #[command(subcommand)]
        stage: TrainCmd,
    },
    /// Propose pairs and score predicates for every image.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n_o: Option<usize>,
        #[arg(long)]
        n_t: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall@n,k of stored predictions.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Count only triplets whose labels never occur in --train-data.
        #[arg(long, requires = "train_data")]
        zero_shot: bool,
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long, value_enum)]
        averaging: Option<AveragingArg>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, value_enum)]
        component: ComponentArg,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

#[derive(Debug, Subcommand)]
enum AnchorsCmd {
    Build {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
        /// Also write every mask as a grayscale PNG.
        #[arg(long)]
        png: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum GraphCmd {
    Build {
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long)]
        mse_thresh: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum TrainCmd {
    Orm(TrainArgs),
    Prm {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        graph: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Predicate,
    Phrase,
    Relationship,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AveragingArg {
    Micro,
    Macro,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ComponentArg {
    Orm,
    Fusion,
    Ggnn,
    Prm,
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let line = serde_json::to_string(v).map_err(|e| Error::Input(e.to_string()))?;
    match writeln!(std::io::stdout().lock(), "{line}") {
        // A closed reader (`relloc ... | head`) is not our failure.
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        Err(source) => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source,
        }),
        Ok(()) => Ok(()),
    }
}

#[derive(Serialize)]
struct Written<'a, T: Serialize> {
    out: &'a Path,
    #[serde(flatten)]
    summary: T,
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = Config::resolve(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    match cli.command {
        Command::Synth { spec, out } => {
            let mut spec: SynthSpec = read_json(&spec)?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let summary = write_dataset(&spec, &out)?;
            print_json(&Written { out: &out, summary })
        }
        Command::Anchors {
            action: AnchorsCmd::Build { data, resolution, png, out },
        } => {
            let r = resolution.unwrap_or(cfg.anchors.resolution);
            let bank = pipeline::build_anchors(&data, r, &out, png)?;
            let counts: Vec<usize> = bank.iter().map(|a| a.count).collect();
            print_json(&serde_json::json!({ "out": out, "resolution": r, "counts": counts }))
        }
        Command::Graph {
            action: GraphCmd::Build { anchors, mse_thresh, out },
        } => {
            let t = mse_thresh.unwrap_or(cfg.anchors.mse_thresh);
            let g = pipeline::build_graph(&anchors, t, &out)?;
            print_json(&serde_json::json!({ "out": out, "nodes": g.num_nodes(), "edges": g.edges().len() }))
        }
        Command::Train { stage: TrainCmd::Orm(a) } => {
            let (_, summary) = pipeline::train_orm(&a.data, &cfg, &a.out)?;
            print_json(&Written { out: &a.out, summary })
        }
        Command::Train {
            stage: TrainCmd::Prm { common: a, graph },
        } => {
            let (_, summary) = pipeline::train_prm(&a.data, &graph, &cfg, &a.out)?;
            print_json(&Written { out: &a.out, summary })
        }
        Command::Infer { data, ckpt, n_o, n_t, out } => {
            let mut p = cfg.proposing.clone();
            p.n_o = n_o.unwrap_or(p.n_o);
            p.n_t = n_t.unwrap_or(p.n_t);
            let summary = pipeline::infer(&data, &ckpt, &p, &out)?;
            print_json(&Written { out: &out, summary })
        }
        Command::Eval {
            preds,
            data,
            task,
            n,
            k,
            zero_shot,
            train_data,
            averaging,
        } => {
            let task = match task {
                TaskArg::Predicate => Task::Predicate,
                TaskArg::Phrase => Task::Phrase,
                TaskArg::Relationship => Task::Relationship,
            };
            if let Some(a) = averaging {
                cfg.eval.averaging = match a {
                    AveragingArg::Micro => Averaging::Micro,
                    AveragingArg::Macro => Averaging::Macro,
                };
            }
            let seen = match (zero_shot, train_data) {
                (true, Some(t)) => Some(pipeline::training_triplets(&t)?),
                _ => None,
            };
            let report = pipeline::evaluate(&preds, &data, task, n, k, &cfg, seen.as_ref())?;
            print_json(&report)
        }
        Command::Gradcheck {
            component,
            tol,
            step,
            instances,
        } => {
            let component = match component {
                ComponentArg::Orm => Component::Orm,
                ComponentArg::Fusion => Component::Fusion,
                ComponentArg::Ggnn => Component::Ggnn,
                ComponentArg::Prm => Component::Prm,
            };
            let s = pipeline::gradcheck(component, instances, cli.seed.unwrap_or(0), step, tol)?;
            print_json(&s)?;
            if s.pass {
                Ok(())
            } else {
                Err(Error::Numeric(format!(
                    "gradient check failed: max relative error {} at {}",
                    s.max_rel_err, s.worst.worst_param
                )))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: bad arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

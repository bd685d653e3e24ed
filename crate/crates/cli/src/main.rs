use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use trajguard::cluster::KnnMode;
use trajguard::heatmap::HeatmapSpec;
use trajguard::pipeline::{self, TrainSetup};
use trajguard::store::{check_q, Outcome, RunLayout};
use trajguard::synth::ScenarioConfig;
use trajguard::WorldConfig;

#[derive(Parser)]
#[command(name = "trajguard", version, about = "Trajectory-embedding bot group detection")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Dagger,
    Custom,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world: logs, profiles and the access graph.
    Simulate {
        /// Scenario TOML; defaults to the built-in scenario.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// World TOML; defaults to the built-in world.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run directory; outputs go to DIR/sim.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the vocabulary, triplet corpus and downstream trajectories.
    Prep {
        #[arg(long)]
        logs: PathBuf,
        /// Defaults to world.toml next to the logs directory.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        mask_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to <run>/prep.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the encoder.
    Train {
        /// Prep directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "dagger")]
        preset: PresetArg,
        /// Setup TOML with [model] and [train] tables (preset custom).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        samples_per_epoch: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        patience: Option<usize>,
        /// Continue from the saved training state if there is one.
        #[arg(long)]
        resume: bool,
        /// Defaults to <run>/model.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract one representation per player-day.
    Embed {
        #[arg(long)]
        model: PathBuf,
        /// Prep directory.
        #[arg(long)]
        trajs: PathBuf,
        /// Defaults to <run>/reps.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Single-threaded extraction.
        #[arg(long)]
        serial: bool,
    },
    /// DBSCAN with ε at the q-quantile of 4-NN distances.
    Cluster {
        #[arg(long)]
        reps: PathBuf,
        #[arg(long, default_value_t = 0.05, value_parser = parse_q)]
        q: f64,
        #[arg(long, default_value = "all")]
        knn_mode: KnnMode,
        /// Defaults to <run>/clusters/q<Q>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contextual similarity and access homogeneity of an assignment.
    Evaluate {
        #[arg(long)]
        assignment: PathBuf,
        /// Prep directory.
        #[arg(long)]
        trajs: PathBuf,
        /// Access graph JSON; defaults to <run>/sim/access.json.
        #[arg(long)]
        access: Option<PathBuf>,
        /// Defaults to <run>/reps/reps.bin.
        #[arg(long)]
        reps: Option<PathBuf>,
        /// Seed for negative pair sampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to <run>/metrics/<assignment dir name>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render cluster and noise heatmaps.
    Heatmap {
        #[arg(long)]
        assignment: PathBuf,
        /// Prep directory.
        #[arg(long)]
        trajs: PathBuf,
        /// Defaults to the prep directory's world.toml.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        x_scale: u32,
        #[arg(long, default_value_t = 1)]
        y_scale: u32,
        /// Append noise rows to the cluster image instead of a separate file.
        #[arg(long)]
        noise_inline: bool,
    },
    /// Serve the /v1 HTTP API over one or more run directories.
    Serve {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
    },
}

fn parse_q(s: &str) -> Result<f64, String> {
    let q: f64 = s.parse().map_err(|_| format!("{s} is not a number"))?;
    check_q(q).map_err(|e| e.to_string())
}

fn run_of(path: &Path, flag: &str) -> anyhow::Result<RunLayout> {
    RunLayout::containing(path)
        .ok_or_else(|| anyhow!(trajguard::Error::invalid("path", format!("cannot infer a run directory from {}; pass {flag}", path.display()))))
}

fn report(stage: &str, outcome: Outcome, dir: &Path) {
    match outcome {
        Outcome::Ran => log::info!("{stage}: wrote {}", dir.display()),
        Outcome::UpToDate => log::info!("{stage}: {} already up to date", dir.display()),
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { scenario, world, seed, out } => {
            let world = match world {
                Some(p) => WorldConfig::load(&p)?,
                None => WorldConfig::default(),
            };
            let scenario = match scenario {
                Some(p) => ScenarioConfig::load(&p)?,
                None => ScenarioConfig::default(),
            };
            let dir = RunLayout::new(out).sim();
            report("simulate", pipeline::simulate_stage(&world, &scenario, seed, &dir)?, &dir);
        }
        Command::Prep { logs, world, mask_rate, seed, out } => {
            let world = world.unwrap_or_else(|| logs.parent().unwrap_or(Path::new(".")).join("world.toml"));
            let dir = match out {
                Some(d) => d,
                None => run_of(&logs, "--out")?.prep(),
            };
            report("prep", pipeline::prep_stage(&logs, &world, mask_rate, seed, &dir)?, &dir);
        }
        Command::Train {
            data,
            preset,
            config,
            seed,
            epochs,
            samples_per_epoch,
            batch_size,
            lr,
            patience,
            resume,
            out,
        } => {
            let mut setup = match (preset, config) {
                (PresetArg::Dagger, None) => TrainSetup::dagger(seed.unwrap_or(0)),
                (PresetArg::Dagger, Some(_)) => {
                    return Err(anyhow!(trajguard::Error::invalid("config", "--config needs --preset custom")))
                }
                (PresetArg::Custom, Some(p)) => TrainSetup::load(&p)?,
                (PresetArg::Custom, None) => {
                    return Err(anyhow!(trajguard::Error::invalid("config", "--preset custom needs --config")))
                }
            };
            let t = &mut setup.train;
            if let Some(v) = seed {
                t.seed = v;
            }
            if let Some(v) = epochs {
                t.max_epochs = v;
            }
            if samples_per_epoch.is_some() {
                t.samples_per_epoch = samples_per_epoch;
            }
            if let Some(v) = batch_size {
                t.batch_size = v;
            }
            if let Some(v) = lr {
                t.learning_rate = v;
            }
            if let Some(v) = patience {
                t.patience = v;
            }
            let dir = match out {
                Some(d) => d,
                None => run_of(&data, "--out")?.model(),
            };
            let outcome = pipeline::train_stage(&data, &setup, &dir, resume, &mut |s| log::info!("{}", s.log_line()))?;
            report("train", outcome, &dir);
        }
        Command::Embed { model, trajs, out, serial } => {
            let dir = match out {
                Some(d) => d,
                None => run_of(&model, "--out")?.reps_dir(),
            };
            report("embed", pipeline::embed_stage(&model, &trajs, &dir, !serial)?, &dir);
        }
        Command::Cluster { reps, q, knn_mode, out } => {
            let dir = match out {
                Some(d) => d,
                None => run_of(&reps, "--out")?.clusters(q),
            };
            report("cluster", pipeline::cluster_stage(&reps, q, knn_mode, &dir)?, &dir);
        }
        Command::Evaluate { assignment, trajs, access, reps, seed, out } => {
            let run = || run_of(&assignment, "--access, --reps and --out");
            let access = match access {
                Some(p) => p,
                None => run()?.access(),
            };
            let reps = match reps {
                Some(p) => p,
                None => run()?.reps(),
            };
            let dir = match out {
                Some(d) => d,
                None => {
                    let label = assignment
                        .parent()
                        .and_then(|p| p.file_name())
                        .context("cannot name the metrics directory; pass --out")?;
                    run()?.root.join("metrics").join(label)
                }
            };
            report(
                "evaluate",
                pipeline::evaluate_stage(&assignment, &reps, &trajs, &access, seed, &dir)?,
                &dir,
            );
        }
        Command::Heatmap { assignment, trajs, world, out, x_scale, y_scale, noise_inline } => {
            let world = world.unwrap_or_else(|| trajs.join(pipeline::PREP_WORLD));
            let spec = HeatmapSpec {
                x_scale,
                y_scale,
                noise_separate: !noise_inline,
            };
            report("heatmap", pipeline::heatmap_stage(&assignment, &trajs, &world, spec, &out)?, &out);
        }
        Command::Serve { runs, listen } => {
            let state = trajguard_cli::AppState::new(runs)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(listen)
                    .await
                    .with_context(|| format!("bind {listen}"))?;
                log::info!("serving on http://{listen}/v1");
                axum::serve(listener, trajguard_cli::router(state)).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error: code=usage message={}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        (false, _) => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format(|buf, r| {
            use std::io::Write;
            writeln!(buf, "[{}] {}", r.level(), r.args())
        })
        .init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<trajguard::Error>())
                .map_or("error", |c| c.code());
            eprintln!("error: code={code} message={}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}

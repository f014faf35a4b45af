//! `hcci`: dataset generation, surrogate training, closed-loop runs,
//! split plant/controller nodes and CSV reports.

mod overrides;
mod records;

use std::fs::{self, File};
use std::io::BufWriter;
use std::net::{SocketAddr, UdpSocket};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hcci_nmpc::config::ExperimentConfig;
use hcci_nmpc::nn::{load_weights, save_weights, NetworkWeights};
use hcci_nmpc::plant::{settle, SurrogatePlant};
use hcci_nmpc::sim::{bench_solver, run_closed_loop, ClosedLoopConfig, ReferenceProfile};
use hcci_nmpc::sqp::WarmStart;
use hcci_nmpc::trainer::{evaluate, generate_dataset, train_with_progress, Dataset};
use log::info;
use toml::Value;

const DATASET: &str = "data/dataset.csv";
const WEIGHTS: &str = "model/weights.nnw";

#[derive(Parser)]
#[command(name = "hcci", version, about = "LSTM-surrogate NMPC for cycle-to-cycle combustion control")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML experiment config; built-in defaults when absent.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Artifact root (`output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Experiment seed (`seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set train.max_epochs=20`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Excite the synthetic plant and write `data/dataset.csv`.
    GenData {
        /// `data.cycles`
        #[arg(long)]
        cycles: Option<usize>,
    },
    /// Fit the surrogate and write `model/weights.nnw` with fit metrics.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// `train.max_epochs`
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score trained weights on a dataset.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// In-process plant/controller loop over a step profile.
    ClosedLoop {
        #[arg(long)]
        model: Option<PathBuf>,
        /// `run.cycles`
        #[arg(long)]
        cycles: Option<usize>,
        /// `run.profile`: CSV of cycle,r_imep,r_ca50 with step-hold semantics.
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Zero all plant noise.
        #[arg(long)]
        noise_free: bool,
    },
    /// Solve-time distribution with warm and cold starts.
    Bench {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        solves: usize,
    },
    /// Paced plant node; talks UDP to a controller node.
    PlantNode {
        /// `bridge.endpoints.plant`
        #[arg(long)]
        bind: Option<String>,
        /// `bridge.endpoints.controller`
        #[arg(long)]
        controller: Option<String>,
        /// `run.cycles`
        #[arg(long)]
        cycles: Option<usize>,
    },
    /// NMPC node answering plant measurements over UDP.
    ControllerNode {
        #[arg(long)]
        model: Option<PathBuf>,
        /// `bridge.endpoints.controller`
        #[arg(long)]
        bind: Option<String>,
        /// Exit after this many measurements.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Turn a closed-loop or plant-node directory into per-figure CSV series.
    Report { run_dir: PathBuf },
    /// Print the resolved configuration.
    ShowConfig,
}

fn config(g: &Global, extra: Vec<(&str, Value)>) -> Result<ExperimentConfig> {
    let mut o = g.sets.iter().map(|s| overrides::parse_assignment(s)).collect::<Result<Vec<_>>>()?;
    if let Some(out) = &g.out {
        o.push(("output_dir".into(), Value::String(out.display().to_string())));
    }
    if let Some(seed) = g.seed {
        let seed = i64::try_from(seed).map_err(|_| anyhow!("seed must fit in a signed 64-bit integer"))?;
        o.push(("seed".into(), Value::Integer(seed)));
    }
    o.extend(extra.into_iter().map(|(k, v)| (k.to_string(), v)));
    overrides::resolve(g.config.as_deref(), o)
}

fn int(v: Option<usize>) -> Option<Value> {
    v.map(|n| Value::Integer(n as i64))
}

fn stage_dir(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.output_dir.join(name);
    cfg.write_snapshot(&dir).map_err(|e| anyhow!("{e}"))?;
    Ok(dir)
}

fn artifact(cfg: &ExperimentConfig, explicit: &Option<PathBuf>, default: &str, producer: &str) -> Result<PathBuf> {
    let path = explicit.clone().unwrap_or_else(|| cfg.output_dir.join(default));
    if !path.exists() {
        bail!(
            "{} not found; run `hcci {producer}` first with the same --config/--out, or pass the file explicitly",
            path.display()
        );
    }
    Ok(path)
}

fn load_model(cfg: &ExperimentConfig, explicit: &Option<PathBuf>) -> Result<Arc<NetworkWeights>> {
    let p = artifact(cfg, explicit, WEIGHTS, "train")?;
    Ok(Arc::new(load_weights(&p).with_context(|| format!("loading weights {}", p.display()))?))
}

fn load_dataset(cfg: &ExperimentConfig, explicit: &Option<PathBuf>) -> Result<Dataset> {
    let p = artifact(cfg, explicit, DATASET, "gen-data")?;
    Dataset::read_csv(File::open(&p)?, cfg.data.train_fraction).with_context(|| format!("reading dataset {}", p.display()))
}

fn profile(cfg: &ExperimentConfig) -> Result<ReferenceProfile> {
    let p = match &cfg.run.profile {
        Some(path) => {
            let f = File::open(path).with_context(|| format!("opening profile {}", path.display()))?;
            ReferenceProfile::read_csv(f, cfg.run.cycles)?
        }
        None => {
            let mut p = ReferenceProfile::default();
            if let Some(n) = cfg.run.cycles {
                p.cycles = n;
                p.points.retain(|q| q.cycle < n);
            }
            p
        }
    };
    p.validate()?;
    Ok(p)
}

fn settled_plant(cfg: &ExperimentConfig, noise_free: bool) -> (SurrogatePlant, hcci_nmpc::nn::ModelOutput) {
    let params = if noise_free { cfg.plant.clone().without_noise() } else { cfg.plant.clone() };
    let (state, y0) = settle(&params, &cfg.run.initial_actuation, cfg.run.settle_cycles);
    (SurrogatePlant::new(params, state), y0)
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn addr(s: &str) -> Result<SocketAddr> {
    s.parse().with_context(|| format!("`{s}` is not a socket address like 127.0.0.1:47101"))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::GenData { cycles } => {
            let cfg = config(g, int(cycles).map(|v| ("data.cycles", v)).into_iter().collect())?;
            let ds = generate_dataset(&cfg.plant, &cfg.actuators, cfg.data.cycles, cfg.seed, cfg.data.train_fraction)?;
            let dir = stage_dir(&cfg, "data")?;
            ds.write_csv(writer(&dir.join("dataset.csv"))?)?;
            info!("{} cycles ({} for training) written to {}", ds.len(), ds.split_index(), dir.display());
        }
        Command::Train { data, epochs } => {
            let cfg = config(g, int(epochs).map(|v| ("train.max_epochs", v)).into_iter().collect())?;
            let ds = load_dataset(&cfg, &data)?;
            let spec = cfg.network.spec();
            info!("training {} parameters on {} cycles", spec.param_count(), ds.split_index());
            let (w, fit) = train_with_progress(&ds, &spec, &cfg.train, |e| {
                info!("epoch {} train {:.5} val {:.5}", e.epoch, e.train_loss, e.validation_loss)
            })?;
            let dir = stage_dir(&cfg, "model")?;
            save_weights(&w, dir.join("weights.nnw"))?;
            fit.write_metrics_csv(writer(&dir.join("fit.csv"))?)?;
            fit.write_history_csv(writer(&dir.join("history.csv"))?)?;
            let summary = format!("parameters {}\n{}", spec.param_count(), fit.summary());
            fs::write(dir.join("summary.txt"), &summary)?;
            print!("{summary}");
        }
        Command::Eval { model, data } => {
            let cfg = config(g, vec![])?;
            let w = load_model(&cfg, &model)?;
            let ds = load_dataset(&cfg, &data)?;
            let fit = evaluate(&w, &ds)?;
            let dir = stage_dir(&cfg, "eval")?;
            fit.write_metrics_csv(writer(&dir.join("metrics.csv"))?)?;
            fs::write(dir.join("summary.txt"), fit.summary())?;
            print!("{}", fit.summary());
        }
        Command::ClosedLoop {
            model,
            cycles,
            profile: prof,
            noise_free,
        } => {
            let mut extra: Vec<(&str, Value)> = int(cycles).map(|v| ("run.cycles", v)).into_iter().collect();
            if let Some(p) = prof {
                extra.push(("run.profile", Value::String(p.display().to_string())));
            }
            let cfg = config(g, extra)?;
            let w = load_model(&cfg, &model)?;
            let prof = profile(&cfg)?;
            let (mut plant, y0) = settled_plant(&cfg, noise_free);
            let run = run_closed_loop(w, &mut plant, y0, &prof, &cfg.closed_loop())?;
            let dir = stage_dir(&cfg, "closed-loop")?;
            prof.write_csv(writer(&dir.join("profile.csv"))?)?;
            records::write_cycles(&run.records, &dir.join(records::CYCLES_CSV))?;
            records::write_solve_times(&run.records, &dir.join(records::SOLVE_TIMES_CSV))?;
            run.report.timing.write_csv(writer(&dir.join("timing.csv"))?)?;
            let summary = run.report.summary() + "\n";
            fs::write(dir.join("summary.txt"), &summary)?;
            print!("{summary}");
        }
        Command::Bench { model, solves } => {
            let cfg = config(g, vec![])?;
            let w = load_model(&cfg, &model)?;
            let prof = profile(&cfg)?;
            let dir = stage_dir(&cfg, "bench")?;
            let mut summary = String::new();
            for (name, ws) in [("warm", WarmStart::Shift), ("cold", WarmStart::Cold)] {
                let mut cl: ClosedLoopConfig = cfg.closed_loop();
                cl.controller.solver.warm_start = ws;
                let (mut plant, y0) = settled_plant(&cfg, false);
                let b = bench_solver(w.clone(), &mut plant, y0, &prof, &cl, solves)?;
                b.timing.write_csv(writer(&dir.join(format!("timing_{name}.csv")))?)?;
                let mean = b.timing.solve.map_or(f64::NAN, |d| d.mean);
                summary += &format!(
                    "{name} start: mean solve {mean:.3} ms, mean QP iterations {:.2}\n{}\n",
                    b.mean_qp_iterations,
                    b.timing.summary()
                );
            }
            fs::write(dir.join("summary.txt"), &summary)?;
            print!("{summary}");
        }
        Command::PlantNode { bind, controller, cycles } => {
            let mut extra: Vec<(&str, Value)> = int(cycles).map(|v| ("run.cycles", v)).into_iter().collect();
            extra.extend(bind.map(|b| ("bridge.endpoints.plant", Value::String(b))));
            extra.extend(controller.map(|c| ("bridge.endpoints.controller", Value::String(c))));
            let cfg = config(g, extra)?;
            let prof = profile(&cfg)?;
            let socket = UdpSocket::bind(addr(&cfg.bridge.endpoints.plant)?)
                .with_context(|| format!("binding {}", cfg.bridge.endpoints.plant))?;
            let peer = addr(&cfg.bridge.endpoints.controller)?;
            let (mut plant, y0) = settled_plant(&cfg, false);
            let log = hcci_nmpc::bridge::plant_node(&mut plant, y0, &prof, &cfg.plant_node(), &socket, peer)?;
            let dir = stage_dir(&cfg, "plant-node")?;
            log.write_csv(writer(&dir.join(records::PLANT_CSV))?)?;
            let timing = log.timing(cfg.clock.budget_ms);
            timing.write_csv(writer(&dir.join("timing.csv"))?)?;
            let summary = format!(
                "cycles {} missed {} dropped {} stale {} malformed {}\n{}\n",
                log.entries.len(),
                log.misses(),
                log.dropped,
                log.stale,
                log.malformed,
                timing.summary()
            );
            fs::write(dir.join("summary.txt"), &summary)?;
            print!("{summary}");
        }
        Command::ControllerNode { model, bind, stop_after } => {
            let cfg = config(g, bind.map(|b| ("bridge.endpoints.controller", Value::String(b))).into_iter().collect())?;
            let w = load_model(&cfg, &model)?;
            let socket = UdpSocket::bind(addr(&cfg.bridge.endpoints.controller)?)
                .with_context(|| format!("binding {}", cfg.bridge.endpoints.controller))?;
            let mut node = cfg.controller_node();
            node.stop_after = stop_after;
            info!("controller listening on {}", socket.local_addr()?);
            let log = hcci_nmpc::bridge::controller_node(w, &cfg.controller, &node, &socket)?;
            let dir = stage_dir(&cfg, "controller-node")?;
            log.write_csv(writer(&dir.join("controller.csv"))?)?;
            let summary = format!(
                "measurements {} duplicates {} gaps {} malformed {} heartbeats {}\n",
                log.entries.len(),
                log.duplicates,
                log.gaps,
                log.malformed,
                log.heartbeats_sent
            );
            fs::write(dir.join("summary.txt"), &summary)?;
            print!("{summary}");
        }
        Command::Report { run_dir } => {
            for p in records::report(&run_dir)? {
                println!("{}", p.display());
            }
        }
        Command::ShowConfig => print!("{}", config(g, vec![])?.to_toml()),
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

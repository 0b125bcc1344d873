use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use unrest::config::KvConfig;
use unrest::env::{parse_scenario, EnvConfig, ExpertConfig};
use unrest::pipeline::{
    build_kdtree_stage, calibrate_stage, collect_stage, evaluate_stage, load_kv, parse_seeds, run_pipeline,
    segment_stage, train_policy_stage, train_return_stage, EvaluateArgs, PipelineConfigs, StageError,
};
use unrest::planner::PlannerConfig;
use unrest::policy::{PolicyKind, PolicyTrainConfig};
use unrest::return_model::ReturnTrainConfig;

#[derive(Parser)]
#[command(name = "unrest", version, about = "Uncertainty-segmented return-conditioned driving policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Unrest,
    Dt,
    Bc,
}

impl From<Baseline> for PolicyKind {
    fn from(b: Baseline) -> Self {
        match b {
            Baseline::Unrest => PolicyKind::Unrest,
            Baseline::Dt => PolicyKind::Dt,
            Baseline::Bc => PolicyKind::Bc,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted expert and store the trajectories.
    Collect {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 50_000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train the return-transformer ensemble.
    TrainReturn {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ensemble_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Estimate per-step uncertainty and relabel certain parts.
    Segment {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        ensemble: PathBuf,
        /// Policy config holding the threshold and minimum uncertain length.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        min_uncertain_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a decision policy (or a baseline) on segmented data.
    TrainPolicy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "unrest")]
        baseline: Baseline,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Build the nearest-neighbour uncertainty index.
    BuildKdtree {
        #[arg(long)]
        segmented: PathBuf,
        /// Planner config holding the neighbour count and threshold.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        neighbors: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Closed-loop evaluation of trained policies.
    Evaluate {
        /// Policy directory; repeat for several policies.
        #[arg(long = "policy", required = true)]
        policies: Vec<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        planner_config: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value = "0, 1, 2")]
        seeds: String,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Also evaluate the scripted expert.
        #[arg(long)]
        expert: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Calibration of the return ensemble on held-out trajectories.
    Calibrate {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Restrict to the held-out split recorded with the ensemble.
        #[arg(long)]
        heldout: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run every stage from a directory of config files.
    Pipeline {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long)]
        work: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn scenario(path: Option<&Path>, delta: Option<f64>) -> Result<(EnvConfig, ExpertConfig), StageError> {
    let mut kv = load_kv(path)?;
    if let Some(d) = delta {
        kv.set("delta", d);
    }
    Ok(parse_scenario(&kv.render())?)
}

fn parse_with<T>(
    mut kv: KvConfig,
    overrides: &[(&str, Option<String>)],
    parse: impl FnOnce(&mut KvConfig) -> Result<T, unrest::config::ConfigError>,
) -> Result<T, StageError> {
    for (k, v) in overrides {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    let cfg = parse(&mut kv)?;
    kv.finish()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Collect {
            scenario: path,
            steps,
            seed,
            delta,
            out,
            force,
        } => {
            let (env, expert) = scenario(path.as_deref(), delta)?;
            let m = collect_stage(&env, &expert, steps, seed, &out, force)?;
            println!("collect: wrote {} (manifest {})", out.display(), m.id);
        }
        Command::TrainReturn {
            dataset,
            config,
            seed,
            ensemble_size,
            out,
            force,
        } => {
            let cfg = parse_with(
                load_kv(config.as_deref())?,
                &[
                    ("Seed", seed.map(|v| v.to_string())),
                    ("Ensemble size", ensemble_size.map(|v| v.to_string())),
                ],
                ReturnTrainConfig::from_kv,
            )?;
            let m = train_return_stage(&dataset, &cfg, &out, force)?;
            println!("train-return: wrote {} (manifest {})", out.display(), m.id);
        }
        Command::Segment {
            dataset,
            ensemble,
            config,
            epsilon,
            min_uncertain_len,
            out,
            force,
        } => {
            let cfg = parse_with(
                load_kv(config.as_deref())?,
                &[
                    ("Uncertainty threshold", epsilon.map(|v| v.to_string())),
                    ("Min uncertain part length", min_uncertain_len.map(|v| v.to_string())),
                ],
                PolicyTrainConfig::from_kv,
            )?;
            let o = segment_stage(&dataset, &ensemble, cfg.epsilon, cfg.min_uncertain_len, &out, force)?;
            for w in &o.warnings {
                eprintln!("warning: {w}");
            }
            let s = &o.summary;
            println!(
                "segment: {} trajectories, {} steps, {} uncertain steps, {} certain / {} uncertain parts, u in [{:.4}, {:.4}]",
                s.trajectories, s.steps, s.uncertain_steps, s.certain_parts, s.uncertain_parts, s.min_u, s.max_u
            );
            println!("u histogram: {:?}", o.histogram);
            println!("segment: wrote {} (manifest {})", out.display(), o.manifest.id);
        }
        Command::TrainPolicy {
            data,
            config,
            baseline,
            seed,
            out,
            force,
        } => {
            let cfg = parse_with(
                load_kv(config.as_deref())?,
                &[("Seed", seed.map(|v| v.to_string()))],
                PolicyTrainConfig::from_kv,
            )?;
            let m = train_policy_stage(&data, &cfg, baseline.into(), &out, force)?;
            println!("train-policy: wrote {} (manifest {})", out.display(), m.id);
        }
        Command::BuildKdtree {
            segmented,
            config,
            neighbors,
            epsilon,
            out,
            force,
        } => {
            let cfg = parse_with(
                load_kv(config.as_deref())?,
                &[
                    ("KD-Tree neighbor", neighbors.map(|v| v.to_string())),
                    ("Uncertainty threshold", epsilon.map(|v| v.to_string())),
                ],
                PlannerConfig::from_kv,
            )?;
            let m = build_kdtree_stage(&segmented, cfg.neighbors, cfg.epsilon, &out, force)?;
            println!("build-kdtree: wrote {} (manifest {})", out.display(), m.id);
        }
        Command::Evaluate {
            policies,
            index,
            planner_config,
            scenario: path,
            delta,
            seeds,
            episodes,
            expert,
            out,
            force,
        } => {
            let planner = parse_with(load_kv(planner_config.as_deref())?, &[], PlannerConfig::from_kv)?;
            let (env, expert_cfg) = scenario(path.as_deref(), delta)?;
            let seeds = parse_seeds("--seeds", &seeds).map_err(StageError::from)?;
            let args = EvaluateArgs {
                policies: &policies,
                index: index.as_deref(),
                planner: &planner,
                env: &env,
                expert: expert.then_some(&expert_cfg),
                seeds: &seeds,
                episodes,
            };
            let (m, report) = evaluate_stage(&args, &out, force)?;
            print!("{}", report.render());
            println!("evaluate: wrote {} (manifest {})", out.display(), m.id);
        }
        Command::Calibrate {
            ensemble,
            dataset,
            heldout,
            out,
            force,
        } => {
            let (m, rep) = calibrate_stage(&ensemble, &dataset, heldout, &out, force)?;
            println!("{:<10} {:>10} {:>10} {:>10}", "model", "nll", "rmse", "coverage");
            for (i, s) in rep.members.iter().enumerate() {
                println!("{:<10} {:>10.4} {:>10.4} {:>10.3}", format!("member {i}"), s.nll, s.rmse, s.coverage);
            }
            let s = rep.ensemble;
            println!("{:<10} {:>10.4} {:>10.4} {:>10.3}", "ensemble", s.nll, s.rmse, s.coverage);
            println!("calibrate: wrote {} (manifest {})", out.display(), m.id);
        }
        Command::Pipeline { configs, work, force } => {
            let cfgs = PipelineConfigs::load_dir(&configs)?;
            let out = run_pipeline(&cfgs, &work, force)?;
            for w in &out.segment.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", out.report.render());
            for a in out.artifact_hashes() {
                println!("{}\t{}", a.sha256, a.name);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = match e.downcast_ref::<StageError>() {
                Some(s @ StageError::Config(_)) => (s.exit_code(), "config"),
                Some(s @ StageError::Missing(_)) => (s.exit_code(), "missing-artifact"),
                Some(s @ StageError::Divergence(_)) => (s.exit_code(), "divergence"),
                Some(s @ StageError::Exists(_)) => (s.exit_code(), "exists"),
                Some(s) => (s.exit_code(), "failure"),
                None => (1, "failure"),
            };
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::from(code as u8)
        }
    }
}

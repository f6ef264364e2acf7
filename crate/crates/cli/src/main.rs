//! `posesynth` command line.
//!
//! Exit codes: 0 success, 1 user error (bad flag, bad input file), 2 internal
//! error. Stochastic subcommands require a seed and print it to stderr.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use posesynth::dataset::{generate_scene, load_scene, save_png, save_scene, SceneDatabase, SceneSpec, Split};
use posesynth::geometry::perturb_rotation;
use posesynth::harness::{
    analyze_bias, evaluate, format_table, run_ablation, run_fraction_study, run_sanity_check, train_policy,
    AblationCell, EvalConfig, LocalizationReport, NeighbourMode,
};
use posesynth::regressor::{load_checkpoint, save_checkpoint, write_loss_csv, Arch};
use posesynth::sampling::{pair_rng, PairOutcome, PairSampler, Policy};
use posesynth::synthesis::ViewSynthesizer;
use posesynth::{Error, Pose};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::User(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFiniteActivation(_)
            | Error::NonFiniteGradient(_)
            | Error::DivergedLoss { .. }
            | Error::ZeroQuaternion(_)
            | Error::NotARotation(_)
            | Error::InvalidDepth(_)
            | Error::DegenerateAlignment(_) => CliError::Internal(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::User(format!("{}: {e}", path.display()))
}

fn json_err(e: serde_json::Error) -> CliError {
    CliError::Internal(format!("serializing output: {e}"))
}

#[derive(Parser)]
#[command(name = "posesynth", version, about = "Relative pose regression trained on synthesized views")]
struct Cli {
    /// Worker threads; 1 guarantees bitwise reproducibility.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Flat key = value config file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural scene.
    Generate {
        /// biased-street, uniform-orbit or indoor.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        /// Square image size in pixels.
        #[arg(long)]
        size: Option<u32>,
    },
    /// Render a novel view of a record, optionally rotated in yaw.
    Synth {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        record: String,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        yaw_deg: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample training pairs and write them as images.
    Sample {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        policy: Option<Policy>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Yaw histogram and mode count of a split.
    AnalyzeBias {
        #[arg(long)]
        scene: PathBuf,
        /// train, test or all.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train a regressor and write its checkpoint and loss log.
    Train {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        policy: Option<Policy>,
        #[arg(long)]
        arch: Option<Arch>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Localize the test split with a checkpoint.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pick a random one of the 5 best retrievals instead of the best.
        #[arg(long)]
        random_neighbour: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment template: sanity-check, ablation or data-fraction.
    Experiment {
        name: String,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn require_seed(cfg: &RunConfig, flag: Option<u64>, cmd: &str) -> Result<u64, CliError> {
    let seed = cfg
        .pick(flag, "seed")?
        .ok_or_else(|| CliError::User(format!("--seed is required for {cmd}")))?;
    eprintln!("seed = {seed}");
    Ok(seed)
}

fn load(scene: &Path) -> Result<SceneDatabase, CliError> {
    load_scene(scene).map_err(|e| CliError::User(format!("--scene {}: {e}", scene.display())))
}

fn write_json(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn emit(out: Option<&Path>, name: &str, json: String, reports: &[LocalizationReport]) -> Result<(), CliError> {
    println!("{json}");
    eprint!("{}", format_table(reports));
    if let Some(dir) = out {
        write_json(&dir.join(format!("{name}.json")), &json)?;
        write_json(&dir.join(format!("{name}.txt")), &format_table(reports))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(CliError::User("--threads must be at least 1".into()));
    }
    if cli.threads > 1 {
        log::info!("the pipeline is single-threaded; --threads {} has no effect", cli.threads);
    }
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Generate {
            spec,
            seed,
            out,
            train,
            test,
            size,
        } => {
            let seed = require_seed(&cfg, seed, "generate")?;
            let mut s = SceneSpec::preset(&spec).map_err(|e| CliError::User(format!("--spec: {e}")))?;
            s = s.clone().with_counts(train.unwrap_or(s.train_count), test.unwrap_or(s.test_count));
            if let Some(px) = size {
                s = s.with_size(px, px);
            }
            let db = generate_scene(&s, seed)?;
            save_scene(&db, &out)?;
            println!(
                "{{\"records\": {}, \"train\": {}, \"test\": {}}}",
                db.len(),
                db.train_indices().len(),
                db.test_indices().len()
            );
        }
        Command::Synth {
            scene,
            record,
            yaw_deg,
            out,
        } => {
            let db = load(&scene)?;
            let seed = cfg.get::<u64>("seed")?.unwrap_or(0);
            let synth_cfg = cfg.experiment(seed, None)?.synth;
            let r = db.get(&record).map_err(|e| CliError::User(format!("--record: {e}")))?;
            let pose = Pose::new(perturb_rotation(&r.pose.rotation, yaw_deg.to_radians(), 0.0, 0.0), r.pose.center);
            let view = ViewSynthesizer::new(&db, synth_cfg)?.synthesize(&pose, &r.intrinsics)?;
            save_png(&out, &view.image)?;
            println!(
                "{{\"filled_fraction\": {}, \"sources\": {}}}",
                view.filled_fraction,
                serde_json::to_string(&view.sources_used).map_err(json_err)?
            );
        }
        Command::Sample {
            scene,
            seed,
            policy,
            count,
            out,
        } => {
            let seed = require_seed(&cfg, seed, "sample")?;
            let policy = cfg.pick(policy, "policy")?.unwrap_or(Policy::OutDist);
            let db = load(&scene)?;
            let ecfg = cfg.experiment(seed, None)?;
            let mut sampler = PairSampler::new(&db, ecfg.perturb, ecfg.synth)?;
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            let mut rows = Vec::new();
            for (n, q) in db.train_indices().into_iter().take(count).enumerate() {
                let mut rng = pair_rng(seed, 0, q);
                match sampler.sample(q, policy, false, &mut rng)? {
                    PairOutcome::Pair(p) => {
                        save_png(&out.join(format!("{n:04}_query.png")), &p.query.image)?;
                        save_png(&out.join(format!("{n:04}_neighbour.png")), &p.neighbour.image)?;
                        rows.push(serde_json::json!({
                            "index": n,
                            "query_id": p.query_id,
                            "query_synthetic": p.query.is_synthetic,
                            "neighbour_synthetic": p.neighbour.is_synthetic,
                            "neighbour_filled": p.neighbour.filled_fraction,
                            "target": p.target,
                        }));
                    }
                    PairOutcome::Skipped {
                        query_id,
                        filled_fraction,
                    } => rows.push(serde_json::json!({
                        "index": n, "query_id": query_id, "skipped": true, "filled_fraction": filled_fraction,
                    })),
                }
            }
            let json = serde_json::to_string_pretty(&rows).map_err(json_err)?;
            write_json(&out.join("pairs.json"), &json)?;
            println!("{json}");
        }
        Command::AnalyzeBias { scene, split } => {
            let db = load(&scene)?;
            let poses: Vec<Pose> = match split.as_str() {
                "all" => db.records().iter().map(|r| r.pose).collect(),
                s => {
                    let split: Split = s.parse().map_err(|e| CliError::User(format!("--split: {e}")))?;
                    db.indices(split).into_iter().map(|i| db.record(i).pose).collect()
                }
            };
            if poses.is_empty() {
                return Err(CliError::User(format!("--split {split}: no poses")));
            }
            let report = analyze_bias(&poses);
            println!("{}", serde_json::to_string_pretty(&report).map_err(json_err)?);
        }
        Command::Train {
            scene,
            seed,
            out,
            policy,
            arch,
            epochs,
        } => {
            let seed = require_seed(&cfg, seed, "train")?;
            let db = load(&scene)?;
            let mut ecfg = cfg.experiment(seed, epochs)?;
            if let Some(a) = arch {
                ecfg.regressor.arch = a;
            }
            let policy = cfg.pick(policy, "policy")?.unwrap_or(Policy::OutDist);
            let (model, report, filled) = train_policy(&db, policy, &ecfg)?;
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            save_checkpoint(&out.join("model.psrp"), &model)?;
            write_loss_csv(&out.join("loss.csv"), &report.log)?;
            let summary = serde_json::json!({
                "seed": seed,
                "policy": policy.as_str(),
                "config": ecfg,
                "filled": filled,
                "steps": report.steps,
                "first_loss": report.first_loss(),
                "final_loss": report.final_loss(),
                "parameters": model.param_count(),
            });
            let json = serde_json::to_string_pretty(&summary).map_err(json_err)?;
            write_json(&out.join("train.json"), &json)?;
            println!("{json}");
        }
        Command::Eval {
            scene,
            checkpoint,
            random_neighbour,
            seed,
            out,
        } => {
            let db = load(&scene)?;
            let model = load_checkpoint(&checkpoint)?;
            let neighbour = if random_neighbour {
                let seed = require_seed(&cfg, seed, "eval --random-neighbour")?;
                NeighbourMode::RandomTopK { k: 5, seed }
            } else {
                NeighbourMode::Top1
            };
            let eval_cfg = EvalConfig {
                neighbour,
                ..EvalConfig::default()
            };
            let report = evaluate(&db, &model, &checkpoint.display().to_string(), &eval_cfg)?;
            let json = report.to_json()?;
            if let Some(p) = out {
                write_json(&p, &json)?;
            }
            println!("{json}");
            eprint!("{}", format_table(std::slice::from_ref(&report)));
        }
        Command::Experiment {
            name,
            scene,
            seed,
            epochs,
            out,
        } => {
            let seed = require_seed(&cfg, seed, "experiment")?;
            let db = load(&scene)?;
            let ecfg = cfg.experiment(seed, epochs)?;
            match name.as_str() {
                "sanity-check" => {
                    let r = run_sanity_check(&db, &ecfg)?;
                    let json = serde_json::to_string_pretty(&r).map_err(json_err)?;
                    let rows: Vec<_> = r.reports().into_iter().cloned().collect();
                    emit(out.as_deref(), "sanity-check", json, &rows)?;
                }
                "ablation" => {
                    let mut cells: Vec<AblationCell> = [Policy::Real, Policy::InDist, Policy::OutDist]
                        .into_iter()
                        .map(|policy| AblationCell {
                            policy,
                            arch: Arch::Transformer,
                        })
                        .collect();
                    cells.push(AblationCell {
                        policy: Policy::OutDist,
                        arch: Arch::Mlp,
                    });
                    let rows = run_ablation(&db, &cells, &ecfg)?;
                    let json = serde_json::to_string_pretty(&rows).map_err(json_err)?;
                    emit(out.as_deref(), "ablation", json, &rows)?;
                }
                "data-fraction" => {
                    let mut rows = run_ablation(
                        &db,
                        &[AblationCell {
                            policy: Policy::Real,
                            arch: Arch::Transformer,
                        }],
                        &ecfg,
                    )?;
                    rows.extend(run_fraction_study(&db, &[0.1, 0.25, 0.5], &ecfg)?);
                    let json = serde_json::to_string_pretty(&rows).map_err(json_err)?;
                    emit(out.as_deref(), "data-fraction", json, &rows)?;
                }
                other => {
                    return Err(CliError::User(format!(
                        "unknown experiment {other:?}; expected sanity-check, ablation or data-fraction"
                    )))
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("POSESYNTH_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::User(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}

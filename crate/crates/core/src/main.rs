use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use leat::harness::dataset::{read_image, write_image};
use leat::harness::report::{self, CALIBRATION_FILE, LATENTS_FILE};
use leat::harness::{emit_reports, ExperimentConfig, Experiment, Scenario};
use leat::{Error, ObjectiveKind, Result};
use serde::Serialize;

/// Protective perturbations against two-stage face-manipulation models.
#[derive(Debug, Parser)]
#[command(name = "leat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON experiment config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the dataset and attack seeds.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Attack every image with every objective and evaluate all scenarios.
    Run {
        #[command(flatten)]
        common: Common,
        /// Restrict to these scenarios (repeatable).
        #[arg(long, value_parser = parse_scenario)]
        scenario: Vec<Scenario>,
    },
    /// Protect a single image and write the perturbation and protected image.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_objective, default_value = "leat")]
        objective: ObjectiveKind,
        /// Index into the configured dataset.
        #[arg(long, conflicts_with = "image")]
        image_index: Option<usize>,
        /// A PGM/PPM file to protect instead of a dataset image.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Metric distributions under small random noise.
    Calibrate {
        #[command(flatten)]
        common: Common,
    },
    /// 2-D PCA of clean versus disrupted latents.
    Project {
        #[command(flatten)]
        common: Common,
        /// Restrict to one objective.
        #[arg(long, value_parser = parse_objective)]
        objective: Option<ObjectiveKind>,
    },
}

fn parse_scenario(s: &str) -> std::result::Result<Scenario, String> {
    Scenario::parse(s).map_err(|e| e.to_string())
}

fn parse_objective(s: &str) -> std::result::Result<ObjectiveKind, String> {
    match s {
        "leat" => Ok(ObjectiveKind::Leat),
        "image_attack" => Ok(ObjectiveKind::ImageAttack),
        other => Err(format!("unknown objective `{other}` (expected leat or image_attack)")),
    }
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed_override {
        cfg.apply_seed_override(seed);
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    cfg.output_dir = out.clone();
    Ok((cfg, out))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

#[derive(Serialize)]
struct AttackOutput<'a> {
    objective: ObjectiveKind,
    source: String,
    epsilon: f64,
    linf: f64,
    seconds: f64,
    eta: &'a leat::Tensor,
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common, scenario } => {
            let (mut cfg, out) = load_config(&common)?;
            if !scenario.is_empty() {
                cfg.scenarios = scenario;
                cfg.validate()?;
            }
            let experiment = Experiment::new(cfg)?;
            let result = experiment.run()?;
            for path in emit_reports(&result, experiment.config(), &out)? {
                println!("wrote {}", path.display());
            }
            for s in &result.summaries {
                println!(
                    "{:<10} {:<12} avg_dsr={:.4} e_dsr={:.4}",
                    s.scenario.as_str(),
                    s.objective.as_str(),
                    s.dsr.avg_dsr,
                    s.dsr.e_dsr
                );
            }
        }
        Command::Attack {
            common,
            objective,
            image_index,
            image,
        } => {
            let (cfg, out) = load_config(&common)?;
            let shape = cfg.dataset.shape;
            let experiment = Experiment::new(cfg)?;
            let (x, index, source) = match image {
                Some(path) => (read_image(&path, shape)?, 0, path.display().to_string()),
                None => {
                    let i = image_index.unwrap_or(0);
                    let x = experiment
                        .images()
                        .get(i)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("image index {i} out of range")))?;
                    (x, i, format!("dataset[{i}]"))
                }
            };
            let p = experiment.perturb_image(objective, &x, index)?;
            ensure_dir(&out)?;
            let ext = if shape[2] == 1 { "pgm" } else { "ppm" };
            let eta_path = out.join("eta.json");
            report::write_json_file(
                &eta_path,
                &AttackOutput {
                    objective,
                    source,
                    epsilon: experiment.config().attack.epsilon,
                    linf: p.eta.max_abs(),
                    seconds: p.elapsed.as_secs_f64(),
                    eta: &p.eta,
                },
            )?;
            let protected_path = out.join(format!("protected.{ext}"));
            write_image(&protected_path, &x.add(&p.eta)?)?;
            println!("wrote {}", eta_path.display());
            println!("wrote {}", protected_path.display());
        }
        Command::Calibrate { common } => {
            let (cfg, out) = load_config(&common)?;
            let experiment = Experiment::new(cfg)?;
            let entries = experiment.calibrate()?;
            ensure_dir(&out)?;
            let path = out.join(CALIBRATION_FILE);
            report::write_calibration(&path, &entries)?;
            for e in &entries {
                println!(
                    "{:<16} null_success={:.4} l2_p99={:.3e} id_p99={:.3e} lpips_p99={:.3e}",
                    e.model, e.null_success_rate, e.l2_image.p99, e.id_loss.p99, e.perceptual.p99
                );
            }
            println!("wrote {}", path.display());
        }
        Command::Project { common, objective } => {
            let (mut cfg, out) = load_config(&common)?;
            if let Some(kind) = objective {
                cfg.objectives = vec![kind];
            }
            let experiment = Experiment::new(cfg)?;
            let mut latents = Vec::new();
            for &kind in &experiment.config().objectives {
                let (perturbations, _) = experiment.perturb_all(kind)?;
                latents.extend(experiment.project_latents(kind, &perturbations)?);
            }
            ensure_dir(&out)?;
            let path = out.join(LATENTS_FILE);
            report::write_latents_csv(&path, &latents)?;
            for p in &latents {
                println!("{:<12} {:<16} separation={:.4}", p.objective.as_str(), p.model, p.separation);
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gaussocc::engine::{
    class_names, evaluate, load_checkpoint, prepare_scenes, run_ablation, run_on, save_checkpoint,
    synthetic_scenes, AblationSpec, Dataset, ModelConfig, SceneInputs, Split, TrainState,
};
use gaussocc::gradcheck::run_suite;
use gaussocc::harness::{degrade, export_grid_text, read_scene, write_scene, DegradeConfig};
use gaussocc::harness::{Degradation, SyntheticScene};
use gaussocc::losses::MetricReport;
use gaussocc::scene::io::{read_grid, write_grid};
use gaussocc::scene::VoxelGrid;
use gaussocc::Mode;

#[derive(Parser)]
#[command(
    name = "gaussocc",
    version,
    about = "Gaussian semantic occupancy on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Small,
}

#[derive(Subcommand)]
enum Command {
    /// Write a run config with every field spelled out.
    Config {
        #[arg(long, value_enum, default_value = "default")]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic train and eval scenes of a config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Receives `train/scene-NNNN` and `eval/scene-NNNN` directories.
        #[arg(long)]
        out: PathBuf,
        /// Degrade every written scene.
        #[arg(long)]
        degrade: Option<Degradation>,
        #[arg(long, default_value_t = 1.0)]
        severity: f64,
    },
    /// Train, then write `checkpoint.ckpt`, `metrics.json`, `losses.txt`
    /// and the effective `config.toml` into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `optim.steps`.
        #[arg(long)]
        steps: Option<u64>,
        /// Scene directories written by `generate`; synthetic data otherwise.
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Record zero wall time so outputs are byte-identical across reruns.
        #[arg(long)]
        deterministic: bool,
    },
    /// Print the per-class IoU table, from a model or from predicted grids.
    Eval {
        /// Ground-truth scene directories.
        #[arg(long = "scene", required = true)]
        scenes: Vec<PathBuf>,
        /// Predicted grids, one per scene, instead of running a model.
        #[arg(long = "pred")]
        preds: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        include_empty: bool,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write the predicted voxel grid of one scene.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the ablation matrix and write `report.txt` and `rows.jsonl`.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// TOML matrix; the standard matrix otherwise.
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a `.vox` grid to `x y z label` lines.
    ExportGrid {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        include_empty: bool,
    },
    /// Run the finite-difference suite; exit 2 if any check fails.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        op_seeds: usize,
        #[arg(long, default_value_t = 3)]
        pipeline_seeds: usize,
    },
}

/// Distinguishes a failed check from an error.
#[derive(Debug)]
struct CheckFailed;

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("gradient check failed")
    }
}

impl std::error::Error for CheckFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.downcast_ref::<CheckFailed>().is_some()
                || e.chain()
                    .filter_map(|c| c.downcast_ref::<gaussocc::Error>())
                    .any(|g| g.is_numerical());
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Config { preset, out } => {
            let cfg = match preset {
                Preset::Default => ModelConfig::default(),
                Preset::Small => ModelConfig::small(),
            };
            cfg.save(&out)?;
            Ok(())
        }
        Command::Generate {
            config,
            out,
            degrade: mode,
            severity,
        } => {
            let cfg = ModelConfig::load(&config)?;
            for (split, name) in [(Split::Train, "train"), (Split::Eval, "eval")] {
                for (i, scene) in synthetic_scenes(&cfg, split)?.iter().enumerate() {
                    let scene = match mode {
                        Some(m) => {
                            degrade(scene, m, severity, &DegradeConfig::default(), scene.seed)?
                        }
                        None => scene.clone(),
                    };
                    write_scene(&out.join(name).join(format!("scene-{i:04}")), &scene)?;
                }
            }
            Ok(())
        }
        Command::Train {
            config,
            out,
            steps,
            scenes,
            resume,
            deterministic,
        } => {
            let mut cfg = ModelConfig::load(&config)?;
            if let Some(s) = steps {
                cfg.optim.steps = s;
            }
            let data = match scenes {
                Some(dir) => Dataset::from_scenes(
                    &cfg,
                    &read_scene_dir(&dir.join("train"))?,
                    read_scene_dir(&dir.join("eval"))?,
                )?,
                None => Dataset::from_scenes(
                    &cfg,
                    &synthetic_scenes(&cfg, Split::Train)?,
                    synthetic_scenes(&cfg, Split::Eval)?,
                )?,
            };
            let state = match resume {
                Some(path) => load_checkpoint(&path, &cfg)?,
                None => TrainState::new(&cfg)?,
            };
            let outcome = run_on(&cfg, &data, state, deterministic)?;
            fs::create_dir_all(&out)?;
            cfg.save(&out.join("config.toml"))?;
            save_checkpoint(&out.join("checkpoint.ckpt"), &outcome.state, &cfg)?;
            fs::write(out.join("metrics.json"), outcome.record.to_json() + "\n")?;
            let losses: String = outcome.losses.iter().map(|l| format!("{l:e}\n")).collect();
            fs::write(out.join("losses.txt"), losses)?;
            println!("{}", outcome.report);
            Ok(())
        }
        Command::Eval {
            scenes,
            preds,
            config,
            checkpoint,
            include_empty,
            json,
        } => {
            let gt = scenes
                .iter()
                .map(|d| read_scene(d))
                .collect::<gaussocc::Result<Vec<_>>>()?;
            let report = if !preds.is_empty() {
                if preds.len() != gt.len() {
                    bail!("{} predictions for {} scenes", preds.len(), gt.len());
                }
                let names = class_names(gt[0].labels.num_classes);
                let reports = gt
                    .iter()
                    .zip(&preds)
                    .map(|(s, p)| {
                        let pred = read_grid(p)?;
                        MetricReport::compute(
                            &pred.label_grid(),
                            &s.labels.label_grid(),
                            &names,
                            include_empty,
                        )
                    })
                    .collect::<gaussocc::Result<Vec<_>>>()?;
                MetricReport::mean(&reports)?
            } else {
                let (Some(config), Some(checkpoint)) = (config, checkpoint) else {
                    bail!("eval needs either --pred or both --config and --checkpoint");
                };
                let mut cfg = ModelConfig::load(&config)?;
                let state = load_checkpoint(&checkpoint, &cfg)?;
                cfg.data.include_empty = include_empty;
                evaluate(&state.model, &cfg, &prepare_scenes(&cfg, &gt)?)?
            };
            println!("{report}");
            if let Some(path) = json {
                fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
            }
            Ok(())
        }
        Command::Predict {
            config,
            checkpoint,
            scene,
            out,
        } => {
            let cfg = ModelConfig::load(&config)?;
            let state = load_checkpoint(&checkpoint, &cfg)?;
            let inputs = SceneInputs::from_scene(&read_scene(&scene)?, &cfg)?;
            let (grid, _) = gaussocc::engine::forward(
                &state.model,
                &cfg,
                &inputs,
                Mode::Eval,
                &mut gaussocc::Rng::new(0),
            )?;
            write_grid(&out, &grid)?;
            Ok(())
        }
        Command::Ablate {
            config,
            matrix,
            seeds,
            steps,
            out,
        } => {
            let base = ModelConfig::load(&config)?;
            let mut spec = match matrix {
                Some(path) => {
                    let text = fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    toml::from_str(&text).map_err(|e| gaussocc::Error::Config(e.to_string()))?
                }
                None => AblationSpec::default(),
            };
            if let Some(s) = seeds {
                spec.seeds = s;
            }
            if let Some(s) = steps {
                spec.steps = s;
            }
            let report = run_ablation(&spec, &base, |row| {
                eprintln!(
                    "{} seed {}: mIoU {:.4}",
                    row.variant, row.seed, row.record.miou
                );
            })?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("report.txt"), report.to_string())?;
            fs::write(out.join("rows.jsonl"), report.to_json_lines())?;
            print!("{report}");
            Ok(())
        }
        Command::ExportGrid {
            grid,
            out,
            include_empty,
        } => {
            let grid: VoxelGrid = read_grid(&grid)?;
            fs::write(out, export_grid_text(&grid, include_empty))?;
            Ok(())
        }
        Command::Gradcheck {
            op_seeds,
            pipeline_seeds,
        } => {
            let results = run_suite(op_seeds, pipeline_seeds)?;
            for r in &results {
                println!("{r}");
            }
            if results.iter().all(|r| r.passed()) {
                Ok(())
            } else {
                Err(CheckFailed.into())
            }
        }
    }
}

fn read_scene_dir(dir: &Path) -> Result<Vec<SyntheticScene>> {
    let mut dirs = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| Ok(e?.path()))
        .collect::<Result<Vec<_>>>()?;
    dirs.retain(|p| p.is_dir());
    dirs.sort();
    if dirs.is_empty() {
        bail!("no scenes in {}", dir.display());
    }
    Ok(dirs
        .iter()
        .map(|d| read_scene(d))
        .collect::<gaussocc::Result<Vec<_>>>()?)
}

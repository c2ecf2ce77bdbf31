use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use transnerf::harness::eval::{source_sets, surrounding_views};
use transnerf::harness::protocol::rank_by_pose;
use transnerf::harness::{evaluate, evaluate_oracle, train_with, TrainConfig};
use transnerf::model::{FieldModel, SourceView};
use transnerf::renderer::{render_view, Sampling};
use transnerf::scenes::{generate_dataset, load_dataset, Dataset, ORACLE_SAMPLES, SCENE_NAMES};
use transnerf::Camera64;

#[derive(Parser)]
#[command(name = "transnerf", version, about = "Attention-conditioned radiance fields on toy scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural scene into a dataset directory.
    GenScene {
        /// One of: sphere, two-blobs, box-grid, tinted-hemisphere.
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 30)]
        views: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image width and height in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one dataset view from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        view: usize,
        /// s1..s4 picks a ranked ten-view set; auto uses the nearest train
        /// views (up to ten).
        #[arg(long, default_value = "auto")]
        sources: String,
        /// Samples per ray; defaults to the checkpoint's training value.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score test views for each ranked source set.
    Eval {
        /// Required unless --oracle is given.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 3)]
        sets: usize,
        /// Evaluate the analytic scene instead of a model.
        #[arg(long)]
        oracle: bool,
        /// Report path stem; `.txt` and `.json` are written.
        #[arg(long)]
        out: PathBuf,
    },
}

fn pick_sources(dataset: &Dataset, view: usize, which: &str) -> Result<Vec<usize>> {
    if which == "auto" {
        let target = &dataset.views[view].camera;
        let pool = surrounding_views(dataset, target);
        if pool.is_empty() {
            bail!("dataset has no train views to condition on");
        }
        let cams: Vec<Camera64> = pool.iter().map(|&i| dataset.views[i].camera.clone()).collect();
        return Ok(rank_by_pose(target, &cams, 1.0).into_iter().take(10).map(|i| pool[i]).collect());
    }
    let k: usize = which
        .strip_prefix('s')
        .or_else(|| which.strip_prefix('S'))
        .and_then(|n| n.parse().ok())
        .filter(|k| (1..=4).contains(k))
        .with_context(|| format!("--sources must be s1, s2, s3, s4 or auto, got {which:?}"))?;
    let mut sets = source_sets(dataset, view, k.max(3), 1.0)?;
    Ok(sets.swap_remove(k - 1))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScene {
            spec,
            views,
            seed,
            size,
            out,
        } => {
            if !SCENE_NAMES.contains(&spec.as_str()) {
                bail!("unknown scene {spec:?}; choose one of {}", SCENE_NAMES.join(", "));
            }
            let ds = generate_dataset(&spec, views, size, seed, &out)?;
            println!("wrote {} views of {} to {}", ds.views.len(), spec, out.display());
        }
        Command::Train { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let every = (cfg.iterations / 20).max(1);
            let outcome = train_with(&cfg, &out, |k, loss| {
                if k % every == 0 || k + 1 == cfg.iterations {
                    eprintln!("iter {k:>6}  loss {loss:.6}");
                }
            })?;
            println!(
                "checkpoint {} written to {}",
                &outcome.meta.params_sha256[..12],
                out.display()
            );
        }
        Command::Render {
            checkpoint,
            dataset,
            view,
            sources,
            samples,
            out,
        } => {
            let (model, meta) = FieldModel::<f64>::load_checkpoint(&checkpoint)?;
            let ds = load_dataset(&dataset)?;
            if view >= ds.views.len() {
                bail!("view {view} out of range, dataset has {} views", ds.views.len());
            }
            let picks = pick_sources(&ds, view, &sources)?;
            let srcs = picks
                .iter()
                .map(|&i| SourceView::new(ds.views[i].image.clone(), ds.views[i].camera.clone()))
                .collect::<transnerf::Result<Vec<_>>>()?;
            let n = samples.unwrap_or(meta.samples_per_ray);
            let img = render_view(&model, &srcs, &ds.views[view].camera, n, Sampling::Midpoint)?;
            img.save_png(&out)?;
            println!("rendered view {view} from sources {picks:?} to {}", out.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            sets,
            oracle,
            out,
        } => {
            let ds = load_dataset(&dataset)?;
            let report = match (oracle, checkpoint) {
                (true, _) => evaluate_oracle(&ds, sets, ORACLE_SAMPLES)?,
                (false, Some(dir)) => {
                    let (model, meta) = FieldModel::<f64>::load_checkpoint(&dir)?;
                    evaluate(&model, &meta, &ds, sets)?
                }
                (false, None) => bail!("eval needs --checkpoint or --oracle"),
            };
            report.save(&out)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

//! `orgpose` — synthesize data, train, evaluate, gradient-check and ablate
//! the relation-graph pose regressor.
//!
//! Every command prints the seed it runs with, so logs are attributable.
//! Exit codes: 0 success, 2 configuration problem (including unknown
//! flags), 3 missing input file or directory, 4 incompatible checkpoint,
//! 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Training allocates and frees a full computation tape every step; the
/// system allocator returns those pages to the kernel each time, which
/// costs a third of the wall clock in page faults. mimalloc keeps them.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

use orgpose_core::config::RunConfig;
use orgpose_core::dataio::{read_dataset, write_dataset, Dataset, Split};
use orgpose_core::error::Error;
use orgpose_core::model::ablate::run_ablation;
use orgpose_core::model::eval::{evaluate, write_metrics, write_trajectory_csv};
use orgpose_core::model::gradcheck::{run_gradcheck, GradCheckOptions};
use orgpose_core::model::train::train;
use orgpose_core::model::{frame_inputs, PoseModel};
use orgpose_core::numerics::{AdamState, Checkpoint};
use orgpose_core::synth::generate_dataset;

#[derive(Parser)]
#[command(name = "orgpose", version, about = "Object-relation-graph camera pose regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        /// Output dataset directory (manifest.json, frames.jsonl, scene.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset's train split.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Output directory for checkpoints and the epoch log.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to evaluate on.
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Directory for metrics.json and trajectory.csv (optional).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train and evaluate single-factor model variants.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory for ablation.csv / ablation.txt (optional).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::MissingInput(_) => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

/// Loads the config (or defaults) and applies the seed override.
fn load_config(common: &CommonArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, Error> {
    let dir = cfg.data.dataset_dir.as_ref().ok_or_else(|| Error::Config {
        field: "data.dataset_dir".into(),
        message: "required for this command".into(),
    })?;
    read_dataset(dir)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { common, out } => cmd_synth(&common, &out),
        Command::Train {
            common,
            out,
            checkpoint,
        } => cmd_train(&common, &out, checkpoint.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            split,
            out,
        } => cmd_eval(&common, &checkpoint, split.into(), out.as_deref()),
        Command::Gradcheck { common } => cmd_gradcheck(&common),
        Command::Ablate { common, out } => cmd_ablate(&common, out.as_deref()),
    }
}

fn cmd_synth(common: &CommonArgs, out: &Path) -> Result<(), Error> {
    let cfg = load_config(common)?;
    println!("seed: {}", cfg.seed);
    let data = generate_dataset(&cfg.synth, cfg.seed)?;
    write_dataset(out, &data.manifest, &data.frames)?;
    let scene = serde_json::to_string_pretty(&data.scene)
        .map_err(|e| Error::Internal(format!("scene serialization: {e}")))?;
    std::fs::write(out.join("scene.json"), scene + "\n")?;
    println!(
        "wrote {} ({} train frames, {} test frames, {} objects)",
        out.display(),
        data.split_len("train"),
        data.split_len("test"),
        data.scene.objects.len()
    );
    Ok(())
}

fn cmd_train(common: &CommonArgs, out: &Path, checkpoint: Option<&Path>) -> Result<(), Error> {
    let mut cfg = load_config(common)?;
    let resume = match checkpoint {
        Some(path) => Some(Checkpoint::load(path)?),
        None => None,
    };
    // A resumed run continues the original seed's random streams unless
    // explicitly overridden.
    if let Some(ck) = &resume {
        if common.seed.is_none() {
            cfg.seed = ck.seed;
        }
    }
    println!("seed: {}", cfg.seed);
    let ds = load_dataset(&cfg)?;
    let artifacts = train(&ds, &cfg, Some(out), resume.as_ref())?;
    if let Some(last) = artifacts.logs.last() {
        println!(
            "epoch {}: loss {:.4}, beta {:.3}, gamma {:.3}",
            last.epoch, last.loss, last.beta, last.gamma
        );
    }
    if let Some(path) = &artifacts.checkpoint_path {
        println!("checkpoint: {}", path.display());
    }
    Ok(())
}

fn cmd_eval(
    common: &CommonArgs,
    checkpoint: &Path,
    split: Split,
    out: Option<&Path>,
) -> Result<(), Error> {
    let ck = Checkpoint::load(checkpoint)?;
    // The embedded config reproduces the trained architecture; an explicit
    // --config overrides it (e.g. to point at another dataset copy).
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::from_value(ck.config.clone())?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    println!("seed: {}", cfg.seed);
    let ds = load_dataset(&cfg)?;
    let image = (ds.manifest.intrinsics.width, ds.manifest.intrinsics.height);
    let mut model = PoseModel::new(&cfg, ds.manifest.category_count(), image)?;
    let mut adam = AdamState::new(&model.params);
    ck.apply(&mut model.params, &mut adam)?;
    let items = frame_inputs(&ds, split, cfg.org.keep_ratio, cfg.seed)?;
    let report = evaluate(&mut model, &items, cfg.batch_size())?;
    let s = &report.summary;
    println!(
        "frames: {}\nmedian translation error: {:.4} m\nmean translation error: {:.4} m\n\
         median rotation error: {:.3} deg\nmean rotation error: {:.3} deg",
        s.count, s.median_t_m, s.mean_t_m, s.median_r_deg, s.mean_r_deg
    );
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_metrics(&dir.join("metrics.json"), s)?;
        write_trajectory_csv(&dir.join("trajectory.csv"), &report.frames)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_gradcheck(common: &CommonArgs) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let opts = GradCheckOptions {
        seed: common.seed.unwrap_or(cfg.seed),
        ..GradCheckOptions::default()
    };
    println!("seed: {}", opts.seed);
    let report = run_gradcheck(&opts)?;
    for g in &report.groups {
        println!(
            "  {:<24} max rel err {:.3e}  [{} elements]",
            g.name, g.max_rel_err, g.elements
        );
    }
    if report.passed {
        println!(
            "gradient check: PASS (max {:.3e} <= {:.1e}, {:.1} s)",
            report.max_rel_err, report.tolerance, report.seconds
        );
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "gradient check failed: max rel err {:.3e} > {:.1e}",
            report.max_rel_err, report.tolerance
        )))
    }
}

fn cmd_ablate(common: &CommonArgs, out: Option<&Path>) -> Result<(), Error> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.ablate.seeds = vec![seed];
    }
    println!("seeds: {:?}", cfg.ablate.seeds);
    let ds = load_dataset(&cfg)?;
    let rows = run_ablation(&ds, &cfg, out)?;
    print!("{}", orgpose_core::model::ablate::render_table(&rows));
    if let Some(dir) = out {
        println!("wrote {}", dir.display());
    }
    Ok(())
}

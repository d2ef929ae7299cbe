use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dgforge::commands::{self, ExportFormat, OutputLock};
use dgforge::config::RunConfig;
use dgforge::parallel::{init_threads, Exec};
use dgforge::sampler::GuidanceMode;
use dgforge::{Error, Result};

/// Physics-guided diffusion for dexterous grasps on toy objects.
///
/// Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
#[derive(Debug, Parser)]
#[command(name = "dgforge", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; missing keys take their defaults
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides `seed` and `train.seed` in the configuration
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory [default: the command name, e.g. ./train]
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for batch parallelism [default: all cores]
    #[arg(long, global = true, env = "DGFORGE_THREADS", value_name = "N")]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct DatasetArg {
    /// Dataset directory [default: paths.dataset from the configuration, "data"]
    #[arg(long, value_name = "DIR")]
    dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PosesArg {
    /// Line-delimited JSON poses [default: paths.poses, "samples/poses.jsonl"]
    #[arg(long, value_name = "PATH")]
    poses: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate toy objects and reference grasps
    GenToy,
    /// Train a denoiser on the training split
    Train {
        #[command(flatten)]
        data: DatasetArg,
        /// Continue from this checkpoint up to train.iterations
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Draw grasp poses for dataset objects
    Sample {
        #[command(flatten)]
        data: DatasetArg,
        /// Checkpoint to sample from [default: paths.checkpoint, "run/checkpoint.json"]
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Object id to sample for; repeatable [default: every object of sample.split, "test"]
        #[arg(long = "object", value_name = "ID")]
        objects: Vec<String>,
        /// Poses per object [default: sample.count, 16]
        #[arg(short = 'n', long, value_name = "N")]
        count: Option<usize>,
        /// Guidance mode [default: guidance.mode, none]
        #[arg(long, value_enum)]
        mode: Option<GuidanceMode>,
    },
    /// Score poses: penetration, success labels, diversity
    Eval {
        #[command(flatten)]
        poses: PosesArg,
        #[command(flatten)]
        data: DatasetArg,
    },
    /// Keep poses that pass the quality filter and log the rest
    Filter {
        #[command(flatten)]
        poses: PosesArg,
        #[command(flatten)]
        data: DatasetArg,
    },
    /// Write hand and object meshes for each pose
    Export {
        #[command(flatten)]
        poses: PosesArg,
        #[command(flatten)]
        data: DatasetArg,
        /// Mesh format
        #[arg(long, value_enum, default_value_t = ExportFormat::Ply)]
        format: ExportFormat,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenToy => "gen-toy",
            Command::Train { .. } => "train",
            Command::Sample { .. } => "sample",
            Command::Eval { .. } => "eval",
            Command::Filter { .. } => "filter",
            Command::Export { .. } => "export",
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<String> {
    let mut cfg = load_config(&cli.common)?;
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("DGFORGE_THREADS must be at least 1".into()));
        }
        init_threads(n);
    }
    let exec = Exec::available();
    let out = cli.common.out.clone().unwrap_or_else(|| PathBuf::from(cli.command.name()));
    let paths = cfg.paths.clone();
    let dataset = |d: &DatasetArg| d.dataset.clone().unwrap_or_else(|| paths.dataset.clone());
    let poses = |p: &PosesArg| p.poses.clone().unwrap_or_else(|| paths.poses.clone());
    let summary = match &cli.command {
        Command::GenToy => {
            let _lock = OutputLock::acquire(&out)?;
            let m = commands::gen_toy(&cfg, &out, exec)?;
            format!("{} objects, {} grasps written to {}", m.objects.len(), m.record_count, out.display())
        }
        Command::Train { data, resume } => {
            let ds = dataset(data);
            let _lock = OutputLock::acquire(&out)?;
            let s = commands::train_cmd(&cfg, &ds, resume.as_deref(), &out, exec)?;
            format!("trained to iteration {}, checkpoint sha256 {}", s.iterations, s.checkpoint_sha256)
        }
        Command::Sample {
            data,
            checkpoint,
            objects,
            count,
            mode,
        } => {
            let ds = dataset(data);
            let ck = checkpoint.clone().unwrap_or_else(|| paths.checkpoint.clone());
            if !objects.is_empty() {
                cfg.sample.objects = objects.clone();
            }
            if let Some(n) = count {
                cfg.sample.count = *n;
            }
            if let Some(m) = mode {
                cfg.guidance.mode = *m;
            }
            let _lock = OutputLock::acquire(&out)?;
            let r = commands::sample_cmd(&cfg, &ck, &ds, &out, exec)?;
            format!("{} poses written to {}", r.len(), out.join(commands::POSES_FILE).display())
        }
        Command::Eval { poses: p, data } => {
            let (p, ds) = (poses(p), dataset(data));
            let _lock = OutputLock::acquire(&out)?;
            let s = commands::eval_cmd(&cfg, &p, &ds, &out, exec)?;
            serde_json::to_string(&s)?
        }
        Command::Filter { poses: p, data } => {
            let (p, ds) = (poses(p), dataset(data));
            let _lock = OutputLock::acquire(&out)?;
            let s = commands::filter_cmd(&cfg, &p, &ds, &out, exec)?;
            serde_json::to_string(&s)?
        }
        Command::Export { poses: p, data, format } => {
            let (p, ds) = (poses(p), dataset(data));
            let _lock = OutputLock::acquire(&out)?;
            let files = commands::export_cmd(&cfg, &p, &ds, *format, &out, exec)?;
            format!("{} files written to {}", files.len(), out.display())
        }
    };
    Ok(summary)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

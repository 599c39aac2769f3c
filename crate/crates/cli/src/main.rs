use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use emavio::checkpoint::{self, Checkpoint};
use emavio::data::{generate_dataset, read_dataset, write_dataset, write_kitti_poses, DataSpec};
use emavio::eval::{accumulate_trajectory, emit_report, evaluate};
use emavio::gradcheck::run_suite;
use emavio::model::Ledger;
use emavio::train::{Trainer, CHECKPOINT_FILE, LOSS_LOG};
use emavio::{Config, Error, FusionMode, Precision, Result};

#[derive(Parser)]
#[command(name = "emavio", version, about = "EMA-VIO training and evaluation")]
struct Cli {
    /// Overrides the seed from the config or data spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the numeric precision from the config.
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, writing loss.csv and checkpoint.bin into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint and write a JSON report plus per-length CSV.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write predicted trajectories in KITTI pose format.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output file; with several sequences, `<stem>_<id>.<ext>` per sequence.
        #[arg(long)]
        poses_out: PathBuf,
    },
    /// Finite-difference gradient check of every block.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Parameter and MAC counts per block.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
}

const GRADCHECK_FAILED: u8 = 1;

fn load_config(cli: &Cli, path: &Path) -> Result<Config> {
    let mut cfg = Config::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = cli.precision {
        cfg.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    Ok(cfg)
}

fn synth(cli: &Cli, spec: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec).map_err(|e| Error::Io {
        path: spec.to_path_buf(),
        source: e,
    })?;
    let mut spec = DataSpec::from_toml_str(&text)?;
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let samples = generate_dataset(&spec)?;
    let manifest = write_dataset(out, Some(&spec), &samples)?;
    println!(
        "wrote {} sequences of {} frames to {}",
        manifest.sequences.len(),
        spec.frames,
        out.display()
    );
    Ok(())
}

fn train(cli: &Cli, config: &Path, data: &Path, out: &Path, resume: bool) -> Result<()> {
    let cfg = load_config(cli, config)?;
    let (_, samples) = read_dataset(data)?;
    let mut trainer = if resume {
        Trainer::resume(&cfg, &out.join(CHECKPOINT_FILE))?
    } else {
        Trainer::new(&cfg)?
    };
    let start = trainer.step;
    let rows = trainer.run(&samples, out)?;
    match rows.last() {
        Some(last) => println!(
            "steps {start}..{}: loss {:.6} -> {:.6}",
            trainer.step,
            rows[0].total,
            last.total
        ),
        None => println!("already at step {}; nothing to do", trainer.step),
    }
    println!("log: {}", out.join(LOSS_LOG).display());
    println!("checkpoint: {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn eval(cli: &Cli, config: &Path, ckpt: &Path, data: &Path, report: &Path) -> Result<()> {
    let cfg = load_config(cli, config)?;
    let Checkpoint { model, step } = checkpoint::load_matching(ckpt, &cfg.model)?;
    let (_, samples) = read_dataset(data)?;
    let echo = serde_json::to_value(&cfg).map_err(|e| Error::Contract(e.to_string()))?;
    let r = evaluate(&model, &samples, &cfg.eval, echo)?;
    emit_report(&r, report)?;
    println!("checkpoint step {step}, {} sequences, {} frames", r.sequence_count, r.frame_count);
    println!("{:>10} {:>12} {:>16} {:>9}", "length_m", "t_rel_%", "r_rel_deg/100m", "segments");
    for row in r.rows() {
        println!(
            "{:>10} {:>12.4} {:>16.4} {:>9}",
            row.length_m, row.t_rel_percent, row.r_rel_deg_per_100m, row.segments
        );
    }
    println!("t_rel avg {:.4}%  r_rel avg {:.4} deg/100m  hpe {:.4} m", r.t_rel_avg, r.r_rel_avg, r.hpe_m);
    println!("report: {}", report.display());
    Ok(())
}

fn infer(ckpt: &Path, data: &Path, poses_out: &Path) -> Result<()> {
    let model = checkpoint::load(ckpt)?.model;
    let (_, samples) = read_dataset(data)?;
    for sample in &samples {
        let rel = model.predict(sample)?;
        let poses = accumulate_trajectory(&rel, &sample.poses[0]);
        let path = if samples.len() == 1 {
            poses_out.to_path_buf()
        } else {
            let stem = poses_out.file_stem().unwrap_or_default().to_string_lossy();
            let name = match poses_out.extension() {
                Some(ext) => format!("{stem}_{:03}.{}", sample.id, ext.to_string_lossy()),
                None => format!("{stem}_{:03}", sample.id),
            };
            poses_out.with_file_name(name)
        };
        write_kitti_poses(&path, &poses)?;
        println!("{} poses -> {}", poses.len(), path.display());
    }
    Ok(())
}

fn gradcheck(cli: &Cli, config: &Path) -> Result<bool> {
    let cfg = load_config(cli, config)?;
    let results = run_suite(&cfg, None)?;
    println!("{:<18} {:>12} {:>10} {:>7}  worst parameter", "block", "rel_error", "tolerance", "status");
    for r in &results {
        println!(
            "{:<18} {:>12.3e} {:>10.0e} {:>7}  {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" },
            r.worst_param
        );
    }
    Ok(results.iter().all(|r| r.passed()))
}

fn params(cli: &Cli, config: &Path) -> Result<()> {
    let cfg = load_config(cli, config)?;
    let modes = [FusionMode::Ema, FusionMode::SelfAttention, FusionMode::Lstm];
    let ledgers: Vec<Ledger> = modes
        .iter()
        .map(|&mode| {
            let mut m = cfg.model.clone();
            m.fusion = mode;
            Ledger::for_config(&m)
        })
        .collect();
    print!("{:<10}", "block");
    for mode in modes {
        let mark = if mode == cfg.model.fusion { "*" } else { "" };
        print!(" {:>24}", format!("{}{mark} params/MACs", mode.as_str()));
    }
    println!();
    for (i, block) in ledgers[0].blocks.iter().enumerate() {
        print!("{:<10}", block.name);
        for l in &ledgers {
            print!(" {:>24}", format!("{} / {}", l.blocks[i].params, l.blocks[i].macs));
        }
        println!();
    }
    print!("{:<10}", "total");
    for l in &ledgers {
        print!(" {:>24}", format!("{} / {}", l.total_params(), l.total_macs()));
    }
    println!();
    println!("* configured fusion mode; MACs per frame pair");
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Synth { spec, out } => synth(cli, spec, out)?,
        Command::Train { config, data, out, resume } => train(cli, config, data, out, *resume)?,
        Command::Eval { config, ckpt, data, report } => eval(cli, config, ckpt, data, report)?,
        Command::Infer { ckpt, data, poses_out } => infer(ckpt, data, poses_out)?,
        Command::Gradcheck { config } => {
            if !gradcheck(cli, config)? {
                eprintln!("error: gradient check failed");
                return Ok(ExitCode::from(GRADCHECK_FAILED));
            }
        }
        Command::Params { config } => params(cli, config)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

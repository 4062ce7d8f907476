//! `unext`: synthetic data, training, evaluation, prediction and
//! verification commands.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 input/output
//! error (missing or unreadable files, corrupt checkpoints, bad datasets),
//! 3 verification failure (gradient check mismatch, non-finite loss or
//! gradient).

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unext_core::checkpoint::Checkpoint;
use unext_core::config::{RunConfigFile, RESOLVED_NAME};
use unext_core::data::{self, SynthSpec};
use unext_core::glue::pca_rgb;
use unext_core::gradcheck::{self, Fault, GradcheckConfig};
use unext_core::metrics::{evaluate_dataset, MetricReport};
use unext_core::model::SegModel;
use unext_core::trainer::{evaluate_samples, LogRow, Trainer};
use unext_core::{DType, Error, Scalar};

#[derive(Parser)]
#[command(name = "unext", version, about = "Dual-resolution dual-encoder segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic shape dataset (images/, masks/, manifest.json).
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of image/mask pairs.
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train a model; writes train_log.csv, checkpoints and config.resolved.json.
    Train {
        /// JSON run configuration (`preset`, `model`, `train`, `data`).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root with images/ and masks/ (overrides `data` in the config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from; step numbering continues.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps in total.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Score predictions against ground truth; writes report.json and report.csv.
    Eval {
        /// Directory of predicted masks (paired with --gt-dir by file stem).
        #[arg(long, requires = "gt_dir", conflicts_with_all = ["checkpoint", "data"])]
        pred_dir: Option<PathBuf>,
        /// Directory of ground-truth masks.
        #[arg(long)]
        gt_dir: Option<PathBuf>,
        /// Checkpoint to predict with (together with --data).
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        /// Dataset root with images/ and masks/.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Dataset label used in the report.
        #[arg(long, default_value = "dataset")]
        name: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Also write predicted masks to <out>/pred (checkpoint mode).
        #[arg(long)]
        save_predictions: bool,
    },
    /// Predict a probability mask (8-bit PNG) for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare backprop gradients with central finite differences (64-bit).
    Gradcheck {
        /// JSON gradient-check configuration; the tiny model by default.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for gradcheck.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Test fixture: scale the analytic gradient of GROUP by 1.01.
        #[arg(long, value_name = "GROUP", hide = true)]
        inject_fault: Option<String>,
    },
    /// Render the top-3 PCA projection of the auxiliary features as RGB.
    PcaVis {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },
}

/// A command failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. }
            | Error::Image { .. }
            | Error::Checkpoint(_)
            | Error::CheckpointVersion { .. }
            | Error::TensorShape { .. }
            | Error::MissingTensors(_)
            | Error::Dataset(_) => 2,
            Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) => 3,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Error::io(path, e).into()
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn read_image(path: &Path) -> Result<image::RgbImage, Failure> {
    Ok(image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8())
}

/// Rebuilds the model stored in a checkpoint.
fn load_model<T: Scalar>(path: &Path) -> Result<(SegModel<T>, Checkpoint), Failure> {
    let ck = Checkpoint::load(path)?;
    let mut model = SegModel::<T>::new(&ck.model_config()?)?;
    ck.restore(&mut model, None, &[])?;
    Ok((model, ck))
}

fn synth(out: &Path, n: usize, seed: u64, size: usize) -> CmdResult {
    if n == 0 || size < 8 {
        return Err(Error::Argument("--n must be at least 1 and --size at least 8".into()).into());
    }
    let manifest = data::generate_synthetic(&SynthSpec::new(n, size, seed), out)?;
    log::info!("wrote {} pairs to {}", manifest.samples.len(), out.display());
    Ok(())
}

fn train(
    config: Option<&Path>,
    data_root: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    max_steps: Option<usize>,
) -> CmdResult {
    let mut cfg = match config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    if let Some(root) = data_root {
        cfg.data = unext_core::config::DataPaths {
            root: Some(root.to_path_buf()),
            ..Default::default()
        };
    }
    let resume = resume.map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resume {
        let stored = ck.model_config()?;
        if stored != cfg.model {
            log::warn!("model section differs from the checkpoint; the checkpoint's model is used");
            cfg.model = stored;
        }
    }
    let (images, masks) = cfg
        .data
        .dirs()?
        .ok_or_else(|| Error::Config("no dataset: pass --data or set `data` in the config".into()))?;
    let report = data::load_dataset(&images, &masks)?;
    for (stem, reason) in &report.rejected {
        log::warn!("skipped {stem}: {reason}");
    }
    create_dir(out)?;
    cfg.write_resolved(out)?;
    match cfg.train.dtype {
        DType::F32 => train_typed::<f32>(&cfg, &report.samples, out, resume.as_ref(), max_steps),
        DType::F64 => train_typed::<f64>(&cfg, &report.samples, out, resume.as_ref(), max_steps),
    }
}

fn train_typed<T: Scalar>(
    cfg: &RunConfigFile,
    samples: &[data::Sample],
    out: &Path,
    resume: Option<&Checkpoint>,
    max_steps: Option<usize>,
) -> CmdResult {
    let mut trainer = match resume {
        Some(ck) => Trainer::<T>::resume(ck, &cfg.train)?,
        None => Trainer::<T>::new(&cfg.model, &cfg.train)?,
    };
    let log_path = out.join("train_log.csv");
    let mut log_file = if resume.is_some() && log_path.exists() {
        OpenOptions::new().append(true).open(&log_path).map_err(|e| io_err(&log_path, e))?
    } else {
        let mut f = File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
        writeln!(f, "{}", LogRow::CSV_HEADER).map_err(|e| io_err(&log_path, e))?;
        f
    };
    let ckpt_dir = out.join("checkpoints");
    if cfg.train.checkpoint_every > 0 {
        create_dir(&ckpt_dir)?;
    }
    let total = cfg.train.total_steps(samples.len());
    log::info!("training {} samples for {} steps ({} done)", samples.len(), total, trainer.step_count());
    let every = cfg.train.checkpoint_every;
    trainer.run(samples, max_steps, |t, row| {
        writeln!(log_file, "{}", row.csv()).map_err(|e| Error::io(&log_path, e))?;
        if every > 0 && row.step % every == 0 {
            t.checkpoint().save(&ckpt_dir.join(format!("step_{:06}.ckpt", row.step)))?;
        }
        if row.step % 10 == 0 || row.step == total {
            log::info!("step {}/{} lr {:.3e} loss {:.4}", row.step, total, row.lr, row.total);
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&out.join("final.ckpt"))?;
    Ok(())
}

fn write_report(out: &Path, report: &MetricReport) -> CmdResult {
    let json = serde_json::to_string_pretty(report).map_err(Error::from)? + "\n";
    write_file(&out.join("report.json"), json)?;
    let csv = format!("{}\n{}\n", MetricReport::csv_header(true), report.csv_row(true));
    write_file(&out.join("report.csv"), csv)?;
    println!("{}\n{}", MetricReport::csv_header(true), report.csv_row(true));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    pred_dir: Option<&Path>,
    gt_dir: Option<&Path>,
    checkpoint: Option<&Path>,
    data_root: Option<&Path>,
    name: &str,
    out: &Path,
    save_predictions: bool,
) -> CmdResult {
    match (pred_dir, gt_dir, checkpoint, data_root) {
        (Some(p), Some(g), None, None) => {
            let report = evaluate_dataset(p, g, name)?;
            create_dir(out)?;
            let echo = serde_json::json!({ "pred_dir": p, "gt_dir": g, "name": name });
            write_file(&out.join(RESOLVED_NAME), serde_json::to_string_pretty(&echo).map_err(Error::from)? + "\n")?;
            write_report(out, &report)
        }
        (None, None, Some(c), Some(d)) => {
            let ck = Checkpoint::load(c)?;
            match ck.dtype {
                DType::F32 => eval_checkpoint::<f32>(c, d, name, out, save_predictions),
                DType::F64 => eval_checkpoint::<f64>(c, d, name, out, save_predictions),
            }
        }
        _ => Err(Error::Argument("eval needs either --pred-dir and --gt-dir, or --checkpoint and --data".into()).into()),
    }
}

fn eval_checkpoint<T: Scalar>(ckpt: &Path, root: &Path, name: &str, out: &Path, save_predictions: bool) -> CmdResult {
    let (mut model, ck) = load_model::<T>(ckpt)?;
    let loaded = data::load_dataset_root(root)?;
    let records = evaluate_samples(&mut model, &loaded.samples)?;
    create_dir(out)?;
    let echo: serde_json::Value = serde_json::from_str(&ck.config).map_err(Error::from)?;
    write_file(&out.join(RESOLVED_NAME), serde_json::to_string_pretty(&echo).map_err(Error::from)? + "\n")?;
    if save_predictions {
        let dir = out.join("pred");
        create_dir(&dir)?;
        for s in &loaded.samples {
            data::save_png(&model.predict(&s.image)?.to_gray(), &dir.join(format!("{}.png", s.id)))?;
        }
    }
    write_report(out, &MetricReport::from_records(name, records, loaded.unmatched))
}

fn predict(ckpt: &Path, image: &Path, out: &Path) -> CmdResult {
    let img = read_image(image)?;
    let ck = Checkpoint::load(ckpt)?;
    let gray = match ck.dtype {
        DType::F32 => load_model::<f32>(ckpt)?.0.predict(&img)?.to_gray(),
        DType::F64 => load_model::<f64>(ckpt)?.0.predict(&img)?.to_gray(),
    };
    data::save_png(&gray, out)?;
    Ok(())
}

fn gradcheck_cmd(config: Option<&Path>, out: Option<&Path>, fault: Option<String>) -> CmdResult {
    let cfg: GradcheckConfig = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => GradcheckConfig::default(),
    };
    let fault = fault.map(|group| Fault { group, scale: 1.01 });
    let report = gradcheck::run(&cfg, fault.as_ref())?;
    print!("{}", report.table());
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join(RESOLVED_NAME), serde_json::to_string_pretty(&cfg).map_err(Error::from)? + "\n")?;
        write_file(&dir.join("gradcheck.json"), serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n")?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: format!(
                "gradient check failed for group(s): {}",
                report.failing_groups().join(", ")
            ),
        })
    }
}

fn pca_vis(ckpt: &Path, image: &Path, out: &Path) -> CmdResult {
    let img = read_image(image)?;
    let (model, _) = load_model::<f64>(ckpt)?;
    let aux = model
        .aux_features(&img)?
        .ok_or_else(|| Error::Config("the checkpoint's model has no auxiliary branch (aux_mode none)".into()))?;
    data::save_png(&pca_rgb(&aux, img.width(), img.height())?, out)?;
    Ok(())
}

fn configure_threads() -> CmdResult {
    let Ok(v) = std::env::var("UNEXT_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("UNEXT_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")).into())
}

fn dispatch(cli: Cli) -> CmdResult {
    configure_threads()?;
    match cli.command {
        Command::Synth { out, n, seed, size } => synth(&out, n, seed, size),
        Command::Train {
            config,
            data,
            out,
            resume,
            max_steps,
        } => train(config.as_deref(), data.as_deref(), &out, resume.as_deref(), max_steps),
        Command::Eval {
            pred_dir,
            gt_dir,
            checkpoint,
            data,
            name,
            out,
            save_predictions,
        } => eval(
            pred_dir.as_deref(),
            gt_dir.as_deref(),
            checkpoint.as_deref(),
            data.as_deref(),
            &name,
            &out,
            save_predictions,
        ),
        Command::Predict { checkpoint, image, out } => predict(&checkpoint, &image, &out),
        Command::Gradcheck {
            config,
            out,
            inject_fault,
        } => gradcheck_cmd(config.as_deref(), out.as_deref(), inject_fault),
        Command::PcaVis { checkpoint, image, out } => pca_vis(&checkpoint, &image, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}


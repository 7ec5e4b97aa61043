//! `ridgevlp` command-line interface.
//!
//! Every failure prints one line `E_<CODE>: <message>` to stderr and exits
//! with status 1 (2 for malformed command lines).

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ridgevlp::imaging::{load_image, write_f64_raw, write_pgm, write_png, GrayImage, PatchGrid};
use ridgevlp::masking::{apply_image_mask, filter_guided_mask, random_patch_mask, MaskMode, PatchMask};
use ridgevlp::pipeline::ablate::{ablate, summarize, to_csv, AblationAxis};
use ridgevlp::pipeline::data::read_studies;
use ridgevlp::pipeline::eval::eval_retrieval;
use ridgevlp::pipeline::synth::synth_dataset;
use ridgevlp::pipeline::train::{pretrain, TrainOptions, CHECKPOINT_FILE};
use ridgevlp::pipeline::RunConfig;
use ridgevlp::reports::{generate_manuscript, manuscript_token_labels, ReportFormat};
use ridgevlp::ridge_filter::multiscale_response;
use ridgevlp::text::Vocabulary;
use ridgevlp::Error;

#[derive(Parser)]
#[command(
    name = "ridgevlp",
    version,
    about = "Ridge-filter guided masked vision-language pre-training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML key = value file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        match &self.config {
            Some(path) => RunConfig::load(path, &self.overrides),
            None => {
                let mut cfg = RunConfig::default();
                for o in &self.overrides {
                    cfg.apply_override(o)?;
                }
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Multi-scale Meijering response of one image.
    Filter {
        input: PathBuf,
        /// Comma-separated scales in pixels.
        #[arg(long, default_value = "1,2,4", value_delimiter = ',')]
        scales: Vec<f64>,
        /// Square size the image is resampled to.
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// 8-bit visualization (`.png` or `.pgm`), scaled by the maximum.
        #[arg(long)]
        out: PathBuf,
        /// Raw float64 dump: u32 height, u32 width, little-endian row-major data.
        #[arg(long)]
        raw: Option<PathBuf>,
    },
    /// Patch mask for one image; prints the masked patch indices as JSON.
    Mask {
        input: PathBuf,
        #[arg(long, default_value = "filter_guided")]
        mode: MaskMode,
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        patch_size: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value = "1,2,4", value_delimiter = ',')]
        scales: Vec<f64>,
        #[arg(long, default_value_t = 0.5)]
        fill: f64,
        /// Masked image output (`.png` or `.pgm`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Triplet JSONL to `{study_id, full_text, labels, uncertain, verdict}` JSONL.
    Manuscript {
        input: PathBuf,
        #[arg(long, default_value = "manuscript")]
        format: ReportFormat,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthetic paired studies.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train; writes checkpoint, vocabulary and loss log to `out_dir`.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from the checkpoint in `out_dir`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total steps.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Retrieval recall@k on held-out pairs.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Defaults to `out_dir/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `eval_data`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// Masking or report-format ablation; writes a CSV table.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long, default_value = "0", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// CSV output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn save_image(path: &Path, img: &GrayImage) -> Result<(), Error> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => write_png(path, img),
        Some("pgm") => write_pgm(path, img),
        _ => Err(Error::Usage(format!(
            "{}: output must end in .png or .pgm",
            path.display()
        ))),
    }
}

fn write_text(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut stdout = BufWriter::new(std::io::stdout().lock());
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Filter {
            input,
            scales,
            size,
            out,
            raw,
        } => {
            let img = load_image(&input, size)?;
            let response = multiscale_response(&img, &scales)?;
            save_image(&out, &response.to_display_image())?;
            if let Some(raw) = raw {
                write_f64_raw(&raw, response.height, response.width, &response.data)?;
            }
            println!(
                "{}",
                serde_json::json!({"height": response.height, "width": response.width, "max": response.max(), "scales": scales})
            );
        }
        Command::Mask {
            input,
            mode,
            ratio,
            seed,
            patch_size,
            size,
            scales,
            fill,
            out,
        } => {
            let img = load_image(&input, size)?;
            let grid = PatchGrid::for_image(&img, patch_size)?;
            let mask = match mode {
                MaskMode::None => PatchMask::empty(grid),
                MaskMode::Random => random_patch_mask(grid, ratio, seed)?,
                MaskMode::FilterGuided => filter_guided_mask(grid, &multiscale_response(&img, &scales)?, ratio, seed)?,
            };
            if let Some(out) = out {
                save_image(&out, &apply_image_mask(&img, &mask, fill)?)?;
            }
            println!(
                "{}",
                serde_json::json!({"patches": grid.num_patches(), "masked": mask.masked_indices(), "mode": mode.to_string(), "seed": seed})
            );
        }
        Command::Manuscript { input, format, out } => {
            let answers = Vocabulary::build(["yes no uncertain"], 1)?;
            let mut text = String::new();
            for rec in read_studies(&input)? {
                let m = generate_manuscript(&rec.triplets);
                let labels = manuscript_token_labels(&m, &answers);
                let line = serde_json::json!({
                    "study_id": rec.study_id,
                    "full_text": rec.text(format)?,
                    "labels": labels.labels,
                    "uncertain": labels.uncertain,
                    "verdict": labels.verdict,
                });
                text.push_str(&line.to_string());
                text.push('\n');
            }
            write_text(out.as_deref(), &text)?;
        }
        Command::Synth { n, seed, out } => {
            let studies = synth_dataset(n, seed, &out)?;
            println!(
                "{}",
                serde_json::json!({"studies": studies.len(), "jsonl": out.join("studies.jsonl")})
            );
        }
        Command::Pretrain {
            config,
            resume,
            stop_after,
        } => {
            let cfg = config.load()?;
            let outcome = pretrain(&cfg, &TrainOptions { resume, stop_after })?;
            let last = outcome.reports.last().map(|r| r.total);
            println!(
                "{}",
                serde_json::json!({
                    "steps_run": outcome.reports.len(),
                    "final_total": last,
                    "checkpoint": outcome.checkpoint,
                    "loss_log": outcome.loss_log,
                })
            );
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            k,
        } => {
            let cfg = config.load()?;
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
            let data = data.unwrap_or_else(|| cfg.eval_data.clone());
            let report = eval_retrieval(&cfg, &checkpoint, &data, k)?;
            println!("{}", serde_json::to_string(&report).context("serializing report")?);
        }
        Command::Ablate {
            config,
            axis,
            seeds,
            out,
        } => {
            let cfg = config.load()?;
            let mut rows = ablate(&cfg, axis, &seeds)?;
            if seeds.len() > 1 {
                let summary = summarize(&rows);
                rows.extend(summary);
            }
            write_text(out.as_deref(), &to_csv(&rows))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("E_USAGE: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<Error>().map_or("E_INTERNAL", Error::code);
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("{code}: {msg}");
            ExitCode::from(1)
        }
    }
}

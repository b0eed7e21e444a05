use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use divseg::bench::ablate::{ablate, AblationAxis, AblationReport};
use divseg::bench::config::ExperimentConfig;
use divseg::bench::eval::evaluate_subsets;
use divseg::bench::gradcheck::gradcheck;
use divseg::bench::report::{emit_csv, emit_markdown, DiceReport};
use divseg::bench::train::{train_with, write_train_log};
use divseg::checkpoint;
use divseg::dataset::{make_dataset, Manifest, Split};
use divseg::{Error, Result};

const CHECKPOINT_NAME: &str = "model.dsegprm";

#[derive(Parser)]
#[command(
    name = "divseg",
    version,
    about = "Missing-modality segmentation with Hölder distillation on synthetic phantoms"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (dataset root for gen-data).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads for evaluation and ablations (0 = all cores).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Markdown,
}

#[derive(Subcommand)]
enum Command {
    /// Write train and test phantom splits with manifests.
    GenData,
    /// Train one model and write its checkpoint and per-epoch log.
    Train {
        /// Dataset root; defaults to the config's data root.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split under all 15 modality subsets.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint path; defaults to `<out>/model.dsegprm`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every variant along one ablation axis.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// divergence_family, alpha_sweep or loss_components.
        #[arg(long)]
        axis: String,
    },
    /// Finite-difference gradient checks of every op, loss and the model.
    Gradcheck,
    /// Re-emit a saved report (report.json or ablation.json).
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn data_root(cfg: &ExperimentConfig, data: &Option<PathBuf>) -> PathBuf {
    data.clone().unwrap_or_else(|| PathBuf::from(&cfg.data.root))
}

fn write_table(out: &Path, format: Format, csv: String, md: String) -> Result<PathBuf> {
    let (name, text) = match format {
        Format::Csv => ("report.csv", csv),
        Format::Markdown => ("report.md", md),
    };
    let path = out.join(name);
    fs::write(&path, text)?;
    Ok(path)
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::GenData => {
            let cfg = load_config(common)?;
            let root = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.data.root));
            let (train, test) = make_dataset(cfg.data.n_train, cfg.data.n_test, cfg.seed, cfg.data.dims, &root)?;
            eprintln!(
                "wrote {} train and {} test samples under {}",
                train.samples.len(),
                test.samples.len(),
                root.display()
            );
        }
        Command::Train { data } => {
            let cfg = load_config(common)?;
            let samples = Manifest::open(&data_root(&cfg, data), Split::Train)?.load_samples()?;
            let out = PathBuf::from(&cfg.out_dir);
            fs::create_dir_all(&out)?;
            let start = Instant::now();
            let outcome = train_with(&cfg, &samples, |e| {
                eprintln!(
                    "epoch {:>3}  dice {:.4}  mi {:.4}  hd {:.4}  total {:.4}  ({:.0}s)",
                    e.epoch,
                    e.dice,
                    e.mi,
                    e.hd,
                    e.total,
                    start.elapsed().as_secs_f64()
                )
            })?;
            checkpoint::save(&out.join(CHECKPOINT_NAME), &outcome.params)?;
            write_train_log(&out.join("train_log.csv"), &outcome.log)?;
            fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
            eprintln!("checkpoint written to {}", out.join(CHECKPOINT_NAME).display());
        }
        Command::Eval { data, checkpoint: ckpt } => {
            let cfg = load_config(common)?;
            let out = PathBuf::from(&cfg.out_dir);
            let path = ckpt.clone().unwrap_or_else(|| out.join(CHECKPOINT_NAME));
            let params = checkpoint::load(&path, &cfg.arch)?;
            let samples = Manifest::open(&data_root(&cfg, data), Split::Test)?.load_samples()?;
            let report = evaluate_subsets("model", &params, &samples, common.jobs)?;
            fs::create_dir_all(&out)?;
            report.save(&out.join("report.json"))?;
            let written = write_table(
                &out,
                common.format,
                emit_csv(&report),
                emit_markdown(std::slice::from_ref(&report)),
            )?;
            eprintln!(
                "grand average DSC {:.1}; table written to {}",
                100.0 * report.grand_average(),
                written.display()
            );
        }
        Command::Ablate { data, axis } => {
            let cfg = load_config(common)?;
            let axis: AblationAxis = axis.parse()?;
            let root = data_root(&cfg, data);
            let train = Manifest::open(&root, Split::Train)?.load_samples()?;
            let test = Manifest::open(&root, Split::Test)?.load_samples()?;
            let report = ablate(&cfg, axis, &train, &test, common.jobs)?;
            let out = PathBuf::from(&cfg.out_dir);
            fs::create_dir_all(&out)?;
            report.save(&out.join("ablation.json"))?;
            let written = write_table(&out, common.format, report.emit_csv(), report.emit_markdown())?;
            eprintln!("{axis} table written to {}", written.display());
        }
        Command::Gradcheck => {
            let seed = common.seed.unwrap_or(0);
            let report = gradcheck(seed)?;
            print!("{}", report.render());
            if !report.passed() {
                let names: Vec<String> = report
                    .failures()
                    .iter()
                    .map(|c| format!("{}/{}", c.suite, c.name))
                    .collect();
                return Err(Error::Numeric(format!("gradient check failed: {}", names.join(", "))));
            }
        }
        Command::Report { input } => {
            let text = fs::read_to_string(input)?;
            let (csv, md) = if let Ok(a) = serde_json::from_str::<AblationReport>(&text) {
                (a.emit_csv(), a.emit_markdown())
            } else {
                let r = DiceReport::load(input)?;
                (emit_csv(&r), emit_markdown(&[r]))
            };
            match &common.out {
                Some(out) => {
                    fs::create_dir_all(out)?;
                    let written = write_table(out, common.format, csv, md)?;
                    eprintln!("table written to {}", written.display());
                }
                None => print!("{}", if common.format == Format::Csv { csv } else { md }),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
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
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

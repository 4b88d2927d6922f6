//! Command-line entry point.
//!
//! Any `--key value` (or `--key=value`) flag whose key is `task`, `seed` or
//! contains a dot is a configuration override and is applied after the
//! optional `--config` file.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use sdanet::benchmark::{
    dice, generate_scenario_data, harmonize_stack, mse_metric, run_benchmark, ssim, train_models, Annotation,
};
use sdanet::gradsuite::{run_suite, Precision};
use sdanet::io::{
    load_bank, load_task, models_checkpoint, read_annotation, read_dataset, read_subject, subject_dirs,
    task_checkpoint, write_dataset, write_prediction, Checkpoint, RunConfig,
};
use sdanet::nn::{ImageAdaptorMode, TaskKind};
use sdanet::pipeline::{adapt_subject, predict, predict_slices, train_autoencoders, train_task};

#[derive(Parser, Debug)]
#[command(name = "sdanet", version, about = "Test-time self domain adaptation on synthetic phantoms")]
struct Cli {
    /// key=value configuration file, applied before flag overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/val/source/target dataset directories.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the task network on `<data>/train`, validating on `<data>/val`.
    TrainTask {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the auto-encoder bank on `<data>/train` against a frozen task network.
    TrainAe {
        #[arg(long)]
        data: PathBuf,
        /// Task-network checkpoint written by `train-task`.
        #[arg(long)]
        task_checkpoint: PathBuf,
        /// Output checkpoint holding the task network and the bank.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict one subject, adapting first unless the method is a baseline.
    Adapt {
        /// Checkpoint written by `train-ae`.
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        subject: PathBuf,
        /// Prediction root; results go to `<out>/<subject-id>/`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = CliMethod::Ours)]
        method: CliMethod,
        /// Subject directory whose reference slice drives histogram matching.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Compare prediction and ground-truth roots; writes a metric CSV.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate data, train, adapt and evaluate every method.
    RunBenchmark {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = CliPrecision::Both)]
        precision: CliPrecision,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CliMethod {
    /// Image adaptor structure from `train.image_adaptor`.
    Ours,
    #[value(name = "ours-3x3")]
    Ours3x3,
    Na,
    Mh,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CliPrecision {
    F32,
    F64,
    Both,
}

/// Splits configuration overrides out of `args`.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if key == "task" || key == "seed" || key.contains('.') {
            let value = match inline {
                Some(v) => v,
                None => it.next().ok_or_else(|| anyhow!("flag --{key} needs a value"))?,
            };
            overrides.push((key, value));
        } else {
            rest.push(a);
        }
    }
    Ok((rest, overrides))
}

fn echo_config(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<()> {
    let text = cfg.to_text();
    println!("# effective configuration\n{text}");
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), text)?;
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn check_kind(cfg: &RunConfig, kind: TaskKind) -> Result<()> {
    if cfg.kind() != kind {
        bail!("configuration task `{}` does not match checkpoint task `{}`", cfg.kind().as_str(), kind.as_str());
    }
    Ok(())
}

fn run(cli: Cli, cfg: RunConfig) -> Result<bool> {
    let s = &cfg.scenario;
    match cli.command {
        Command::GenData { out } => {
            echo_config(&cfg, Some(&out))?;
            let data = generate_scenario_data(s)?;
            for (name, split) in
                [("train", &data.train), ("val", &data.val), ("source", &data.source_test), ("target", &data.target)]
            {
                write_dataset(&out.join(name), split).with_context(|| format!("writing {name} split"))?;
                println!("{name}: {} subjects", split.len());
            }
        }
        Command::TrainTask { data, out } => {
            echo_config(&cfg, None)?;
            let train = read_dataset(&data.join("train")).context("reading training split")?;
            let val = read_dataset(&data.join("val")).context("reading validation split")?;
            let (task, report) = train_task(&train, &val, s.task_config(), &s.train)?;
            println!("best epoch {} val loss {:.6} val metric {:.4}", report.best_epoch, report.best_val_loss, report.val_metric);
            task_checkpoint(&task)?.save(&out)?;
        }
        Command::TrainAe { data, task_checkpoint, out } => {
            echo_config(&cfg, None)?;
            let task = load_task(&load_checkpoint(&task_checkpoint)?)?;
            check_kind(&cfg, task.config().kind)?;
            let train = read_dataset(&data.join("train")).context("reading training split")?;
            let (bank, report) = train_autoencoders(&task, &train, &s.train)?;
            println!("auto-encoder epoch losses {:?}", report.epoch_losses);
            models_checkpoint(&task, &bank)?.save(&out)?;
        }
        Command::Adapt { models, subject, out, method, reference } => {
            echo_config(&cfg, None)?;
            let ck = load_checkpoint(&models)?;
            let task = load_task(&ck)?;
            check_kind(&cfg, task.config().kind)?;
            let rec = read_subject(&subject).with_context(|| format!("reading subject {}", subject.display()))?;
            let prediction = match method {
                CliMethod::Na => predict(&rec, &task, None, s.train.batch_size)?,
                CliMethod::Mh => {
                    let dir = reference.ok_or_else(|| anyhow!("--method mh needs --reference <subject-dir>"))?;
                    let r = read_subject(&dir)?.slices.slice_batch(s.reference_slice, 1)?;
                    predict_slices(&harmonize_stack(&rec.slices, &r)?, &task, None, s.train.batch_size)?
                }
                CliMethod::Ours | CliMethod::Ours3x3 => {
                    let bank = load_bank(&ck, task.config().out_channels)?;
                    let mut train = s.train.clone();
                    if matches!(method, CliMethod::Ours3x3) {
                        train.image_adaptor = ImageAdaptorMode::FirstKernel3x3;
                    }
                    let outcome = adapt_subject(&rec, &task, &bank, &train)?;
                    let text = outcome.report.to_text(true);
                    print!("{text}");
                    let dir = write_prediction(&out, &rec.id, &outcome.prediction)?;
                    fs::write(dir.join("adaptation.txt"), text)?;
                    return Ok(true);
                }
            };
            write_prediction(&out, &rec.id, &prediction)?;
        }
        Command::Evaluate { pred, gt, out } => {
            let csv = evaluate(&pred, &gt)?;
            fs::write(&out, &csv).with_context(|| format!("writing {}", out.display()))?;
            print!("{csv}");
        }
        Command::RunBenchmark { out } => {
            echo_config(&cfg, Some(&out))?;
            let start = Instant::now();
            let data = generate_scenario_data(s)?;
            let models = train_models(s, &data)?;
            models_checkpoint(&models.task, &models.bank)?.save(&out.join("models.sdck"))?;
            let res = run_benchmark(s, &data, &models)?;
            fs::write(out.join("results.csv"), res.to_csv())?;
            let reports = out.join("reports");
            for (method, domain, report) in &res.reports {
                let dir = reports.join(method.as_str()).join(domain.as_str());
                fs::create_dir_all(&dir)?;
                fs::write(dir.join(format!("{}.txt", report.subject)), report.to_text(true))?;
            }
            let mut summary = res.to_table();
            for (method, subject, dev) in &res.orth_deviations {
                summary.push_str(&format!(
                    "orth deviation {} {subject}: {:.5} {:.5} {:.5}\n",
                    method.as_str(),
                    dev[0],
                    dev[1],
                    dev[2]
                ));
            }
            summary.push_str(&format!("total duration {:.1} s\n", start.elapsed().as_secs_f64()));
            fs::write(out.join("summary.txt"), &summary)?;
            print!("{summary}");
        }
        Command::Gradcheck { precision } => {
            let precisions: &[Precision] = match precision {
                CliPrecision::F32 => &[Precision::F32],
                CliPrecision::F64 => &[Precision::F64],
                CliPrecision::Both => &[Precision::F32, Precision::F64],
            };
            let report = run_suite(precisions)?;
            print!("{}", report.to_table());
            for &p in precisions {
                println!("max {} error {:.3e} (tolerance {:.0e})", p.as_str(), report.max_error(p), p.tolerance());
            }
            println!("duration {:.1} s", report.duration.as_secs_f64());
            return Ok(report.all_passed());
        }
    }
    Ok(true)
}

/// Metric CSV for every subject under `gt` against the same-named
/// directory under `pred`.
fn evaluate(pred: &Path, gt: &Path) -> Result<String> {
    let mut csv = String::from("subject,metric,class,value\n");
    let dirs = subject_dirs(gt)?;
    if dirs.is_empty() {
        bail!("no subject directories under {}", gt.display());
    }
    for dir in dirs {
        let truth = read_subject(&dir).with_context(|| format!("reading ground truth {}", dir.display()))?;
        let pdir = pred.join(&truth.id);
        let guess = read_annotation(&pdir, truth.num_slices())
            .with_context(|| format!("reading predictions {}", pdir.display()))?;
        match (&truth.annotation, guess) {
            (Some(Annotation::Labels(t)), Some(Annotation::Labels(p))) => {
                if t.dims() != p.dims() {
                    bail!("{}: label maps {:?} vs {:?}", truth.id, p.dims(), t.dims());
                }
                let classes = match &truth.provenance {
                    Some(prov) => prov.phantom.classes(),
                    None => t.max_class().map_or(1, |c| c as usize + 1),
                };
                let mut total = 0.0;
                for c in 0..classes {
                    let d = dice(p.data(), t.data(), c as u8)?;
                    total += d;
                    csv.push_str(&format!("{},dice,{c},{d:.8}\n", truth.id));
                }
                csv.push_str(&format!("{},dice_mean,all,{:.8}\n", truth.id, total / classes as f64));
            }
            (Some(Annotation::Targets(t)), Some(Annotation::Targets(p))) => {
                csv.push_str(&format!("{},mse,all,{:.8}\n", truth.id, mse_metric(&p, t)?));
                csv.push_str(&format!("{},ssim,all,{:.8}\n", truth.id, ssim(&p, t)?));
            }
            (None, _) => bail!("{} has no ground truth", truth.id),
            (_, None) => bail!("no predictions for {} in {}", truth.id, pdir.display()),
            _ => bail!("{}: prediction kind does not match ground truth", truth.id),
        }
    }
    Ok(csv)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = RunConfig::load(cli.config.as_deref(), &overrides)
        .context("loading configuration")
        .and_then(|cfg| run(cli, cfg));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

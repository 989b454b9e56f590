use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result, bail};
use clap::{Parser, Subcommand, ValueEnum};
use rstbench::clock::CalibrationProfile;
use rstbench::config::{Method, RunConfig};
use rstbench::data::{Corpus, load_and_tokenize};
use rstbench::harness::{self, RunOptions, RunOutput, files};
use rstbench::report::{self, Metric};

/// Profile used when neither the config nor `--profile` names one.
const DEFAULT_PROFILE: &str = "profiles/reference.toml";

#[derive(Parser)]
#[command(
    name = "rstbench",
    version,
    about = "Budgeted comparison of efficient training methods"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Run config (TOML); unspecified keys take the method preset.
    #[arg(long, conflicts_with = "method")]
    config: Option<PathBuf>,
    /// Use a built-in preset instead of a config file.
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long)]
    seed: Option<u64>,
    /// Budget in reference seconds.
    #[arg(long)]
    budget: Option<f64>,
    /// Reference profile; overrides the config.
    #[arg(long)]
    profile: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Time training steps on this machine and write a calibration profile.
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, value_delimiter = ',', default_value = "2,4,6,8")]
        layers: Vec<usize>,
        #[arg(long, default_value = "local")]
        label: String,
        #[arg(long, default_value = DEFAULT_PROFILE)]
        out: PathBuf,
    },
    /// Run one budgeted training run and write its run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        free_selection: bool,
        #[arg(long)]
        free_hessian: bool,
        /// Device profile for projecting local seconds.
        #[arg(long)]
        device_profile: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Aggregate run directories into a mean ± std table.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output stem; writes `<out>.txt` and `<out>.csv`.
        #[arg(long, default_value = "report")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricArg::Val)]
        metric: MetricArg,
        #[arg(long, default_value_t = 3)]
        decimals: usize,
    },
    /// Fully decayed schedule against a 2× stretched one at the same budget.
    Pitfall {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "runs/pitfall")]
        out_dir: PathBuf,
    },
    /// Baseline against dropping on a truncated corpus trained for several epochs.
    Overfit {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training tokens kept.
        #[arg(long, default_value_t = 20_000)]
        truncation: usize,
        #[arg(long, default_value = "runs/overfit")]
        out_dir: PathBuf,
    },
    /// Write `plot.csv` for a run directory.
    PlotData {
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Val,
    Train,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: rstbench::Error| e.to_string())
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, self.method) {
            (Some(path), _) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            (None, Some(m)) => RunConfig::preset(m),
            (None, None) => RunConfig::preset(Method::Baseline),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.budget {
            cfg.budget = b;
        }
        if let Some(p) = &self.profile {
            cfg.profile = Some(p.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn reference_profile(cfg: &RunConfig) -> Result<CalibrationProfile> {
    let path = cfg.profile.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_PROFILE));
    CalibrationProfile::load(&path).with_context(|| {
        format!(
            "loading reference profile {} (run `rstbench calibrate` to create one)",
            path.display()
        )
    })
}

fn corpus(cfg: &RunConfig) -> Result<Corpus> {
    load_and_tokenize(&cfg.corpus).with_context(|| format!("loading corpus {}", cfg.corpus.display()))
}

fn write_plot(out: &RunOutput, path: &Path) -> Result<()> {
    fs::write(path, report::emit_plot_data(&out.records)?)?;
    Ok(())
}

fn fmt_loss(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Calibrate {
            cfg,
            iters,
            warmup,
            layers,
            label,
            out,
        } => {
            let cfg = cfg.load()?;
            let corpus = corpus(&cfg)?;
            let model = harness::resolve_model(cfg.model, &corpus.vocab)?;
            let profile = harness::calibrate(&model, cfg.batch_size, &layers, iters, warmup, &label)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            profile.save(&out)?;
            println!(
                "wrote {} (full_step a={:.3e} b={:.3e}, max residual {:.1}%)",
                out.display(),
                profile.full_step.a,
                profile.full_step.b,
                100.0 * profile.max_residual()
            );
        }
        Command::Train {
            cfg,
            free_selection,
            free_hessian,
            device_profile,
            out_dir,
            force,
        } => {
            let mut cfg = cfg.load()?;
            cfg.free_selection |= free_selection;
            cfg.free_hessian |= free_hessian;
            if device_profile.is_some() {
                cfg.device_profile = device_profile;
            }
            let reference = reference_profile(&cfg)?;
            let opts = RunOptions {
                device: cfg.device_profile.as_ref().map(CalibrationProfile::load).transpose()?,
                ..RunOptions::default()
            };
            let out = harness::run_experiment_with(&cfg, &corpus(&cfg)?, &reference, &opts)?;
            let dir = harness::write_run_dir(&out, &out_dir, force)?;
            write_plot(&out, &dir.join(files::PLOT))?;
            let s = &out.summary;
            println!(
                "{}: {} steps, {:.2} RST s, train {} -> {}, val {} -> {}",
                dir.display(),
                s.steps,
                s.rst_consumed,
                fmt_loss(s.init_train_loss),
                fmt_loss(s.final_train_loss),
                fmt_loss(s.init_val_loss),
                fmt_loss(s.final_val_loss)
            );
        }
        Command::Compare {
            runs,
            out,
            metric,
            decimals,
        } => {
            let summaries = runs
                .iter()
                .map(|d| harness::read_summary(d).with_context(|| format!("reading {}", d.display())))
                .collect::<Result<Vec<_>>>()?;
            let metric = match metric {
                MetricArg::Val => Metric::FinalValLoss,
                MetricArg::Train => Metric::FinalTrainLoss,
            };
            let rep = report::compare(&summaries, metric)?;
            let text = rep.to_text(decimals);
            fs::write(out.with_extension("txt"), &text)?;
            fs::write(out.with_extension("csv"), rep.to_csv()?)?;
            print!("{text}");
        }
        Command::Pitfall { cfg, seeds, out_dir } => {
            let base = cfg.load()?;
            if base.method != Method::Baseline {
                bail!("pitfall runs the baseline method");
            }
            let reference = reference_profile(&base)?;
            let corpus = corpus(&base)?;
            fs::create_dir_all(&out_dir)?;
            let mut wins = 0;
            for &seed in &seeds {
                let o = harness::pitfall_demo(&RunConfig { seed, ..base.clone() }, &corpus, &reference)?;
                write_plot(&o.decayed, &out_dir.join(format!("decayed_{seed}.csv")))?;
                write_plot(&o.stretched, &out_dir.join(format!("stretched_{seed}.csv")))?;
                wins += usize::from(o.decayed_wins());
                println!(
                    "seed {seed}: decayed train {} (lr {:.2e}), stretched train {} (lr {:.2e}), {}",
                    fmt_loss(o.decayed.summary.final_train_loss),
                    o.decayed.summary.final_lr,
                    fmt_loss(o.stretched.summary.final_train_loss),
                    o.stretched.summary.final_lr,
                    if o.decayed_wins() {
                        "decayed lower"
                    } else {
                        "stretched lower"
                    }
                );
            }
            println!("decayed schedule lower in {wins}/{} seeds", seeds.len());
        }
        Command::Overfit {
            cfg,
            truncation,
            out_dir,
        } => {
            let base = cfg.load()?;
            let reference = reference_profile(&base)?;
            let corpus = corpus(&base)?;
            let mut val = Vec::new();
            for method in [Method::Baseline, Method::Dropping] {
                let cfg = RunConfig {
                    method,
                    dropping: RunConfig::preset(method).dropping,
                    corpus_truncation: Some(truncation),
                    ..base.clone()
                };
                cfg.validate()?;
                let out = harness::run_experiment(&cfg, &corpus, &reference)?;
                let dir = harness::write_run_dir(&out, &out_dir, true)?;
                write_plot(&out, &dir.join(files::PLOT))?;
                println!(
                    "{method}: {:.2} epochs, train {}, val {}",
                    out.summary.epochs,
                    fmt_loss(out.summary.final_train_loss),
                    fmt_loss(out.summary.final_val_loss)
                );
                val.push(out.summary.final_val_loss);
            }
            match (val[0], val[1]) {
                (Some(b), Some(d)) if d <= b => println!("dropping val loss <= baseline"),
                (Some(_), Some(_)) => println!("note: dropping val loss above baseline in this run"),
                _ => println!("note: validation loss unavailable"),
            }
        }
        Command::PlotData { run, out } => {
            let records = harness::read_metrics(&run.join(files::METRICS))?;
            let path = out.unwrap_or_else(|| run.join(files::PLOT));
            fs::write(&path, report::emit_plot_data(&records)?)?;
            println!("wrote {} ({} rows)", path.display(), records.len());
        }
    }
    Ok(())
}

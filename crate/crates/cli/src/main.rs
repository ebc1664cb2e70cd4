use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use davad::data::{generate_synthetic_corpus, parse_segments, Split};
use davad::experiment::{
    apply_model, count_by_domain, format_report, load_labeled, report_rows, run_confusion,
    run_lambda_sweep, run_matrix, train_model, tune_run, write_json, Corpus, ExperimentConfig,
    MatrixRowId, Protocol, Selection,
};
use davad::model::VadModel;
use davad::training::{checkpoint_name, TrainMode};

#[derive(Parser, Debug)]
#[command(
    name = "davad",
    version,
    about = "Voice activity detection with domain-adversarial training"
)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for corpus generation, initialization and batch sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; for `generate` the corpus directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override, e.g. `--set train.max_epochs=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpus, noise bank and manifest.
    Generate,
    /// Train a model and write per-epoch checkpoints.
    Train {
        #[arg(long, default_value = "in_domain")]
        protocol: Protocol,
        /// Overrides `train.mode`.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<TrainMode>,
        /// Overrides `model.lambda`.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Select the checkpoint and threshold on the development split.
    Tune {
        #[arg(long, default_value = "in_domain")]
        protocol: Protocol,
    },
    /// Write speech regions and frame scores for a split.
    Apply {
        #[arg(long, default_value = "in_domain")]
        protocol: Protocol,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Defaults to the tuned checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the tuned threshold.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Score hypothesis segment files against the references of a split.
    Evaluate {
        #[arg(long, default_value = "in_domain")]
        protocol: Protocol,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Directory of `{uri}.tsv` files; defaults to the `apply` output.
        #[arg(long)]
        hyp: Option<PathBuf>,
    },
    /// Compare training policies (rows A to E).
    Matrix {
        #[arg(long, default_value = "A,B,C,D,E", value_delimiter = ',')]
        rows: Vec<MatrixRowId>,
    },
    /// Relative improvement of adversarial training for several λ.
    SweepLambda {
        /// Defaults to `lambda_grid` of the config.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Train the domain classifier and write its confusion matrix.
    Confusion,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "vad" => Ok(TrainMode::Vad),
        "adversarial" => Ok(TrainMode::Adversarial),
        "domain" => Ok(TrainMode::Domain),
        other => Err(format!("unknown mode {other:?} (vad, adversarial, domain)")),
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse()
}

fn load_config(cli: &Cli) -> davad::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn protocol_dir(cfg: &ExperimentConfig, protocol: &Protocol) -> PathBuf {
    cfg.run_dir().join(protocol.to_string().replace(':', "_"))
}

fn save_config(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join("config.toml");
    std::fs::write(&p, cfg.to_toml()).with_context(|| format!("writing {}", p.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Generate => {
            let dir = match &cli.out {
                Some(d) => d.clone(),
                None => cfg
                    .manifest
                    .parent()
                    .unwrap_or(Path::new("."))
                    .to_path_buf(),
            };
            let m = generate_synthetic_corpus(&cfg.synth, &dir)?;
            println!("wrote {} recordings to {}", m.entries.len(), dir.display());
        }
        Command::Train {
            protocol,
            mode,
            lambda,
        } => {
            let corpus = Corpus::load(&cfg)?;
            let dir = protocol_dir(&cfg, protocol);
            save_config(&cfg, &dir)?;
            let splits = corpus.splits(protocol)?;
            let mode = mode.unwrap_or(cfg.train.mode);
            let records = train_model(
                &cfg,
                &splits.train,
                &corpus.noise,
                mode,
                lambda.unwrap_or(cfg.model.lambda),
                &dir.join("train"),
            )?;
            write_json(&dir.join("train").join("run.json"), &records)?;
            println!(
                "trained {} epochs into {}",
                records.len(),
                dir.join("train").display()
            );
        }
        Command::Tune { protocol } => {
            let corpus = Corpus::load(&cfg)?;
            let dir = protocol_dir(&cfg, protocol).join("train");
            let dev = load_labeled(&corpus.splits(protocol)?.dev)?;
            let best = tune_run(&cfg, &dev, &dir)?;
            write_json(&dir.join("tune.json"), &best)?;
            println!(
                "epoch {}\tsigma {:.2}\tdev DetER {:.1}%",
                best.best_epoch, best.best_sigma, best.detection_error_rate
            );
        }
        Command::Apply {
            protocol,
            split,
            checkpoint,
            sigma,
        } => {
            let corpus = Corpus::load(&cfg)?;
            let dir = protocol_dir(&cfg, protocol);
            let train_dir = dir.join("train");
            let selection = || Selection::load(&train_dir.join("selection.toml"));
            let ckpt = match checkpoint {
                Some(c) => c.clone(),
                None => train_dir.join(checkpoint_name(selection()?.epoch)),
            };
            let sigma = match sigma {
                Some(s) => *s,
                None if checkpoint.is_some() => cfg.window.threshold,
                None => selection()?.sigma,
            };
            let splits = corpus.splits(protocol)?;
            let manifest = match split {
                Split::Train => splits.train,
                Split::Dev => splits.dev,
                Split::Test => splits.test,
            };
            let model = VadModel::<f32>::load(&ckpt)?;
            let files = load_labeled(&manifest)?;
            let out = dir.join(format!("hyp_{split}"));
            let hyps = apply_model(&model, &files, &cfg.window, sigma, &out)?;
            println!("wrote {} hypotheses to {}", hyps.len(), out.display());
        }
        Command::Evaluate {
            protocol,
            split,
            hyp,
        } => {
            let corpus = Corpus::load(&cfg)?;
            let dir = protocol_dir(&cfg, protocol);
            let hyp_dir = hyp
                .clone()
                .unwrap_or_else(|| dir.join(format!("hyp_{split}")));
            let splits = corpus.splits(protocol)?;
            let manifest = match split {
                Split::Train => splits.train,
                Split::Dev => splits.dev,
                Split::Test => splits.test,
            };
            let files = load_labeled(&manifest)?;
            if files.is_empty() {
                bail!(davad::Error::Corpus(format!("the {split} split is empty")));
            }
            let mut hyps = Vec::with_capacity(files.len());
            for f in &files {
                hyps.push(parse_segments(&hyp_dir.join(format!("{}.tsv", f.entry.uri)))?.regions);
            }
            let per_domain = count_by_domain(files.iter().zip(&hyps))?;
            let report = format_report(&report_rows(&per_domain));
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join(format!("report_{split}.tsv")), &report)?;
            print!("{report}");
        }
        Command::Matrix { rows } => {
            let corpus = Corpus::load(&cfg)?;
            let dir = cfg.run_dir().join("matrix");
            save_config(&cfg, &dir)?;
            let out = run_matrix(&cfg, &corpus, rows, &dir)?;
            print!("{}", std::fs::read_to_string(dir.join("matrix.tsv"))?);
            log::info!("{} matrix rows", out.len());
        }
        Command::SweepLambda { grid } => {
            let corpus = Corpus::load(&cfg)?;
            let dir = cfg.run_dir().join("sweep");
            save_config(&cfg, &dir)?;
            let grid = grid.clone().unwrap_or_else(|| cfg.lambda_grid.clone());
            let result = run_lambda_sweep(&cfg, &corpus, &grid, &dir)?;
            print!("{}", result.to_tsv());
        }
        Command::Confusion => {
            let corpus = Corpus::load(&cfg)?;
            let dir = cfg.run_dir().join("confusion");
            save_config(&cfg, &dir)?;
            let result = run_confusion(&cfg, &corpus, &dir)?;
            print!("{}", result.matrix.to_csv());
            println!("accuracy\t{:.4}", result.accuracy);
        }
    }
    Ok(())
}

/// 1 for bad input (usage, config, missing or malformed files), 2 for
/// failures at run time.
fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|e| {
        e.downcast_ref::<davad::Error>()
            .is_some_and(davad::Error::is_validation)
            || e.downcast_ref::<std::io::Error>()
                .is_some_and(|io| io.kind() == std::io::ErrorKind::NotFound)
    });
    if validation {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

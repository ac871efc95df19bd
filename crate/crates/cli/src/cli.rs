//! Command-line interface.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use simclip_core::checkpoint::{load_checkpoint, write_atomic};
use simclip_core::config::ExperimentConfig;
use simclip_core::eval::{cider_score, CiderCorpus};
use simclip_core::finetune::{hyperparameter_sweep, sweep_table, CheckpointPlan, OptimizerKind, SweepPoint};
use simclip_core::presets::{simclip, Benchmark};
use simclip_core::{Error, Result, VisionEncoder};

use crate::compare::compare_runs;
use crate::experiments::{fig4_stopgrad, packaged_encoders, table2_targeted};
use crate::runs::{initial_encoder, run_experiment, RunDir, RUN_ROOT_ENV};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_COLLAPSE: u8 = 3;
pub const EXIT_INCOMPATIBLE: u8 = 4;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::AttackConfig(_) => EXIT_CONFIG,
        Error::Collapse { .. } => EXIT_COLLAPSE,
        Error::IncompatibleRuns(_) => EXIT_INCOMPATIBLE,
        _ => EXIT_RUNTIME,
    }
}

#[derive(Debug, Parser)]
#[command(name = "simclip", version, about = "Siamese adversarial fine-tuning lab")]
pub struct Cli {
    /// Directory holding one subdirectory per run.
    #[arg(long, global = true, env = RUN_ROOT_ENV, default_value = "runs")]
    pub run_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML experiment config; omitted means all defaults.
    #[arg(long, short)]
    pub config: Option<PathBuf>,

    /// Override a config key, e.g. `--set train.lr=3e-5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load_with_overrides(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Debug, Args)]
pub struct EncoderArgs {
    /// Evaluate this checkpoint instead of `model.checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every configured stage: pretrain, train, eval, targeted, attack.
    Finetune(ConfigArgs),
    /// Run only the `[attack]` stage on a fixed encoder.
    Attack {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        encoder: EncoderArgs,
    },
    /// Run only the `[eval]` stage on a fixed encoder.
    EvalZeroshot {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        encoder: EncoderArgs,
    },
    /// Targeted caption attacks. With `--encoder` or `--packaged` this
    /// writes a table with one row per target and one column per encoder.
    EvalTargeted {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        encoder: EncoderArgs,
        /// `NAME=CHECKPOINT`, repeatable.
        #[arg(long = "encoder", value_name = "NAME=PATH")]
        encoders: Vec<String>,
        /// Train the baseline and both fine-tuned variants first.
        #[arg(long, conflicts_with = "encoders")]
        packaged: bool,
    },
    /// Early-stopped grid over learning rate, weight decay and optimizer.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1e-5, 3e-5, 1e-4])]
        lr: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [1e-4])]
        weight_decay: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values = ["adamw"])]
        optimizer: Vec<String>,
    },
    /// Train with and without stop-gradient and write both loss curves.
    AblateStopgrad(ConfigArgs),
    /// Tabulate zero-shot results of finished runs.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<String>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score candidate captions against references.
    ScoreCider {
        /// JSON object: image id to candidate caption.
        #[arg(long)]
        candidates: PathBuf,
        /// JSON object: image id to list of reference captions.
        #[arg(long)]
        references: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Keep only the stages a single-stage command runs.
fn stage_only(mut cfg: ExperimentConfig, checkpoint: &Option<PathBuf>, keep: &str) -> Result<ExperimentConfig> {
    let present = match keep {
        "attack" => cfg.attack.is_some(),
        "eval" => cfg.eval.is_some(),
        "targeted" => cfg.targeted.is_some(),
        _ => unreachable!("known stage"),
    };
    if !present {
        return Err(Error::Config(vec![format!("config has no [{keep}] section")]));
    }
    if let Some(ck) = checkpoint {
        cfg.model.checkpoint = Some(ck.clone());
    }
    cfg.pretrain = None;
    cfg.train = None;
    if keep != "attack" {
        cfg.attack = None;
    }
    if keep != "eval" {
        cfg.eval = None;
    }
    if keep != "targeted" {
        cfg.targeted = None;
    }
    Ok(cfg)
}

fn report_run(root: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let rec = run_experiment(cfg, root)?;
    println!("run {} written to {}", rec.run_id, root.join(&rec.run_id).display());
    for e in &rec.eval {
        print!("{}: clean {:.4}", e.encoder, e.report.clean_accuracy);
        for p in &e.report.robust_accuracy {
            print!(", robust@{:.1}/255 {:.4}", p.epsilon * 255.0, p.accuracy);
        }
        println!();
    }
    for t in &rec.targeted {
        println!(
            "{}: targeted success {:.4}, CIDEr {:.4}",
            t.encoder, t.report.mean_success_rate, t.report.average_cider
        );
    }
    Ok(())
}

/// Benchmark plus the starting encoder, after the optional `[pretrain]`.
fn prepared_encoder(cfg: &ExperimentConfig) -> Result<(Benchmark, VisionEncoder<f32>)> {
    cfg.validate()?;
    let bench = Benchmark::from_spec(&cfg.data, cfg.model.embed_dim, cfg.model.text_seed)?;
    let mut enc = initial_encoder(cfg, &bench)?;
    if let Some(pre) = &cfg.pretrain {
        enc = simclip_core::finetune::finetune(&enc, &bench.train, Some(&bench.head), pre, &CheckpointPlan::default())?.0;
    }
    Ok((bench, enc))
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(vec![format!("unknown optimizer `{s}` (use adamw or sgd)")]))
}

pub fn run(cli: Cli) -> Result<()> {
    let root = cli.run_root;
    match cli.command {
        Command::Finetune(args) => report_run(&root, &args.load()?),
        Command::Attack { config, encoder } => {
            let cfg = stage_only(config.load()?, &encoder.checkpoint, "attack")?;
            report_run(&root, &cfg)?;
            let rec_dir = root.join(crate::runs::experiment_run_id(&cfg));
            println!("attack report: {}", rec_dir.join("reports/attack.json").display());
            Ok(())
        }
        Command::EvalZeroshot { config, encoder } => report_run(&root, &stage_only(config.load()?, &encoder.checkpoint, "eval")?),
        Command::EvalTargeted {
            config,
            encoder,
            encoders,
            packaged,
        } => {
            let cfg = config.load()?;
            if encoders.is_empty() && !packaged {
                return report_run(&root, &stage_only(cfg, &encoder.checkpoint, "targeted")?);
            }
            let section = cfg.targeted.clone().unwrap_or_default();
            let bench = Benchmark::from_spec(&cfg.data, cfg.model.embed_dim, cfg.model.text_seed)?;
            let list = if packaged {
                packaged_encoders(&bench, cfg.model.init_seed)?
            } else {
                encoders
                    .iter()
                    .map(|e| {
                        let (name, path) = e
                            .split_once('=')
                            .ok_or_else(|| Error::Config(vec![format!("--encoder `{e}` is not NAME=PATH")]))?;
                        Ok((name.to_string(), load_checkpoint(Path::new(path))?))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let (dir, table) = table2_targeted(&root, &bench, &list, &section)?;
            print!("{}", table.to_csv());
            println!("written to {}", dir.display());
            Ok(())
        }
        Command::Sweep {
            config,
            lr,
            weight_decay,
            optimizer,
        } => {
            let cfg = config.load()?;
            let base = cfg.train.clone().unwrap_or_else(|| simclip(4.0 / 255.0));
            let optimizers = optimizer.iter().map(|s| parse_optimizer(s)).collect::<Result<Vec<_>>>()?;
            let mut grid = Vec::new();
            for &o in &optimizers {
                for &l in &lr {
                    for &w in &weight_decay {
                        grid.push(SweepPoint {
                            lr: l,
                            weight_decay: w,
                            optimizer: o,
                        });
                    }
                }
            }
            let (bench, init) = prepared_encoder(&cfg)?;
            let records = hyperparameter_sweep(&init, &bench.train, Some(&bench.head), &grid, &base)?;
            let digest = simclip_core::finetune::config_digest(&(&cfg, &grid));
            let dir = RunDir::create(&root, &format!("sweep-{}", simclip_core::record::run_id(&digest, cfg.seed)))?;
            let table = sweep_table(&records);
            dir.write("reports/sweep.csv", table.as_bytes())?;
            for r in &records {
                r.without_timing().save_json(&dir.root.join("reports").join(format!("{}.json", r.run_id)))?;
            }
            print!("{table}");
            println!("written to {}", dir.root.display());
            Ok(())
        }
        Command::AblateStopgrad(args) => {
            let cfg = args.load()?;
            let base = cfg.train.clone().unwrap_or_else(|| simclip(4.0 / 255.0));
            let (bench, init) = prepared_encoder(&cfg)?;
            let out = fig4_stopgrad(&root, &bench, &init, &base)?;
            println!(
                "terminal loss with stop-grad {:.4}, without {:.4}, gap {:.4}",
                out.terminal_with,
                out.terminal_without,
                out.terminal_gap()
            );
            println!("written to {}", out.dir.display());
            Ok(())
        }
        Command::Compare { runs, format, out } => {
            let table = compare_runs(&root, &runs)?;
            let text = match format {
                Format::Csv => table.to_csv(),
                Format::Json => table.to_json(),
            };
            if let Some(path) = out {
                write_atomic(&path, text.as_bytes())?;
            }
            print!("{text}");
            Ok(())
        }
        Command::ScoreCider { candidates, references } => {
            let cands: BTreeMap<String, String> = read_json(&candidates)?;
            let refs: BTreeMap<String, Vec<String>> = read_json(&references)?;
            println!("{:.6}", cider_score(&cands, &CiderCorpus::new(refs))?);
            Ok(())
        }
    }
}

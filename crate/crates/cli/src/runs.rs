//! Run directories and the config-driven experiment driver.

use std::path::{Path, PathBuf};
use std::time::Instant;

use simclip_core::attacks::{attack, ObjectiveContext, TargetSpec};
use simclip_core::checkpoint::{load_checkpoint, save_checkpoint, write_atomic};
use simclip_core::config::ExperimentConfig;
use simclip_core::eval::{eval_zero_shot, targeted_attack_eval};
use simclip_core::finetune::{run_steps, CheckpointPlan, TrainConfig, TrainState};
use simclip_core::presets::Benchmark;
use simclip_core::record::{run_id, NamedEval, NamedTargeted};
use simclip_core::{ArchSpec, Error, RunRecord, VisionEncoder};
use serde::Serialize;

pub const RUN_ROOT_ENV: &str = "SIMCLIP_RUN_ROOT";

/// `$SIMCLIP_RUN_ROOT`, or `./runs`.
pub fn default_run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// `runs/<id>/{config.toml, record.json, losses.csv, checkpoints/, reports/}`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(run_root: &Path, id: &str) -> simclip_core::Result<Self> {
        let root = run_root.join(id);
        std::fs::create_dir_all(root.join("checkpoints"))?;
        std::fs::create_dir_all(root.join("reports"))?;
        Ok(Self { root })
    }

    pub fn open(run_root: &Path, id: &str) -> simclip_core::Result<Self> {
        let root = run_root.join(id);
        if !root.join("record.json").is_file() {
            return Err(Error::Dataset(format!("no completed run at {}", root.display())));
        }
        Ok(Self { root })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn record(&self) -> PathBuf {
        self.root.join("record.json")
    }

    pub fn losses(&self) -> PathBuf {
        self.root.join("losses.csv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    /// Write `bytes` under the run root and return the relative path.
    pub fn write(&self, rel: &str, bytes: &[u8]) -> simclip_core::Result<String> {
        write_atomic(&self.root.join(rel), bytes)?;
        Ok(rel.to_string())
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> simclip_core::Result<String> {
        self.write(rel, &serde_json::to_vec_pretty(value)?)
    }
}

pub fn experiment_run_id(config: &ExperimentConfig) -> String {
    run_id(&config.digest(), config.seed)
}

/// Initial encoder: the configured checkpoint or a fresh init.
pub fn initial_encoder(config: &ExperimentConfig, bench: &Benchmark) -> simclip_core::Result<VisionEncoder<f32>> {
    let enc = match &config.model.checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => {
            let mut arch = ArchSpec::small(bench.train.images.shape(), config.model.embed_dim);
            arch.bias = config.model.bias;
            VisionEncoder::init(arch, config.model.init_seed)?
        }
    };
    if enc.arch().input != bench.train.images.shape() {
        return Err(Error::InputSpec(format!(
            "encoder expects {:?}, data is {:?}",
            enc.arch().input,
            bench.train.images.shape()
        )));
    }
    if enc.embed_dim() != bench.head.dim() {
        return Err(Error::Shape(format!(
            "encoder embeds to {} dims, text head has {}",
            enc.embed_dim(),
            bench.head.dim()
        )));
    }
    Ok(enc)
}

fn train_stage(
    enc: VisionEncoder<f32>,
    bench: &Benchmark,
    cfg: &TrainConfig,
    plan: &CheckpointPlan,
) -> (TrainState, simclip_core::Result<()>) {
    let n = bench.train.len();
    let mut state = TrainState::new(enc, cfg, cfg.schedule_len(n));
    let outcome = cfg
        .validate(n)
        .and_then(|_| run_steps(&mut state, &bench.train, Some(&bench.head), cfg, cfg.planned_updates(n), plan));
    (state, outcome)
}

/// Execute every configured stage and persist the run. On a collapse halt
/// the record is still written (with `collapsed_at` set) before the error
/// is returned.
pub fn run_experiment(config: &ExperimentConfig, run_root: &Path) -> simclip_core::Result<RunRecord> {
    config.validate()?;
    let started = Instant::now();
    let id = experiment_run_id(config);
    let dir = RunDir::create(run_root, &id)?;
    let mut record = RunRecord::empty(id, serde_json::to_value(config)?);
    record.artifacts.insert("config".into(), dir.write("config.toml", config.to_toml_string().as_bytes())?);

    let bench = Benchmark::from_spec(&config.data, config.model.embed_dim, config.model.text_seed)?;
    let mut enc = initial_encoder(config, &bench)?;

    if let Some(pre) = &config.pretrain {
        let (state, outcome) = train_stage(enc, &bench, pre, &CheckpointPlan::default());
        outcome?;
        enc = state.encoder;
        save_checkpoint(&enc, &dir.checkpoints().join("pretrained.ckpt"), &pre.digest())?;
        record.artifacts.insert("pretrained".into(), "checkpoints/pretrained.ckpt".into());
    }

    if let Some(train) = &config.train {
        let plan = CheckpointPlan {
            dir: Some(dir.checkpoints()),
        };
        let (state, outcome) = train_stage(enc, &bench, train, &plan);
        record.train = Some(train.clone());
        record.losses = state.losses.clone();
        record.collapse_trace = state.collapse_trace.clone();
        record.lrs = state.lrs.clone();
        record.collapsed_at = state.collapsed_at;
        record.max_perturbation = state.max_perturbation;
        record.artifacts.insert("losses".into(), dir.write("losses.csv", record.losses_csv().as_bytes())?);
        if let Err(e) = outcome {
            if matches!(e, Error::Collapse { .. }) {
                record.artifacts.insert("collapse".into(), dir.write("reports/collapse.txt", format!("{e}\n").as_bytes())?);
                record.wall_clock_secs = started.elapsed().as_secs_f64();
                record.save_json(&dir.record())?;
            }
            return Err(e);
        }
        enc = state.encoder;
        save_checkpoint(&enc, &dir.checkpoints().join("final.ckpt"), &train.digest())?;
        record.artifacts.insert("final".into(), "checkpoints/final.ckpt".into());
    }

    let name = config.name.clone();
    if let Some(ev) = &config.eval {
        let report = eval_zero_shot(&enc, &bench.head, &bench.eval, ev)?;
        record.artifacts.insert("zeroshot".into(), dir.write_json("reports/zeroshot.json", &report)?);
        record.eval.push(NamedEval {
            encoder: name.clone(),
            report,
        });
    }

    if let Some(t) = &config.targeted {
        let slice = bench.eval.subset(t.images, t.image_seed);
        let ids = caption_ids(&bench, &t.targets)?;
        let report = targeted_attack_eval(&enc, &bench.head, &slice.images, &slice.labels, &ids, &t.attack)?;
        record.artifacts.insert("targeted".into(), dir.write_json("reports/targeted.json", &report)?);
        record.artifacts.insert("targeted_csv".into(), dir.write("reports/targeted.csv", report.to_csv(&name).as_bytes())?);
        record.targeted.push(NamedTargeted {
            encoder: name.clone(),
            report,
        });
    }

    if let Some(a) = &config.attack {
        let summary = run_attack_section(&enc, &bench, a)?;
        record.artifacts.insert("attack".into(), dir.write_json("reports/attack.json", &summary)?);
        record.artifacts.insert("attack_trace".into(), dir.write("reports/attack_trace.csv", summary.trace_csv().as_bytes())?);
    }

    record.wall_clock_secs = started.elapsed().as_secs_f64();
    record.artifacts.insert("record".into(), "record.json".into());
    record.save_json(&dir.record())?;
    Ok(record)
}

pub fn caption_ids(bench: &Benchmark, texts: &[String]) -> simclip_core::Result<Vec<usize>> {
    texts
        .iter()
        .map(|t| {
            bench
                .head
                .caption_id(t)
                .ok_or_else(|| Error::Config(vec![format!("target caption {t:?} is not in the caption bank")]))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackSummary {
    pub attacked: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub max_linf: f64,
    pub objective_trace: Vec<f64>,
}

impl AttackSummary {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,mean_objective\n");
        for (i, v) in self.objective_trace.iter().enumerate() {
            out.push_str(&format!("{i},{v}\n"));
        }
        out
    }
}

pub fn run_attack_section(
    enc: &VisionEncoder<f32>,
    bench: &Benchmark,
    section: &simclip_core::config::AttackSection,
) -> simclip_core::Result<AttackSummary> {
    let slice = bench.eval.subset(section.images, section.image_seed);
    let cfg = section.attack_config();
    let clean = enc.encode(&slice.images, true)?;
    let target_ids: Vec<usize> = match &section.target_caption {
        Some(text) => {
            let id = caption_ids(bench, std::slice::from_ref(text))?[0];
            let id = if section.objective == simclip_core::attacks::Objective::EmbeddingTargeted {
                id
            } else {
                bench.head.captions()[id].class.ok_or_else(|| {
                    Error::Config(vec![format!("attack.target_caption {text:?} has no class; class-targeted objectives need a class caption")])
                })?
            };
            vec![id; slice.len()]
        }
        None => Vec::new(),
    };
    let mut ctx = ObjectiveContext::new(section.temperature)
        .with_head(&bench.head)
        .with_labels(&slice.labels)
        .with_clean_embeddings(&clean);
    if cfg.target == Some(TargetSpec::PerExample) {
        ctx = ctx.with_targets(&target_ids);
    }
    let res = attack(enc, &slice.images, &cfg, &ctx)?;
    let successes = res.success_count();
    Ok(AttackSummary {
        attacked: slice.len(),
        successes,
        success_rate: successes as f64 / slice.len() as f64,
        max_linf: res.adversarial.linf_distance(&slice.images),
        objective_trace: res.objective_trace,
    })
}

//! Packaged experiments: the stop-gradient ablation and the targeted
//! caption-attack table.

use std::path::{Path, PathBuf};

use serde::Serialize;
use simclip_core::config::TargetedSection;
use simclip_core::eval::targeted_attack_eval;
use simclip_core::finetune::{finetune, CheckpointPlan, TrainConfig};
use simclip_core::presets::{clean_pretrain, simclip, Benchmark};
use simclip_core::record::run_id;
use simclip_core::{RunRecord, TargetedAttackReport, VisionEncoder};

use crate::runs::{caption_ids, RunDir};

pub const FIG4_NAME: &str = "fig4_stopgrad";
pub const TABLE2_NAME: &str = "table2_targeted";

/// Output directory for a packaged experiment: `<root>/<name>-<digest>-s<seed>`.
fn experiment_dir<S: Serialize>(root: &Path, name: &str, params: &S, seed: u64) -> simclip_core::Result<RunDir> {
    let digest = simclip_core::finetune::config_digest(params);
    RunDir::create(root, &format!("{name}-{}", run_id(&digest, seed)))
}

#[derive(Debug, Clone, Serialize)]
pub struct StopGradOutcome {
    pub dir: PathBuf,
    pub with_stop_grad: RunRecord,
    pub without_stop_grad: RunRecord,
    pub terminal_with: f64,
    pub terminal_without: f64,
}

impl StopGradOutcome {
    pub fn terminal_gap(&self) -> f64 {
        (self.terminal_with - self.terminal_without).abs()
    }
}

/// Mean of the last `k` losses.
pub fn terminal_loss(losses: &[f64], k: usize) -> f64 {
    let tail = &losses[losses.len().saturating_sub(k)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

/// Train the same encoder twice from `init`, once with and once without
/// stop-gradient, and write both loss curves. Collapse does not halt
/// either run so the full curves are recorded.
pub fn fig4_stopgrad(
    root: &Path,
    bench: &Benchmark,
    init: &VisionEncoder<f32>,
    base: &TrainConfig,
) -> simclip_core::Result<StopGradOutcome> {
    let base = TrainConfig {
        halt_on_collapse: false,
        ..base.clone()
    };
    let dir = experiment_dir(root, FIG4_NAME, &base, base.seed)?;
    let mut runs = Vec::new();
    for (stop_grad, file) in [(true, "losses_stopgrad.csv"), (false, "losses_no_stopgrad.csv")] {
        let cfg = TrainConfig { stop_grad, ..base.clone() };
        let (_, mut rec) = finetune(init, &bench.train, Some(&bench.head), &cfg, &CheckpointPlan::default())?;
        rec.artifacts.insert("losses".into(), dir.write(file, rec.losses_csv().as_bytes())?);
        runs.push(rec);
    }
    let without = runs.pop().expect("two runs");
    let with = runs.pop().expect("two runs");
    let window = 10;
    let outcome = StopGradOutcome {
        dir: dir.root.clone(),
        terminal_with: terminal_loss(&with.losses, window),
        terminal_without: terminal_loss(&without.losses, window),
        with_stop_grad: with.without_timing(),
        without_stop_grad: without.without_timing(),
    };
    dir.write_json("reports/summary.json", &serde_json::json!({
        "terminal_loss_with_stop_grad": outcome.terminal_with,
        "terminal_loss_without_stop_grad": outcome.terminal_without,
        "terminal_gap": outcome.terminal_gap(),
        "collapsed_at_with_stop_grad": outcome.with_stop_grad.collapsed_at,
        "collapsed_at_without_stop_grad": outcome.without_stop_grad.collapsed_at,
        "train": base,
    }))?;
    Ok(outcome)
}

/// The undefended baseline and the two fine-tuned variants, trained with
/// the packaged recipes.
pub fn packaged_encoders(bench: &Benchmark, seed: u64) -> simclip_core::Result<Vec<(String, VisionEncoder<f32>)>> {
    let init = bench.init_encoder(seed)?;
    let plan = CheckpointPlan::default();
    let (baseline, _) = finetune(&init, &bench.train, Some(&bench.head), &clean_pretrain(), &plan)?;
    let mut out = vec![("baseline".to_string(), baseline.clone())];
    for (name, eps) in [("simclip_eps2", 2.0 / 255.0), ("simclip_eps4", 4.0 / 255.0)] {
        let (enc, _) = finetune(&baseline, &bench.train, Some(&bench.head), &simclip(eps), &plan)?;
        out.push((name.to_string(), enc));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct TargetedTable {
    pub encoders: Vec<String>,
    pub targets: Vec<String>,
    /// `success[target][encoder]` as a rate in [0, 1].
    pub success: Vec<Vec<f64>>,
    pub mean_success: Vec<f64>,
    pub average_cider: Vec<f64>,
    pub reports: Vec<TargetedAttackReport>,
}

impl TargetedTable {
    /// One row per target string, then the mean and CIDEr rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!("target,{}\n", self.encoders.join(","));
        let fmt = |xs: &[f64]| xs.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(",");
        for (t, row) in self.targets.iter().zip(&self.success) {
            out.push_str(&format!("\"{}\",{}\n", t.replace('"', "\"\""), fmt(row)));
        }
        out.push_str(&format!("mean_success_rate,{}\n", fmt(&self.mean_success)));
        out.push_str(&format!("average_cider,{}\n", fmt(&self.average_cider)));
        out
    }
}

/// Attack every encoder toward each configured target on the same eval
/// slice and tabulate success rates.
pub fn table2_targeted(
    root: &Path,
    bench: &Benchmark,
    encoders: &[(String, VisionEncoder<f32>)],
    section: &TargetedSection,
) -> simclip_core::Result<(PathBuf, TargetedTable)> {
    let slice = bench.eval.subset(section.images, section.image_seed);
    let ids = caption_ids(bench, &section.targets)?;
    let mut reports = Vec::new();
    for (_, enc) in encoders {
        reports.push(targeted_attack_eval(enc, &bench.head, &slice.images, &slice.labels, &ids, &section.attack)?);
    }
    let success = (0..section.targets.len())
        .map(|t| {
            reports
                .iter()
                .map(|r| r.per_target[t].successes as f64 / r.per_target[t].attacked.max(1) as f64)
                .collect()
        })
        .collect();
    let table = TargetedTable {
        encoders: encoders.iter().map(|(n, _)| n.clone()).collect(),
        targets: section.targets.clone(),
        success,
        mean_success: reports.iter().map(|r| r.mean_success_rate).collect(),
        average_cider: reports.iter().map(|r| r.average_cider).collect(),
        reports,
    };
    let dir = experiment_dir(root, TABLE2_NAME, &(section, &table.encoders), section.attack.seed)?;
    dir.write("reports/table2_targeted.csv", table.to_csv().as_bytes())?;
    dir.write_json("reports/table2_targeted.json", &table)?;
    Ok((dir.root, table))
}

//! Side-by-side tables of zero-shot results from finished runs.

use std::path::Path;

use serde::Serialize;
use simclip_core::{Error, RunRecord};

use crate::runs::RunDir;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub run_id: String,
    pub encoder: String,
    pub clean: f64,
    /// Same order as [`ComparisonTable::epsilons`].
    pub robust: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub epsilons: Vec<f64>,
    pub attack_config_digest: String,
    pub rows: Vec<ComparisonRow>,
    /// Row index of the best value per column: clean first, then one per ε.
    pub best: Vec<usize>,
}

/// Build the table from already-loaded records.
pub fn compare_records(records: &[RunRecord]) -> simclip_core::Result<ComparisonTable> {
    let mut rows = Vec::new();
    let mut reference: Option<(String, Vec<f64>)> = None;
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    for rec in sorted {
        for named in &rec.eval {
            let r = &named.report;
            let eps: Vec<f64> = r.robust_accuracy.iter().map(|p| p.epsilon).collect();
            match &reference {
                None => reference = Some((r.attack_config_digest.clone(), eps)),
                Some((digest, e)) if *digest != r.attack_config_digest || *e != eps => {
                    return Err(Error::IncompatibleRuns(format!(
                        "run {} was evaluated with attack config {} over {:?}, expected {} over {:?}",
                        rec.run_id, r.attack_config_digest, eps, digest, e
                    )));
                }
                Some(_) => {}
            }
            rows.push(ComparisonRow {
                run_id: rec.run_id.clone(),
                encoder: named.encoder.clone(),
                clean: r.clean_accuracy,
                robust: r.robust_accuracy.iter().map(|p| p.accuracy).collect(),
            });
        }
    }
    let Some((digest, epsilons)) = reference else {
        return Err(Error::IncompatibleRuns("none of the runs has a zero-shot evaluation".into()));
    };
    let columns = 1 + epsilons.len();
    let best = (0..columns)
        .map(|c| {
            let value = |r: &ComparisonRow| if c == 0 { r.clean } else { r.robust[c - 1] };
            (0..rows.len()).fold(0, |b, i| if value(&rows[i]) > value(&rows[b]) { i } else { b })
        })
        .collect();
    Ok(ComparisonTable {
        epsilons,
        attack_config_digest: digest,
        rows,
        best,
    })
}

/// Load `ids` from `run_root` and compare them. Needs at least two runs.
pub fn compare_runs(run_root: &Path, ids: &[String]) -> simclip_core::Result<ComparisonTable> {
    if ids.len() < 2 {
        return Err(Error::IncompatibleRuns(format!("need at least two runs, got {}", ids.len())));
    }
    let records = ids
        .iter()
        .map(|id| RunRecord::load_json(&RunDir::open(run_root, id)?.record()))
        .collect::<simclip_core::Result<Vec<_>>>()?;
    compare_records(&records)
}

fn eps_label(eps: f64) -> String {
    format!("{}/255", (eps * 255.0 * 1000.0).round() / 1000.0)
}

impl ComparisonTable {
    fn cell(&self, row: usize, col: usize) -> f64 {
        let r = &self.rows[row];
        if col == 0 {
            r.clean
        } else {
            r.robust[col - 1]
        }
    }

    fn headers(&self) -> Vec<String> {
        std::iter::once("clean".to_string())
            .chain(self.epsilons.iter().map(|e| format!("robust@{}", eps_label(*e))))
            .collect()
    }

    /// Best cells carry a trailing `*`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("run_id,encoder,{}\n", self.headers().join(","));
        for i in 0..self.rows.len() {
            let r = &self.rows[i];
            let cells: Vec<String> = (0..self.best.len())
                .map(|c| {
                    let mark = if self.best[c] == i { "*" } else { "" };
                    format!("{:.4}{mark}", self.cell(i, c))
                })
                .collect();
            out.push_str(&format!("{},{},{}\n", r.run_id, r.encoder, cells.join(",")));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

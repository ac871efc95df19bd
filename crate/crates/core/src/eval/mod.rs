//! Zero-shot accuracy (clean and under attack), caption retrieval, targeted
//! attack accounting and caption scoring.

mod cider;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use cider::{cider_image, cider_score, CiderCorpus};

use crate::attacks::{apgd, attack, AttackConfig, AttackMethod, Objective, ObjectiveContext, TargetSpec};
use crate::batch::{dot, EmbeddingBatch, ImageBatch};
use crate::data::Dataset;
use crate::encoder::VisionEncoder;
use crate::error::{Error, Result};
use crate::finetune::config_digest;
use crate::text::{argmax, zero_shot_logits, TextHead};

/// Fraction of positions where `predictions` equals `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Shape("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Zero-shot logits for a batch, row-major `N x K`.
pub fn logits(encoder: &VisionEncoder<f32>, head: &TextHead, images: &ImageBatch<f32>, temperature: f64) -> Result<Vec<f32>> {
    let emb = encoder.encode(images, true)?;
    zero_shot_logits(&emb, head, temperature)
}

/// Zero-shot class predictions (highest cosine, lowest index on ties).
pub fn predict(encoder: &VisionEncoder<f32>, head: &TextHead, images: &ImageBatch<f32>) -> Result<Vec<usize>> {
    let k = head.num_classes();
    Ok(logits(encoder, head, images, 1.0)?.chunks_exact(k).map(argmax).collect())
}

/// Index of the caption whose embedding has the highest cosine with `emb`;
/// the lowest id wins ties.
pub fn nearest_caption(emb: &[f32], bank: &EmbeddingBatch<f32>) -> usize {
    let scores: Vec<f32> = bank.rows().map(|c| dot(emb, c)).collect();
    argmax(&scores)
}

fn caption_bank(head: &TextHead) -> Result<&EmbeddingBatch<f32>> {
    head.caption_embeddings()
        .filter(|b| !b.is_empty())
        .ok_or_else(|| Error::Shape("the text head has no caption bank".into()))
}

/// Caption id retrieved for one image.
pub fn retrieve_caption(encoder: &VisionEncoder<f32>, image: &[f32], head: &TextHead) -> Result<usize> {
    let bank = caption_bank(head)?;
    let batch = ImageBatch::new(encoder.arch().input, image.to_vec())?;
    let emb = encoder.encode(&batch, true)?;
    Ok(nearest_caption(emb.row(0), bank))
}

/// Caption ids retrieved for a whole batch.
pub fn retrieve_captions(encoder: &VisionEncoder<f32>, images: &ImageBatch<f32>, head: &TextHead) -> Result<Vec<usize>> {
    let bank = caption_bank(head)?;
    let emb = encoder.encode(images, true)?;
    Ok(emb.rows().map(|r| nearest_caption(r, bank)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroShotAttack {
    /// APGD on the targeted DLR loss, once per target class (needs K ≥ 4).
    ApgdDlrTargeted,
    /// APGD on cross-entropy.
    ApgdCe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZeroShotConfig {
    pub attack: ZeroShotAttack,
    pub epsilons: Vec<f64>,
    pub steps: usize,
    /// Number of examples attacked; `None` attacks every example.
    pub subset: Option<usize>,
    pub subset_seed: u64,
    /// Target classes tried per example for the DLR attack, taken from the
    /// highest-scoring wrong classes.
    pub dlr_targets: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        Self {
            attack: ZeroShotAttack::ApgdDlrTargeted,
            epsilons: vec![2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0],
            steps: 100,
            subset: Some(500),
            subset_seed: 0,
            dlr_targets: 3,
            temperature: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustPoint {
    pub epsilon: f64,
    pub accuracy: f64,
    pub robust: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clean_accuracy: f64,
    pub clean_count: usize,
    /// Ascending in ε.
    pub robust_accuracy: Vec<RobustPoint>,
    pub sample_count: usize,
    pub attack_config_digest: String,
}

impl EvalReport {
    pub fn robust_at(&self, epsilon: f64) -> Option<f64> {
        self.robust_accuracy
            .iter()
            .find(|p| (p.epsilon - epsilon).abs() < 1e-12)
            .map(|p| p.accuracy)
    }
}

/// Wrong classes ordered by descending logit.
fn top_wrong(logits: &[f32], label: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).filter(|&k| k != label).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order
}

/// Clean accuracy on every example and robust accuracy on the attacked
/// subset for each ε.
///
/// Budgets are processed in ascending order and an example counts as robust
/// at ε only if it survived every smaller budget too, so the reported curve
/// is nonincreasing by construction. Examples already broken are not
/// attacked again.
pub fn eval_zero_shot(encoder: &VisionEncoder<f32>, head: &TextHead, dataset: &Dataset, config: &ZeroShotConfig) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let k = head.num_classes();
    if config.attack == ZeroShotAttack::ApgdDlrTargeted && k < 4 {
        return Err(Error::UnsupportedObjective(format!("targeted DLR needs at least 4 classes, got {k}")));
    }
    if let Some(bad) = config.epsilons.iter().find(|e| !(**e >= 0.0 && **e < 1.0)) {
        return Err(Error::AttackConfig(format!("epsilon {bad} is outside [0, 1)")));
    }
    if config.steps == 0 {
        return Err(Error::AttackConfig("evaluation attacks need at least one step".into()));
    }
    let clean_pred = predict(encoder, head, &dataset.images)?;
    let clean_accuracy = accuracy(&clean_pred, &dataset.labels)?;

    let slice = match config.subset {
        Some(m) if m < dataset.len() => dataset.subset(m, config.subset_seed),
        _ => dataset.clone(),
    };
    let n = slice.len();
    let clean_logits = logits(encoder, head, &slice.images, config.temperature)?;
    let mut alive: Vec<bool> = clean_logits
        .chunks_exact(k)
        .zip(&slice.labels)
        .map(|(l, y)| argmax(l) == *y)
        .collect();

    let mut epsilons = config.epsilons.clone();
    epsilons.sort_by(f64::total_cmp);
    epsilons.dedup();
    let mut robust_accuracy = Vec::with_capacity(epsilons.len());
    for &eps in &epsilons {
        if eps > 0.0 {
            let rounds = match config.attack {
                ZeroShotAttack::ApgdCe => 1,
                ZeroShotAttack::ApgdDlrTargeted => config.dlr_targets.clamp(1, k - 1),
            };
            for round in 0..rounds {
                let idx: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
                if idx.is_empty() {
                    break;
                }
                let images = slice.images.select(&idx);
                let labels: Vec<usize> = idx.iter().map(|&i| slice.labels[i]).collect();
                let (objective, targets) = match config.attack {
                    ZeroShotAttack::ApgdCe => (Objective::CeUntargeted, None),
                    ZeroShotAttack::ApgdDlrTargeted => {
                        let t: Vec<usize> = idx
                            .iter()
                            .map(|&i| top_wrong(&clean_logits[i * k..(i + 1) * k], slice.labels[i])[round])
                            .collect();
                        (Objective::DlrTargeted, Some(t))
                    }
                };
                let mut cfg = AttackConfig::apgd(eps, config.steps, objective);
                cfg.seed = config.seed;
                cfg.stop_on_success = true;
                let mut ctx = ObjectiveContext::new(config.temperature)
                    .with_head(head)
                    .with_labels(&labels);
                if let Some(t) = &targets {
                    cfg.target = Some(TargetSpec::PerExample);
                    ctx = ctx.with_targets(t);
                }
                let result = apgd(encoder, &images, &cfg, &ctx)?;
                let adv_pred = predict(encoder, head, &result.adversarial)?;
                for (j, &i) in idx.iter().enumerate() {
                    if adv_pred[j] != labels[j] {
                        alive[i] = false;
                    }
                }
            }
        }
        let robust = alive.iter().filter(|a| **a).count();
        robust_accuracy.push(RobustPoint {
            epsilon: eps,
            accuracy: robust as f64 / n as f64,
            robust,
        });
    }
    Ok(EvalReport {
        clean_accuracy,
        clean_count: dataset.len(),
        robust_accuracy,
        sample_count: n,
        attack_config_digest: config_digest(config),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetedConfig {
    pub method: AttackMethod,
    pub epsilon: f64,
    pub steps: usize,
    /// PGD step size as a fraction of ε (APGD picks its own).
    pub step_fraction: f64,
    pub stop_on_success: bool,
    pub seed: u64,
}

impl Default for TargetedConfig {
    fn default() -> Self {
        Self {
            method: AttackMethod::Apgd,
            epsilon: 4.0 / 255.0,
            steps: 1000,
            step_fraction: 0.25,
            stop_on_success: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRow {
    pub target: String,
    pub caption_id: usize,
    pub successes: usize,
    pub attacked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetedAttackReport {
    pub per_target: Vec<TargetRow>,
    pub mean_success_rate: f64,
    /// Mean score of the retrieved caption against the true class captions,
    /// over every attacked (image, target) pair.
    pub average_cider: f64,
    pub epsilon: f64,
    pub steps: usize,
}

impl TargetedAttackReport {
    /// Total successes over total attacked, from the per-target tallies.
    pub fn tallied_rate(&self) -> f64 {
        let s: usize = self.per_target.iter().map(|r| r.successes).sum();
        let a: usize = self.per_target.iter().map(|r| r.attacked).sum();
        s as f64 / a as f64
    }

    /// CSV with one row per target plus a mean row.
    pub fn to_csv(&self, encoder_name: &str) -> String {
        let mut out = String::from("encoder,epsilon,target,successes,attacked\n");
        for r in &self.per_target {
            out.push_str(&format!(
                "{encoder_name},{},\"{}\",{},{}\n",
                self.epsilon,
                r.target.replace('"', "\"\""),
                r.successes,
                r.attacked
            ));
        }
        out.push_str(&format!(
            "{encoder_name},{},mean_success_rate,{},\n{encoder_name},{},average_cider,{},\n",
            self.epsilon, self.mean_success_rate, self.epsilon, self.average_cider
        ));
        out
    }
}

/// References for caption scoring: each image's true-class captions.
pub fn class_references(head: &TextHead, labels: &[usize]) -> Result<CiderCorpus> {
    let mut refs = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        let texts: Vec<String> = head
            .captions()
            .iter()
            .filter(|c| c.class == Some(y))
            .map(|c| c.text.clone())
            .collect();
        if texts.is_empty() {
            return Err(Error::Shape(format!("no bank captions for class {y}")));
        }
        refs.insert(format!("img{i:05}"), texts);
    }
    Ok(CiderCorpus::new(refs))
}

/// Attack every image toward every target caption. Success means the
/// adversarial image retrieves exactly the target caption.
pub fn targeted_attack_eval(
    encoder: &VisionEncoder<f32>,
    head: &TextHead,
    images: &ImageBatch<f32>,
    labels: &[usize],
    targets: &[usize],
    config: &TargetedConfig,
) -> Result<TargetedAttackReport> {
    let bank = caption_bank(head)?;
    if labels.len() != images.len() {
        return Err(Error::Shape(format!("{} labels for {} images", labels.len(), images.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= bank.len()) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: bank.len(),
        });
    }
    let corpus = class_references(head, labels)?;
    let mut per_target = Vec::with_capacity(targets.len());
    let mut cider_total = 0.0;
    let mut pairs = 0usize;
    for &t in targets {
        let adversarial = if config.epsilon == 0.0 {
            images.clone()
        } else {
            let mut cfg = AttackConfig::pgd(config.epsilon, config.steps, Objective::EmbeddingTargeted).with_target(TargetSpec::Index(t));
            cfg.method = config.method;
            cfg.alpha = config.step_fraction * config.epsilon;
            cfg.seed = config.seed;
            cfg.stop_on_success = config.stop_on_success;
            let ctx = ObjectiveContext::new(1.0).with_head(head);
            attack(encoder, images, &cfg, &ctx)?.adversarial
        };
        let retrieved = retrieve_captions(encoder, &adversarial, head)?;
        let successes = retrieved.iter().filter(|&&r| r == t).count();
        for (i, &r) in retrieved.iter().enumerate() {
            cider_total += cider_image(&head.captions()[r].text, &format!("img{i:05}"), &corpus)?;
            pairs += 1;
        }
        per_target.push(TargetRow {
            target: head.captions()[t].text.clone(),
            caption_id: t,
            successes,
            attacked: images.len(),
        });
    }
    let mut report = TargetedAttackReport {
        per_target,
        mean_success_rate: 0.0,
        average_cider: if pairs == 0 { 0.0 } else { cider_total / pairs as f64 },
        epsilon: config.epsilon,
        steps: config.steps,
    };
    report.mean_success_rate = report.tallied_rate();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captions::caption_bank as build_bank;
    use crate::data::SyntheticSpec;
    use crate::encoder::ArchSpec;
    use crate::text::TextEmbedder;

    fn setup() -> (VisionEncoder<f32>, TextHead, Dataset) {
        let spec = SyntheticSpec {
            size: 8,
            ..SyntheticSpec::default()
        };
        let data = spec.generate(20, 1).unwrap();
        let enc = VisionEncoder::init(ArchSpec::small(spec.shape(), 32), 2).unwrap();
        let head = TextHead::build(&TextEmbedder::new(32, 7), &data.class_names, build_bank(&data.class_names)).unwrap();
        (enc, head, data)
    }

    #[test]
    fn accuracy_fractions() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn zero_budget_matches_clean_accuracy() {
        let (enc, head, data) = setup();
        let cfg = ZeroShotConfig {
            epsilons: vec![0.0],
            subset: None,
            ..ZeroShotConfig::default()
        };
        let rep = eval_zero_shot(&enc, &head, &data, &cfg).unwrap();
        assert_eq!(rep.robust_accuracy[0].accuracy, rep.clean_accuracy);
    }

    #[test]
    fn dlr_needs_four_classes() {
        let (enc, _, data) = setup();
        let names: Vec<String> = data.class_names[..3].to_vec();
        let head = TextHead::build(&TextEmbedder::new(32, 7), &names, vec![]).unwrap();
        let small = Dataset::new(data.images.select(&[0]), vec![0], names).unwrap();
        let err = eval_zero_shot(&enc, &head, &small, &ZeroShotConfig::default()).unwrap_err();
        assert!(matches!(err, Error::UnsupportedObjective(_)));
    }

    #[test]
    fn robust_curve_is_nonincreasing_and_eval_is_read_only() {
        let (enc, head, data) = setup();
        let before = enc.clone();
        let cfg = ZeroShotConfig {
            steps: 5,
            dlr_targets: 1,
            ..ZeroShotConfig::default()
        };
        let rep = eval_zero_shot(&enc, &head, &data, &cfg).unwrap();
        assert_eq!(rep.robust_accuracy.len(), 3);
        for w in rep.robust_accuracy.windows(2) {
            assert!(w[1].robust <= w[0].robust);
        }
        assert_eq!(enc, before);
    }

    #[test]
    fn retrieval_picks_matching_bank_entry() {
        let rows: Vec<Vec<f32>> = (0..10)
            .map(|i| (0..4).map(|j| if i % 4 == j { 1.0 } else { 0.1 * i as f32 }).collect())
            .collect();
        let bank = EmbeddingBatch::from_rows(&rows, false).unwrap().normalized().unwrap();
        assert_eq!(nearest_caption(bank.row(7), &bank), 7);
        let mut permuted = rows.clone();
        permuted.swap(7, 2);
        let bank2 = EmbeddingBatch::from_rows(&permuted, false).unwrap().normalized().unwrap();
        assert_eq!(nearest_caption(bank.row(7), &bank2), 2);
    }

    #[test]
    fn zero_budget_targeted_eval_counts_only_clean_hits() {
        let (enc, head, data) = setup();
        let clean = retrieve_captions(&enc, &data.images, &head).unwrap();
        let target = head.caption_id(crate::captions::TARGET_STRINGS[3]).unwrap();
        let cfg = TargetedConfig {
            epsilon: 0.0,
            ..TargetedConfig::default()
        };
        let rep = targeted_attack_eval(&enc, &head, &data.images, &data.labels, &[target], &cfg).unwrap();
        assert_eq!(rep.per_target[0].successes, clean.iter().filter(|&&c| c == target).count());
        assert_eq!(rep.mean_success_rate, rep.tallied_rate());
        let bad = targeted_attack_eval(&enc, &head, &data.images, &data.labels, &[999], &cfg);
        assert!(matches!(bad, Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn targeted_attack_breaks_an_untrained_encoder() {
        let (enc, head, data) = setup();
        let images = data.images.select(&[0, 1, 2, 3]);
        let target = head.caption_id(crate::captions::TARGET_STRINGS[0]).unwrap();
        let cfg = TargetedConfig {
            epsilon: 8.0 / 255.0,
            steps: 50,
            ..TargetedConfig::default()
        };
        let rep = targeted_attack_eval(&enc, &head, &images, &data.labels[..4], &[target], &cfg).unwrap();
        assert!(rep.per_target[0].successes >= 1, "{rep:?}");
    }
}

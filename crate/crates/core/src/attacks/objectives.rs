//! Attack objectives. Every objective is maximized by the attacks.

use crate::batch::{dot, l2_norm, normalize_backward, EmbeddingBatch};
use crate::encoder::VisionEncoder;
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::scalar::Scalar;
use crate::text::argmax;

use super::Objective;

/// Mean cross-entropy objective: the true-label cross-entropy when
/// untargeted, the negated target-label cross-entropy when targeted.
pub fn ce_objective<T: Scalar>(logits: &[T], classes: usize, labels: &[usize], targeted: bool) -> Result<T> {
    let (per, _) = cross_entropy(logits, classes, labels)?;
    let n = T::from_usize(per.len().max(1)).unwrap();
    let mean = per.into_iter().sum::<T>() / n;
    Ok(if targeted { -mean } else { mean })
}

/// Targeted difference-of-logits-ratio for one example and its gradient with
/// respect to the logits: `-(z_y - z_t) / (z_π1 - (z_π3 + z_π4) / 2)` with
/// `π` sorting logits in decreasing order.
pub fn dlr_targeted_single<T: Scalar>(logits: &[T], label: usize, target: usize) -> Result<(T, Vec<T>)> {
    let k = logits.len();
    if k < 4 {
        return Err(Error::UnsupportedObjective(format!(
            "targeted DLR needs at least 4 classes, got {k}"
        )));
    }
    for l in [label, target] {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, classes: k });
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    // stable sort keeps ties in index order
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal));
    let (p1, p3, p4) = (order[0], order[2], order[3]);
    let half = T::lit(0.5);
    let num = logits[label] - logits[target];
    let den = logits[p1] - half * (logits[p3] + logits[p4]) + T::lit(1e-12);
    let value = -num / den;
    let mut grad = vec![T::zero(); k];
    grad[label] = grad[label] - T::one() / den;
    grad[target] = grad[target] + T::one() / den;
    // d/d den of (-num/den) = num / den^2
    let dden = num / (den * den);
    grad[p1] = grad[p1] + dden;
    grad[p3] = grad[p3] - half * dden;
    grad[p4] = grad[p4] - half * dden;
    Ok((value, grad))
}

/// Mean targeted DLR over a batch of row-major `N x K` logits.
pub fn dlr_targeted_objective<T: Scalar>(logits: &[T], classes: usize, labels: &[usize], targets: &[usize]) -> Result<T> {
    if classes == 0 || logits.len() != classes * labels.len() || labels.len() != targets.len() {
        return Err(Error::Shape("logits, labels and targets disagree in size".into()));
    }
    let mut total = T::zero();
    for ((row, &y), &t) in logits.chunks_exact(classes).zip(labels).zip(targets) {
        total = total + dlr_targeted_single(row, y, t)?.0;
    }
    Ok(total / T::from_usize(labels.len().max(1)).unwrap())
}

/// Embedding-space objectives, averaged over rows.
///
/// Without a target: mean squared ℓ2 distance of `adv` from `clean`. With a
/// target: mean negative squared ℓ2 distance of `adv` to `target`.
pub fn embedding_objectives<T: Scalar>(clean: &EmbeddingBatch<T>, adv: &EmbeddingBatch<T>, target: Option<&EmbeddingBatch<T>>, objective: Objective) -> Result<T> {
    let reference = match objective {
        Objective::EmbeddingMax => clean,
        Objective::EmbeddingTargeted => target.ok_or_else(|| {
            Error::AttackConfig("embedding_targeted needs a target embedding".into())
        })?,
        other => {
            return Err(Error::UnsupportedObjective(format!(
                "{other:?} is not an embedding objective"
            )))
        }
    };
    if reference.dim() != adv.dim() || reference.len() != adv.len() {
        return Err(Error::Shape("embedding batches differ in shape".into()));
    }
    let sign = if objective == Objective::EmbeddingMax { T::one() } else { -T::one() };
    let total: T = adv
        .rows()
        .zip(reference.rows())
        .map(|(a, r)| a.iter().zip(r).map(|(x, y)| (*x - *y) * (*x - *y)).sum::<T>())
        .sum();
    Ok(sign * total / T::from_usize(adv.len()).unwrap())
}

/// Value, input gradient and success flag at one iterate.
pub(crate) struct Evaluation<T> {
    pub value: T,
    pub grad: Option<Vec<T>>,
    pub success: bool,
}

/// Objective specialized to one example.
pub(crate) struct ExampleObjective<'a, T> {
    pub encoder: &'a VisionEncoder<T>,
    pub kind: Objective,
    pub classes: Option<&'a [Vec<T>]>,
    pub inv_temperature: T,
    pub label: Option<usize>,
    pub target: Option<usize>,
    pub clean: Option<&'a [T]>,
    pub target_embedding: Option<&'a [T]>,
    pub captions: Option<&'a [Vec<T>]>,
}

impl<T: Scalar> ExampleObjective<'_, T> {
    pub fn evaluate(&self, x: &[T], need_grad: bool) -> Result<Evaluation<T>> {
        let (emb, tape) = self.encoder.forward_one(x);
        let (value, grad_emb, success) = match self.kind {
            Objective::CeUntargeted | Objective::CeTargeted | Objective::DlrTargeted => {
                let classes = self.classes.expect("validated");
                let norm = l2_norm(&emb);
                if norm == T::zero() {
                    return Err(Error::DegenerateEmbedding { row: 0 });
                }
                let unit: Vec<T> = emb.iter().map(|v| *v / norm).collect();
                let logits: Vec<T> = classes.iter().map(|c| dot(&unit, c) * self.inv_temperature).collect();
                let k = logits.len();
                let label = self.label.expect("validated");
                let pred = argmax(&logits);
                let (value, grad_logits, success) = match self.kind {
                    Objective::CeUntargeted => {
                        let (per, g) = cross_entropy(&logits, k, &[label])?;
                        (per[0], g, pred != label)
                    }
                    Objective::CeTargeted => {
                        let t = self.target.expect("validated");
                        let (per, g) = cross_entropy(&logits, k, &[t])?;
                        (-per[0], g.into_iter().map(|v| -v).collect(), pred == t)
                    }
                    _ => {
                        let t = self.target.expect("validated");
                        let (v, g) = dlr_targeted_single(&logits, label, t)?;
                        // the target only steers the search; any label flip counts
                        (v, g, pred != label)
                    }
                };
                let grad = need_grad.then(|| {
                    let mut g_unit = vec![T::zero(); unit.len()];
                    for (gk, c) in grad_logits.iter().zip(classes) {
                        let s = *gk * self.inv_temperature;
                        g_unit.iter_mut().zip(c).for_each(|(a, b)| *a = *a + s * *b);
                    }
                    normalize_backward(&emb, &g_unit)
                });
                (value, grad, success)
            }
            Objective::EmbeddingMax => {
                let clean = self.clean.expect("validated");
                let diff: Vec<T> = emb.iter().zip(clean).map(|(a, c)| *a - *c).collect();
                let value = diff.iter().map(|d| *d * *d).sum::<T>();
                let success = match (self.classes, self.label) {
                    (Some(classes), Some(label)) => {
                        let scores: Vec<T> = classes.iter().map(|c| dot(&emb, c)).collect();
                        argmax(&scores) != label
                    }
                    _ => false,
                };
                let two = T::lit(2.0);
                (value, need_grad.then(|| diff.iter().map(|d| two * *d).collect()), success)
            }
            Objective::EmbeddingTargeted => {
                let target = self.target_embedding.expect("validated");
                let norm = l2_norm(&emb);
                if norm == T::zero() {
                    return Err(Error::DegenerateEmbedding { row: 0 });
                }
                let unit: Vec<T> = emb.iter().map(|v| *v / norm).collect();
                let diff: Vec<T> = unit.iter().zip(target).map(|(a, t)| *a - *t).collect();
                let value = -diff.iter().map(|d| *d * *d).sum::<T>();
                let success = match (self.captions, self.target) {
                    (Some(caps), Some(t)) => {
                        let scores: Vec<T> = caps.iter().map(|c| dot(&unit, c)).collect();
                        argmax(&scores) == t
                    }
                    _ => false,
                };
                let two = T::lit(-2.0);
                let grad = need_grad.then(|| {
                    let g_unit: Vec<T> = diff.iter().map(|d| two * *d).collect();
                    normalize_backward(&emb, &g_unit)
                });
                (value, grad, success)
            }
        };
        let grad = grad_emb.map(|g| self.encoder.backward_one(&tape, &g, false).0);
        Ok(Evaluation {
            value,
            grad,
            success,
        })
    }
}

//! Fine-tuning losses over embedding batches, each with analytic gradients.
//!
//! Every loss reports the mean over the batch plus per-example values, and
//! the gradient of the mean with respect to each input that gradient is
//! allowed to reach.

use crate::batch::{dot, l2_norm, EmbeddingBatch};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Whether gradient flows from one loss term into each input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermFlow {
    pub into_first: bool,
    pub into_second: bool,
}

/// Gradient of a single loss term with respect to both inputs. A blocked
/// input carries an all-zero array.
#[derive(Debug, Clone, PartialEq)]
pub struct TermGrad<T> {
    pub flow: TermFlow,
    pub wrt_first: Vec<T>,
    pub wrt_second: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    pub per_example: Vec<T>,
    /// Gradient of `value` w.r.t. the first input (`R_p`, adversarial
    /// embedding or logits).
    pub grad_first: Vec<T>,
    /// Gradient of `value` w.r.t. the second input (`R_c` or clean
    /// embedding); empty when the loss has no second input.
    pub grad_second: Vec<T>,
    pub terms: Vec<TermGrad<T>>,
}

impl<T: Scalar> LossValue<T> {
    /// Which inputs receive any gradient at all.
    pub fn grad_flags(&self) -> TermFlow {
        TermFlow {
            into_first: self.terms.iter().any(|t| t.flow.into_first),
            into_second: self.terms.iter().any(|t| t.flow.into_second),
        }
    }

    fn from_terms(per_example: Vec<T>, terms: Vec<TermGrad<T>>) -> Self {
        let n = T::from_usize(per_example.len()).unwrap();
        let value = per_example.iter().copied().sum::<T>() / n;
        let mut grad_first = vec![T::zero(); terms[0].wrt_first.len()];
        let mut grad_second = vec![T::zero(); terms[0].wrt_second.len()];
        for t in &terms {
            grad_first.iter_mut().zip(&t.wrt_first).for_each(|(a, b)| *a = *a + *b);
            grad_second.iter_mut().zip(&t.wrt_second).for_each(|(a, b)| *a = *a + *b);
        }
        Self {
            value,
            per_example,
            grad_first,
            grad_second,
            terms,
        }
    }
}

fn check_pair<T: Scalar>(a: &EmbeddingBatch<T>, b: &EmbeddingBatch<T>) -> Result<()> {
    if a.len() != b.len() || a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "embedding batches differ: {}x{} vs {}x{}",
            a.len(),
            a.dim(),
            b.len(),
            b.dim()
        )));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty embedding batch".into()));
    }
    Ok(())
}

/// One negative-cosine term, scaled by `weight / N`, with gradient allowed
/// into the inputs named by `flow`.
fn cosine_term<T: Scalar>(p: &EmbeddingBatch<T>, c: &EmbeddingBatch<T>, weight: T, flow: TermFlow) -> Result<(Vec<T>, TermGrad<T>)> {
    let n = p.len();
    let scale = weight / T::from_usize(n).unwrap();
    let mut per = Vec::with_capacity(n);
    let mut gp = vec![T::zero(); p.data().len()];
    let mut gc = vec![T::zero(); c.data().len()];
    let d = p.dim();
    for (i, (pr, cr)) in p.rows().zip(c.rows()).enumerate() {
        let np = l2_norm(pr);
        let nc = l2_norm(cr);
        if np == T::zero() || nc == T::zero() {
            return Err(Error::DegenerateEmbedding { row: i });
        }
        let cos = dot(pr, cr) / (np * nc);
        per.push(-cos);
        // d(-cos)/dp = -(c_hat - cos * p_hat) / |p|
        if flow.into_first {
            for j in 0..d {
                gp[i * d + j] = -(cr[j] / nc - cos * pr[j] / np) / np * scale;
            }
        }
        if flow.into_second {
            for j in 0..d {
                gc[i * d + j] = -(pr[j] / np - cos * cr[j] / nc) / nc * scale;
            }
        }
    }
    Ok((
        per,
        TermGrad {
            flow,
            wrt_first: gp,
            wrt_second: gc,
        },
    ))
}

/// Negative cosine similarity `-(p/|p|)·(c/|c|)` per row, averaged.
pub fn neg_cosine<T: Scalar>(r_p: &EmbeddingBatch<T>, r_c: &EmbeddingBatch<T>) -> Result<LossValue<T>> {
    check_pair(r_p, r_c)?;
    let flow = TermFlow {
        into_first: true,
        into_second: true,
    };
    let (per, term) = cosine_term(r_p, r_c, T::one(), flow)?;
    Ok(LossValue::from_terms(per, vec![term]))
}

/// Symmetric Siamese loss
/// `½·negcos(R_p, sg(R_c)) + ½·negcos(R_c, sg(R_p))`.
///
/// With `stop_grad`, the first term only reaches `R_p` and the second only
/// reaches `R_c`. Without it both terms reach both inputs. The value is the
/// same either way.
pub fn simclip_loss<T: Scalar>(r_p: &EmbeddingBatch<T>, r_c: &EmbeddingBatch<T>, stop_grad: bool) -> Result<LossValue<T>> {
    check_pair(r_p, r_c)?;
    let half = T::lit(0.5);
    let first = TermFlow {
        into_first: true,
        into_second: !stop_grad,
    };
    let (per1, t1) = cosine_term(r_p, r_c, half, first)?;
    // second term is written with R_c in front; swap back to (R_p, R_c) order
    let second = TermFlow {
        into_first: true,
        into_second: !stop_grad,
    };
    let (per2, t2) = cosine_term(r_c, r_p, half, second)?;
    let t2 = TermGrad {
        flow: TermFlow {
            into_first: t2.flow.into_second,
            into_second: t2.flow.into_first,
        },
        wrt_first: t2.wrt_second,
        wrt_second: t2.wrt_first,
    };
    let per = per1.iter().zip(&per2).map(|(a, b)| half * (*a + *b)).collect();
    Ok(LossValue::from_terms(per, vec![t1, t2]))
}

/// Squared ℓ2 distance `|adv - clean|²` per row, averaged.
///
/// The clean branch is a constant reference unless `symmetric` is set.
pub fn fare_loss<T: Scalar>(clean: &EmbeddingBatch<T>, adv: &EmbeddingBatch<T>, symmetric: bool) -> Result<LossValue<T>> {
    check_pair(adv, clean)?;
    let n = T::from_usize(adv.len()).unwrap();
    let two = T::lit(2.0);
    let mut per = Vec::with_capacity(adv.len());
    let mut ga = Vec::with_capacity(adv.data().len());
    for (a, c) in adv.rows().zip(clean.rows()) {
        per.push(a.iter().zip(c).map(|(x, y)| (*x - *y) * (*x - *y)).sum());
        ga.extend(a.iter().zip(c).map(|(x, y)| two * (*x - *y) / n));
    }
    let gc = if symmetric {
        ga.iter().map(|g| -*g).collect()
    } else {
        vec![T::zero(); ga.len()]
    };
    let term = TermGrad {
        flow: TermFlow {
            into_first: true,
            into_second: symmetric,
        },
        wrt_first: ga,
        wrt_second: gc,
    };
    Ok(LossValue::from_terms(per, vec![term]))
}

/// Per-example cross-entropy of row-major `N x K` logits and the gradient of
/// the mean with respect to the logits.
pub fn cross_entropy<T: Scalar>(logits: &[T], classes: usize, labels: &[usize]) -> Result<(Vec<T>, Vec<T>)> {
    if classes == 0 || logits.len() != labels.len() * classes {
        return Err(Error::Shape(format!(
            "{} logits do not match {} labels x {classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let n = T::from_usize(labels.len()).unwrap();
    let mut per = Vec::with_capacity(labels.len());
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &y) in logits.chunks_exact(classes).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|z| (*z - max).exp()).sum();
        let lse = max + sum.ln();
        per.push(lse - row[y]);
        for (k, z) in row.iter().enumerate() {
            let p = (*z - lse).exp();
            let onehot = if k == y { T::one() } else { T::zero() };
            grad.push((p - onehot) / n);
        }
    }
    Ok((per, grad))
}

/// Supervised baseline: mean cross-entropy of zero-shot logits on
/// adversarial images against the true labels.
pub fn tecoa_loss<T: Scalar>(logits: &[T], classes: usize, labels: &[usize]) -> Result<LossValue<T>> {
    let (per, grad) = cross_entropy(logits, classes, labels)?;
    let term = TermGrad {
        flow: TermFlow {
            into_first: true,
            into_second: false,
        },
        wrt_first: grad,
        wrt_second: Vec::new(),
    };
    Ok(LossValue::from_terms(per, vec![term]))
}

/// Standard deviation of the normalized embeddings across the batch,
/// averaged over dimensions. Zero rows count as zero vectors.
pub fn collapse_metric<T: Scalar>(emb: &EmbeddingBatch<T>) -> f64 {
    let n = emb.len();
    let d = emb.dim();
    if n == 0 {
        return 0.0;
    }
    let rows: Vec<Vec<f64>> = emb
        .rows()
        .map(|r| {
            let v: Vec<f64> = r.iter().map(|x| x.to_f64().unwrap()).collect();
            let norm = l2_norm(&v);
            if norm > 0.0 {
                v.iter().map(|x| x / norm).collect()
            } else {
                v
            }
        })
        .collect();
    let mut total = 0.0;
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    total / d as f64
}

/// Flags collapse once the metric stays below `threshold` for `window`
/// consecutive observations.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseDetector {
    pub threshold: f64,
    pub window: usize,
    run: usize,
}

impl Default for CollapseDetector {
    fn default() -> Self {
        Self::new(0.01, 50)
    }
}

impl CollapseDetector {
    pub fn new(threshold: f64, window: usize) -> Self {
        Self {
            threshold,
            window,
            run: 0,
        }
    }

    /// Record one observation; returns `true` once collapse is detected.
    pub fn observe(&mut self, metric: f64) -> bool {
        if metric < self.threshold {
            self.run += 1;
        } else {
            self.run = 0;
        }
        self.run >= self.window
    }

    pub fn consecutive(&self) -> usize {
        self.run
    }

    /// Restore from a history of past observations.
    pub fn replay(threshold: f64, window: usize, history: &[f64]) -> Self {
        let mut d = Self::new(threshold, window);
        for m in history {
            d.observe(*m);
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[&[f64]]) -> EmbeddingBatch<f64> {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        EmbeddingBatch::from_rows(&rows, false).unwrap()
    }

    #[test]
    fn neg_cosine_hand_cases() {
        let v = batch(&[&[0.3, -2.0, 1.0]]);
        assert!((neg_cosine(&v, &v).unwrap().value + 1.0).abs() < 1e-12);
        let a = batch(&[&[1.0, 0.0]]);
        let b = batch(&[&[0.0, 1.0]]);
        assert_eq!(neg_cosine(&a, &b).unwrap().value, 0.0);
        let c = batch(&[&[1.0, 1.0]]);
        let got = neg_cosine(&a, &c).unwrap().value;
        assert!((got + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((got + 0.70711).abs() < 1e-5);
    }

    #[test]
    fn zero_row_is_degenerate() {
        let a = batch(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let b = batch(&[&[1.0, 0.0], &[1.0, 1.0]]);
        assert!(matches!(neg_cosine(&a, &b), Err(Error::DegenerateEmbedding { row: 1 })));
        assert!(simclip_loss(&b, &a, true).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = batch(&[&[1.0, 0.0]]);
        let b = batch(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(fare_loss(&a, &b, false), Err(Error::Shape(_))));
        assert!(neg_cosine(&a, &b).is_err());
    }

    #[test]
    fn simclip_hand_cases() {
        let a = batch(&[&[1.0, 0.0]]);
        let b = batch(&[&[0.0, 1.0]]);
        assert_eq!(simclip_loss(&a, &b, true).unwrap().value, 0.0);
        let v = batch(&[&[0.5, 0.5, -1.0]]);
        let l = simclip_loss(&v, &v, true).unwrap();
        assert!((l.value + 1.0).abs() < 1e-12);
        assert!(l.terms[0].wrt_second.iter().all(|g| *g == 0.0));
        assert!(l.terms[1].wrt_first.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn stop_grad_only_blocks_gradient_flow() {
        let a = batch(&[&[0.2, 1.0, -0.4], &[1.0, 1.0, 1.0]]);
        let b = batch(&[&[0.9, -0.1, 0.3], &[-1.0, 0.5, 2.0]]);
        let sg = simclip_loss(&a, &b, true).unwrap();
        let plain = simclip_loss(&a, &b, false).unwrap();
        assert_eq!(sg.value, plain.value);
        assert_eq!(
            sg.terms.iter().map(|t| t.flow).collect::<Vec<_>>(),
            [
                TermFlow { into_first: true, into_second: false },
                TermFlow { into_first: false, into_second: true },
            ]
        );
        assert_eq!(plain.grad_flags(), TermFlow { into_first: true, into_second: true });
        // without a predictor the two settings differ by a factor of two
        for (g, h) in sg.grad_first.iter().zip(&plain.grad_first) {
            assert!((2.0 * g - h).abs() < 1e-12);
        }
    }

    #[test]
    fn fare_hand_cases() {
        let clean = batch(&[&[0.0, 0.0, 0.0]]);
        let adv = batch(&[&[1.0, 2.0, 2.0]]);
        let l = fare_loss(&clean, &adv, false).unwrap();
        assert_eq!(l.value, 9.0);
        assert!(l.grad_second.iter().all(|g| *g == 0.0));
        assert!(!l.grad_flags().into_second);
        assert_eq!(fare_loss(&clean, &clean, false).unwrap().value, 0.0);
        let doubled = batch(&[&[2.0, 4.0, 4.0]]);
        assert_eq!(fare_loss(&clean, &doubled, false).unwrap().value, 36.0);
        let sym = fare_loss(&clean, &adv, true).unwrap();
        assert_eq!(sym.grad_second, vec![-2.0, -4.0, -4.0]);
    }

    #[test]
    fn tecoa_hand_cases() {
        let l = tecoa_loss(&[1.0f64, 0.0], 2, &[0]).unwrap();
        assert!((l.value - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l.value - 0.3133).abs() < 1e-4);
        let uniform = tecoa_loss(&[0.0f64; 10], 10, &[4]).unwrap();
        assert!((uniform.value - 10f64.ln()).abs() < 1e-12);
        let perfect = tecoa_loss(&[50.0f64, 0.0, 0.0], 3, &[0]).unwrap();
        assert!(perfect.value < 1e-20);
        assert!(matches!(tecoa_loss(&[0.0f64; 3], 3, &[3]), Err(Error::LabelOutOfRange { label: 3, classes: 3 })));
    }

    #[test]
    fn cross_entropy_hand_softmax() {
        let (per, _) = cross_entropy(&[2.0f64, 1.0, 0.0], 3, &[0]).unwrap();
        let want = (2f64.exp() + 1f64.exp() + 1.0).ln() - 2.0;
        assert!((per[0] - want).abs() < 1e-12);
        assert!((per[0] - 0.4076).abs() < 1e-4);
    }

    #[test]
    fn collapse_metric_cases() {
        let same = batch(&[&[1.0, 2.0], &[1.0, 2.0], &[2.0, 4.0]]);
        assert!(collapse_metric(&same) < 1e-12);
        let basis = batch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!((collapse_metric(&basis) - 0.5).abs() < 1e-12);
        let swapped = batch(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(collapse_metric(&basis), collapse_metric(&swapped));
    }

    #[test]
    fn detector_needs_a_sustained_run() {
        let mut d = CollapseDetector::new(0.01, 3);
        assert!(!d.observe(0.001));
        assert!(!d.observe(0.001));
        assert!(!d.observe(0.5));
        assert!(!d.observe(0.001));
        assert!(!d.observe(0.001));
        assert!(d.observe(0.001));
        let r = CollapseDetector::replay(0.01, 3, &[0.0, 0.0]);
        assert_eq!(r.consecutive(), 2);
    }
}

use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Clamp `x_adv` into `[x - eps, x + eps] ∩ [0, 1]`, elementwise.
pub(crate) fn project_into<T: Scalar>(x_adv: &mut [T], x: &[T], eps: T) {
    for (a, c) in x_adv.iter_mut().zip(x) {
        let lo = (*c - eps).max(T::zero());
        let hi = (*c + eps).min(T::one());
        *a = a.max(lo).min(hi);
    }
}

/// ℓ∞ projection of a batch onto the ε-ball around `x` intersected with the
/// pixel range.
pub fn linf_project<T: Scalar>(x_adv: &[T], x: &ImageBatch<T>, epsilon: f64) -> Result<ImageBatch<T>> {
    if x_adv.len() != x.data().len() {
        return Err(Error::Shape(format!(
            "adversarial batch has {} values, clean batch {}",
            x_adv.len(),
            x.data().len()
        )));
    }
    let mut out = x_adv.to_vec();
    project_into(&mut out, x.data(), T::lit(epsilon));
    ImageBatch::new(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::ImageShape;

    fn flat(v: f32, n: usize) -> ImageBatch<f32> {
        ImageBatch::new(ImageShape::new(1, 1, n), vec![v; n]).unwrap()
    }

    #[test]
    fn inside_budget_is_unchanged() {
        let x = flat(0.5, 4);
        let adv = vec![0.5, 0.51, 0.49, 0.5];
        assert_eq!(linf_project(&adv, &x, 4.0 / 255.0).unwrap().data(), &adv[..]);
    }

    #[test]
    fn overshoot_clamps_to_budget() {
        let eps = 4.0f64 / 255.0;
        let x = flat(0.5, 3);
        let adv = vec![(0.5 + 2.0 * eps) as f32; 3];
        let p = linf_project(&adv, &x, eps).unwrap();
        for v in p.data() {
            assert!((*v as f64 - (0.5 + eps)).abs() < 1e-7);
        }
    }

    #[test]
    fn pixel_range_dominates() {
        let x = flat(0.0, 2);
        let p = linf_project(&[-0.1f32, -0.1], &x, 8.0 / 255.0).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0]);
    }
}

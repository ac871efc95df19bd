//! Image and embedding batches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Channel, height and width of a single image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// `N` images stored channel-major (`N x C x H x W`) with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<T = f32> {
    shape: ImageShape,
    data: Vec<T>,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(shape: ImageShape, data: Vec<T>) -> Result<Self> {
        let per = shape.numel();
        if per == 0 || data.is_empty() || data.len() % per != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form a nonempty batch of {}x{}x{} images",
                data.len(),
                shape.channels,
                shape.height,
                shape.width
            )));
        }
        if let Some(i) = data.iter().position(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(Error::Shape(format!(
                "pixel {i} is {:?}, outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_images<'a>(shape: ImageShape, images: impl IntoIterator<Item = &'a [T]>) -> Result<Self> {
        let data: Vec<T> = images.into_iter().flat_map(|s| s.iter().copied()).collect();
        Self::new(shape, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.shape.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn image(&self, i: usize) -> &[T] {
        let per = self.shape.numel();
        &self.data[i * per..(i + 1) * per]
    }

    pub fn images(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        self.data.chunks_exact(self.shape.numel())
    }

    /// Select examples by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.shape.numel());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Self {
            shape: self.shape,
            data,
        }
    }

    /// Largest `|self - other|` over all entries.
    pub fn linf_distance(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Scalar>(&self) -> ImageBatch<U> {
        ImageBatch {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(0.0)).unwrap_or_else(U::zero))
                .collect(),
        }
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }
}

/// `N x D` embeddings; `normalized` marks unit ℓ2 rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch<T = f32> {
    dim: usize,
    data: Vec<T>,
    normalized: bool,
}

impl<T: Scalar> EmbeddingBatch<T> {
    pub fn new(dim: usize, data: Vec<T>, normalized: bool) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} values are not a multiple of embedding dim {dim}",
                data.len()
            )));
        }
        Ok(Self {
            dim,
            data,
            normalized,
        })
    }

    pub fn from_rows(rows: &[Vec<T>], normalized: bool) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged embedding rows".into()));
        }
        Self::new(dim, rows.concat(), normalized)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Unit-normalize every row; zero rows are an error.
    pub fn normalized(&self) -> Result<Self> {
        let mut data = self.data.clone();
        for (i, row) in data.chunks_exact_mut(self.dim).enumerate() {
            let n = l2_norm(row);
            if n == T::zero() {
                return Err(Error::DegenerateEmbedding { row: i });
            }
            row.iter_mut().for_each(|v| *v = *v / n);
        }
        Ok(Self {
            dim: self.dim,
            data,
            normalized: true,
        })
    }
}

pub(crate) fn l2_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|x| *x * *x).sum::<T>().sqrt()
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

/// Backward pass of `y = x / |x|`: maps `dL/dy` to `dL/dx`.
pub(crate) fn normalize_backward<T: Scalar>(x: &[T], grad_y: &[T]) -> Vec<T> {
    let n = l2_norm(x);
    let y: Vec<T> = x.iter().map(|v| *v / n).collect();
    let proj = dot(&y, grad_y);
    grad_y
        .iter()
        .zip(&y)
        .map(|(g, yi)| (*g - proj * *yi) / n)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        let shape = ImageShape::new(1, 1, 2);
        assert!(ImageBatch::<f32>::new(shape, vec![0.0, 1.5]).is_err());
        assert!(ImageBatch::<f32>::new(shape, vec![0.0, f32::NAN]).is_err());
        assert!(ImageBatch::<f32>::new(shape, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn rejects_partial_batch() {
        let shape = ImageShape::new(1, 2, 2);
        assert!(ImageBatch::<f32>::new(shape, vec![0.0; 6]).is_err());
        assert!(ImageBatch::<f32>::new(shape, vec![]).is_err());
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let e = EmbeddingBatch::new(3, vec![1.0f32, 2.0, 2.0, 0.0, 0.0, 5.0], false).unwrap();
        let n = e.normalized().unwrap();
        for row in n.rows() {
            assert!((l2_norm(row) - 1.0).abs() < 1e-6);
        }
        let z = EmbeddingBatch::new(2, vec![1.0f32, 0.0, 0.0, 0.0], false).unwrap();
        assert!(matches!(
            z.normalized(),
            Err(Error::DegenerateEmbedding { row: 1 })
        ));
    }

    #[test]
    fn normalize_backward_matches_finite_difference() {
        let x = [0.3f64, -1.2, 0.7];
        let g = [0.5f64, 0.1, -0.4];
        let analytic = normalize_backward(&x, &g);
        let f = |x: &[f64]| {
            let n = l2_norm(x);
            x.iter().zip(&g).map(|(a, b)| a / n * b).sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..3 {
            let mut p = x;
            p[i] += h;
            let mut m = x;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-8);
        }
    }
}

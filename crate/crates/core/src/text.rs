//! Frozen text side: a seeded random projection of character-trigram counts
//! stands in for a pretrained text encoder.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::batch::{dot, l2_norm, EmbeddingBatch};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Deterministic text embedder: each boundary-padded word trigram maps to a
/// fixed Gaussian vector; a text embeds as the normalized sum.
#[derive(Debug, Clone)]
pub struct TextEmbedder {
    dim: usize,
    seed: u64,
}

impl TextEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn trigram_counts(text: &str) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for word in tokenize(text) {
            let padded: Vec<char> = format!("#{word}#").chars().collect();
            for tri in padded.windows(3) {
                *counts.entry(tri.iter().collect::<String>()).or_insert(0) += 1;
            }
        }
        counts
    }

    fn trigram_vector(&self, trigram: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(trigram.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Unit-norm embedding; texts with no trigrams are an error.
    pub fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let mut acc = vec![0.0f64; self.dim];
        for (tri, count) in Self::trigram_counts(text) {
            for (a, v) in acc.iter_mut().zip(self.trigram_vector(&tri)) {
                *a += count as f64 * v;
            }
        }
        let n = l2_norm(&acc);
        if n == 0.0 {
            return Err(Error::Dataset(format!("text {text:?} has no trigrams")));
        }
        Ok(acc.iter().map(|v| (v / n) as f32).collect())
    }
}

/// One caption in the retrieval bank.
#[derive(Debug, Clone, PartialEq)]
pub struct Caption {
    pub text: String,
    /// Class the caption describes, if any.
    pub class: Option<usize>,
}

/// Frozen class and caption embeddings used for zero-shot classification and
/// caption retrieval. Never updated by training.
#[derive(Debug, Clone, PartialEq)]
pub struct TextHead {
    labels: Vec<String>,
    class_embeddings: EmbeddingBatch<f32>,
    captions: Vec<Caption>,
    caption_embeddings: Option<EmbeddingBatch<f32>>,
}

impl TextHead {
    pub fn build(embedder: &TextEmbedder, labels: &[String], captions: Vec<Caption>) -> Result<Self> {
        let rows = labels.iter().map(|l| embedder.embed(l)).collect::<Result<Vec<_>>>()?;
        let class_embeddings = EmbeddingBatch::from_rows(&rows, true)?;
        let caption_embeddings = if captions.is_empty() {
            None
        } else {
            let rows = captions
                .iter()
                .map(|c| embedder.embed(&c.text))
                .collect::<Result<Vec<_>>>()?;
            Some(EmbeddingBatch::from_rows(&rows, true)?)
        };
        Ok(Self {
            labels: labels.to_vec(),
            class_embeddings,
            captions,
            caption_embeddings,
        })
    }

    /// Head from explicit unit-norm rows.
    pub fn from_embeddings(labels: Vec<String>, class_embeddings: EmbeddingBatch<f32>, captions: Vec<Caption>, caption_embeddings: Option<EmbeddingBatch<f32>>) -> Result<Self> {
        let class_embeddings = class_embeddings.normalized()?;
        let caption_embeddings = caption_embeddings.map(|c| c.normalized()).transpose()?;
        if labels.len() != class_embeddings.len() {
            return Err(Error::Shape("one label per class embedding".into()));
        }
        if let Some(c) = &caption_embeddings {
            if c.len() != captions.len() || c.dim() != class_embeddings.dim() {
                return Err(Error::Shape("caption embeddings do not match captions".into()));
            }
        }
        Ok(Self {
            labels,
            class_embeddings,
            captions,
            caption_embeddings,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.class_embeddings.dim()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn class_embeddings(&self) -> &EmbeddingBatch<f32> {
        &self.class_embeddings
    }

    pub fn captions(&self) -> &[Caption] {
        &self.captions
    }

    pub fn caption_embeddings(&self) -> Option<&EmbeddingBatch<f32>> {
        self.caption_embeddings.as_ref()
    }

    /// Find a caption by exact text.
    pub fn caption_id(&self, text: &str) -> Option<usize> {
        self.captions.iter().position(|c| c.text == text)
    }
}

/// `logits[i][k] = cos(emb_i, class_k) / temperature`, row-major `N x K`.
pub fn zero_shot_logits<T: Scalar>(emb: &EmbeddingBatch<T>, head: &TextHead, temperature: f64) -> Result<Vec<T>> {
    if emb.dim() != head.dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} does not match text head dim {}",
            emb.dim(),
            head.dim()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Shape(format!("temperature must be positive, got {temperature}")));
    }
    let emb = if emb.is_normalized() {
        emb.clone()
    } else {
        emb.normalized()?
    };
    let inv_t = T::lit(1.0 / temperature);
    let classes = class_rows::<T>(head);
    let mut out = Vec::with_capacity(emb.len() * classes.len());
    for row in emb.rows() {
        out.extend(classes.iter().map(|c| dot(row, c) * inv_t));
    }
    Ok(out)
}

/// Class embeddings converted to `T`.
pub(crate) fn class_rows<T: Scalar>(head: &TextHead) -> Vec<Vec<T>> {
    head.class_embeddings
        .rows()
        .map(|r| r.iter().map(|v| T::lit(*v as f64)).collect())
        .collect()
}

pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, axis: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        v
    }

    fn axis_head(k: usize, dim: usize) -> TextHead {
        let rows: Vec<Vec<f32>> = (0..k).map(|i| unit(dim, i)).collect();
        TextHead::from_embeddings(
            (0..k).map(|i| format!("c{i}")).collect(),
            EmbeddingBatch::from_rows(&rows, true).unwrap(),
            vec![],
            None,
        )
        .unwrap()
    }

    #[test]
    fn tokenizer_lowercases_and_strips_punctuation() {
        assert_eq!(tokenize("Climate Change is a hoax, created!"), ["climate", "change", "is", "a", "hoax", "created"]);
        assert!(tokenize("  ...  ").is_empty());
    }

    #[test]
    fn embedder_is_deterministic_and_unit() {
        let e = TextEmbedder::new(64, 5);
        let a = e.embed("a photo of a cat").unwrap();
        assert_eq!(a, e.embed("a photo of a cat").unwrap());
        let n: f32 = a.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
        assert!(e.embed("!!!").is_err());
    }

    #[test]
    fn shared_words_embed_closer() {
        let e = TextEmbedder::new(64, 5);
        let cat = e.embed("cat").unwrap();
        let cap = e.embed("a photo of a cat").unwrap();
        let truck = e.embed("truck").unwrap();
        assert!(dot(&cat, &cap) > dot(&truck, &cap) + 0.2);
    }

    #[test]
    fn aligned_embedding_picks_its_class() {
        let head = axis_head(5, 32);
        let mut row = vec![0.0f32; 32];
        row[3] = 1.0;
        row[10] = 0.2;
        let emb = EmbeddingBatch::from_rows(&[row], false).unwrap();
        let logits = zero_shot_logits(&emb, &head, 0.07).unwrap();
        assert_eq!(argmax(&logits), 3);
    }

    #[test]
    fn temperature_scales_uniformly() {
        let head = axis_head(4, 32);
        let row: Vec<f32> = (0..32).map(|i| ((i * 7) % 5) as f32 - 2.0).collect();
        let emb = EmbeddingBatch::from_rows(&[row], false).unwrap();
        let a = zero_shot_logits(&emb, &head, 1.0).unwrap();
        let b = zero_shot_logits(&emb, &head, 0.25).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x * 4.0 - y).abs() < 1e-5);
        }
        assert_eq!(argmax(&a), argmax(&b));
    }

    #[test]
    fn embedding_between_two_classes_ties() {
        let head = axis_head(2, 32);
        let mut row = vec![0.0f32; 32];
        row[0] = 1.0;
        row[1] = 1.0;
        let emb = EmbeddingBatch::from_rows(&[row], false).unwrap();
        let l = zero_shot_logits(&emb, &head, 1.0).unwrap();
        assert!((l[0] - l[1]).abs() < 1e-6);
        assert!((l[0] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let head = axis_head(2, 32);
        let emb = EmbeddingBatch::from_rows(&[vec![1.0f32; 16]], false).unwrap();
        assert!(matches!(zero_shot_logits(&emb, &head, 1.0), Err(Error::Shape(_))));
    }
}

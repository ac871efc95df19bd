//! Consensus-based caption scoring with TF-IDF weighted n-grams (n = 1..4).
//!
//! No length penalty and no clipping: per image, the score is ten times the
//! mean over n of the average cosine similarity between the candidate and
//! each reference.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

pub const MAX_N: usize = 4;

type Counts = HashMap<Vec<String>, f64>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts {
    let mut out = Counts::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    out
}

/// Reference captions per image id plus document frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiderCorpus {
    references: BTreeMap<String, Vec<String>>,
    #[serde(skip)]
    ngram_df: HashMap<Vec<String>, usize>,
    document_count: usize,
}

impl CiderCorpus {
    /// Each image is one document; a gram's document frequency is the
    /// number of images with the gram in at least one reference.
    pub fn new(references: BTreeMap<String, Vec<String>>) -> Self {
        let mut ngram_df = HashMap::new();
        for refs in references.values() {
            let mut seen = std::collections::HashSet::new();
            for r in refs {
                let toks = tokenize(r);
                for n in 1..=MAX_N {
                    seen.extend(ngram_counts(&toks, n).into_keys());
                }
            }
            for g in seen {
                *ngram_df.entry(g).or_insert(0) += 1;
            }
        }
        Self {
            document_count: references.len(),
            references,
            ngram_df,
        }
    }

    pub fn document_count(&self) -> usize {
        self.document_count
    }

    pub fn references(&self) -> &BTreeMap<String, Vec<String>> {
        &self.references
    }

    /// `log(N / max(1, df(g)))`; grams absent from the references get
    /// `log(N)`.
    pub fn idf(&self, gram: &[String]) -> f64 {
        let df = self.ngram_df.get(gram).copied().unwrap_or(0).max(1);
        (self.document_count as f64 / df as f64).ln()
    }

    fn weighted(&self, text: &str) -> Vec<Counts> {
        let toks = tokenize(text);
        (1..=MAX_N)
            .map(|n| {
                let mut c = ngram_counts(&toks, n);
                for (g, v) in c.iter_mut() {
                    *v *= self.idf(g);
                }
                c
            })
            .collect()
    }
}

fn cosine(a: &Counts, b: &Counts) -> f64 {
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    // iterate in a fixed order so the sum is reproducible
    let mut keys: Vec<&Vec<String>> = a.keys().filter(|k| b.contains_key(*k)).collect();
    keys.sort();
    keys.iter().map(|k| a[*k] * b[*k]).sum::<f64>() / (na * nb)
}

/// Score of one candidate against one image's references.
pub fn cider_image(candidate: &str, image_id: &str, corpus: &CiderCorpus) -> Result<f64> {
    let refs = corpus
        .references
        .get(image_id)
        .filter(|r| !r.is_empty())
        .ok_or_else(|| Error::Shape(format!("no references for image {image_id:?}")))?;
    let cand = corpus.weighted(candidate);
    let mut per_n = [0.0; MAX_N];
    for r in refs {
        let rv = corpus.weighted(r);
        for n in 0..MAX_N {
            per_n[n] += cosine(&cand[n], &rv[n]);
        }
    }
    let m = refs.len() as f64;
    Ok(10.0 * per_n.iter().map(|s| s / m).sum::<f64>() / MAX_N as f64)
}

/// Mean per-image score over all candidates (0 for an empty map).
pub fn cider_score(candidates: &BTreeMap<String, String>, corpus: &CiderCorpus) -> Result<f64> {
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (id, cand) in candidates {
        total += cider_image(cand, id, corpus)?;
    }
    Ok(total / candidates.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(pairs: &[(&str, &[&str])]) -> CiderCorpus {
        CiderCorpus::new(
            pairs
                .iter()
                .map(|(id, refs)| (id.to_string(), refs.iter().map(|s| s.to_string()).collect()))
                .collect(),
        )
    }

    fn cands(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn two_image_unigram_corpus_scores_two_and_a_half() {
        let c = corpus(&[("a", &["cat"]), ("b", &["dog"])]);
        assert_eq!(c.idf(&["cat".to_string()]), 2f64.ln());
        let s = cider_score(&cands(&[("a", "cat")]), &c).unwrap();
        assert!((s - 2.5).abs() < 1e-12, "{s}");
    }

    #[test]
    fn disjoint_candidate_scores_zero() {
        let c = corpus(&[("a", &["a red car parked"]), ("b", &["two dogs run"])]);
        assert_eq!(cider_score(&cands(&[("a", "blue boat floating")]), &c).unwrap(), 0.0);
        assert_eq!(cider_score(&cands(&[("a", "")]), &c).unwrap(), 0.0);
    }

    #[test]
    fn identical_long_caption_scores_ten() {
        let c = corpus(&[("a", &["the quick brown fox jumps"]), ("b", &["something else entirely here"])]);
        let s = cider_score(&cands(&[("a", "the quick brown fox jumps")]), &c).unwrap();
        assert!((s - 10.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn missing_references_are_an_error() {
        let c = corpus(&[("a", &["cat"])]);
        assert!(cider_score(&cands(&[("z", "cat")]), &c).is_err());
    }

    #[test]
    fn reference_order_does_not_matter() {
        let a = corpus(&[("a", &["a cat sits", "the cat is sitting"]), ("b", &["a dog"])]);
        let b = corpus(&[("a", &["the cat is sitting", "a cat sits"]), ("b", &["a dog"])]);
        let cand = cands(&[("a", "a cat is sitting")]);
        assert_eq!(cider_score(&cand, &a).unwrap(), cider_score(&cand, &b).unwrap());
    }
}

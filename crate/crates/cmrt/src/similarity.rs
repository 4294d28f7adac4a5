//! Culture similarity from token-usage statistics.
//!
//! Two corpora tokenized by the same frozen codec can be compared through
//! their per-codebook codeword distributions: Jensen-Shannon divergence in
//! bits (so disjoint supports score exactly 1) and cosine distance, averaged
//! over codebooks into a symmetric pairwise matrix with a zero diagonal.
//! Empty codeword bins contribute nothing (0·log 0 = 0); no smoothing is
//! applied.

use std::collections::BTreeMap;

use crate::tokenizer::TokenHistogram;
use crate::{Error, Result};

/// Which distance compares two token distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    Jsd,
    Cosine,
}

impl std::str::FromStr for SimilarityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<SimilarityMetric> {
        match s {
            "jsd" => Ok(SimilarityMetric::Jsd),
            "cosine" => Ok(SimilarityMetric::Cosine),
            other => Err(Error::InvalidInput(format!(
                "unknown similarity metric {other:?} (expected jsd or cosine)"
            ))),
        }
    }
}

fn validate_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidInput(format!("{name} is empty")));
    }
    let mut sum = 0.0;
    for &x in p {
        if !x.is_finite() || x < 0.0 {
            return Err(Error::InvalidInput(format!("{name} has entry {x}, need finite >= 0")));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("{name} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Jensen-Shannon divergence in bits: `½KL(p‖m) + ½KL(q‖m)` with
/// `m = ½(p+q)`, zero entries contributing nothing. Always in [0, 1].
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    validate_distribution("p", p)?;
    validate_distribution("q", q)?;
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "distributions have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    let half_kl = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (x / (0.5 * (x + y))).log2())
            .sum::<f64>()
    };
    Ok((0.5 * half_kl(p, q) + 0.5 * half_kl(q, p)).max(0.0))
}

/// `1 − ⟨p,q⟩ / (‖p‖·‖q‖)`; rejects zero vectors. In [0, 1] for
/// entrywise non-negative inputs.
pub fn cosine_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "vectors have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    if p.iter().chain(q).any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("cosine distance needs finite entries".into()));
    }
    let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt();
    if np == 0.0 || nq == 0.0 {
        return Err(Error::InvalidInput("cosine distance is undefined for zero vectors".into()));
    }
    Ok((1.0 - dot / (np * nq)).max(0.0))
}

/// Pairwise distances between corpora, ordered by corpus id.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub corpus_ids: Vec<String>,
    /// Row-major n×n distances.
    pub values: Vec<f64>,
    pub metric: SimilarityMetric,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.corpus_ids.len()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n() + j]
    }

    /// CSV with corpus ids as both header and row labels.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("corpus");
        for id in &self.corpus_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (i, id) in self.corpus_ids.iter().enumerate() {
            out.push_str(id);
            for j in 0..self.n() {
                out.push_str(&format!(",{:.9}", self.at(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

/// Per codebook, normalize both corpora's counts and compare; the matrix
/// entry is the mean over codebooks. Exactly symmetric with a zero diagonal.
pub fn culture_similarity_matrix(
    histograms: &BTreeMap<String, TokenHistogram>,
    metric: SimilarityMetric,
) -> Result<SimilarityMatrix> {
    if histograms.is_empty() {
        return Err(Error::InvalidInput("no histograms to compare".into()));
    }
    let ids: Vec<String> = histograms.keys().cloned().collect();
    let first = &histograms[&ids[0]];
    let (k, c) = (first.k(), first.c());
    if k == 0 {
        return Err(Error::InvalidInput(format!("corpus {:?} has an empty histogram", ids[0])));
    }
    let mut dists: Vec<Vec<Vec<f64>>> = Vec::with_capacity(ids.len());
    for id in &ids {
        let h = &histograms[id];
        if h.k() != k || h.c() != c {
            return Err(Error::ShapeMismatch(format!(
                "corpus {:?} histogram is {}x{}, expected {}x{}",
                id,
                h.k(),
                h.c(),
                k,
                c
            )));
        }
        let per_codebook: Vec<Vec<f64>> = (0..k)
            .map(|kb| {
                h.distribution(kb).map_err(|e| {
                    Error::InvalidInput(format!("corpus {id:?}: {e}"))
                })
            })
            .collect::<Result<_>>()?;
        dists.push(per_codebook);
    }

    let n = ids.len();
    let mut values = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let mut sum = 0.0;
            for (di, dj) in dists[i].iter().zip(&dists[j]) {
                sum += match metric {
                    SimilarityMetric::Jsd => jsd(di, dj)?,
                    SimilarityMetric::Cosine => cosine_distance(di, dj)?,
                };
            }
            let mean = sum / k as f64;
            values[i * n + j] = mean;
            values[j * n + i] = mean;
        }
    }
    Ok(SimilarityMatrix { corpus_ids: ids, values, metric })
}

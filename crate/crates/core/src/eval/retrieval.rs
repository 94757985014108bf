//! MAP@R over cosine similarity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalInstance {
    pub query: Vec<f32>,
    pub query_class: usize,
    pub database: Vec<Vec<f32>>,
    pub classes: Vec<usize>,
}

impl RetrievalInstance {
    /// Same-class references in the database.
    pub fn r(&self) -> usize {
        self.classes.iter().filter(|&&c| c == self.query_class).count()
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let den = na.sqrt() * nb.sqrt();
    if den == 0.0 {
        0.0
    } else {
        dot / den
    }
}

/// Database indices by descending similarity, ties by ascending index.
pub fn rank_by_similarity(query: &[f32], database: &[Vec<f32>]) -> Vec<usize> {
    let sims: Vec<f64> = database.iter().map(|d| cosine(query, d)).collect();
    let mut order: Vec<usize> = (0..database.len()).collect();
    order.sort_by(|&i, &j| sims[j].total_cmp(&sims[i]).then(i.cmp(&j)));
    order
}

/// `(1/R) Σ_{i≤R} P(i)·rel(i)` over a relevance list in ranked order.
pub fn map_at_r_ranked(relevant: &[bool], r: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevant.iter().take(r).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / r as f64
}

/// `None` when the query has no same-class reference.
pub fn map_at_r(inst: &RetrievalInstance) -> Option<f64> {
    let r = inst.r();
    if r == 0 {
        log::warn!("retrieval query of class {} has no references; skipped", inst.query_class);
        return None;
    }
    let order = rank_by_similarity(&inst.query, &inst.database);
    let rel: Vec<bool> = order.iter().map(|&i| inst.classes[i] == inst.query_class).collect();
    Some(map_at_r_ranked(&rel, r))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub score: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Leave-one-out MAP@R: every row queries all other rows.
pub fn mean_map_at_r(embeddings: &Tensor, classes: &[usize]) -> Result<MapSummary> {
    let n = embeddings.rows();
    if n != classes.len() {
        return Err(Error::Input(format!("{n} embeddings for {} classes", classes.len())));
    }
    let normed: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row = embeddings.row(i);
            let norm = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            row.iter().map(|&x| if norm == 0.0 { 0.0 } else { x as f64 / norm }).collect()
        })
        .collect();
    let mut total = 0.0;
    let mut evaluated = 0;
    let mut skipped = 0;
    for q in 0..n {
        let r = classes.iter().enumerate().filter(|&(j, &c)| j != q && c == classes[q]).count();
        if r == 0 {
            skipped += 1;
            continue;
        }
        let mut others: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != q)
            .map(|j| (j, normed[q].iter().zip(&normed[j]).map(|(a, b)| a * b).sum()))
            .collect();
        others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let rel: Vec<bool> = others.iter().map(|&(j, _)| classes[j] == classes[q]).collect();
        total += map_at_r_ranked(&rel, r);
        evaluated += 1;
    }
    if skipped > 0 {
        log::warn!("{skipped} retrieval queries without references were skipped");
    }
    if evaluated == 0 {
        return Err(Error::Dataset("no retrieval query has a same-class reference".into()));
    }
    Ok(MapSummary {
        score: total / evaluated as f64,
        evaluated,
        skipped,
    })
}

/// Expected MAP@R of uniform random embeddings for `classes`, averaged
/// over `trials` draws.
pub fn random_baseline(classes: &[usize], dim: usize, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..trials.max(1) {
        let data: Vec<f32> = (0..classes.len() * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        acc += mean_map_at_r(&Tensor::new(vec![classes.len(), dim], data)?, classes)?.score;
    }
    Ok(acc / trials.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_rankings() {
        assert_eq!(map_at_r_ranked(&[true, false, true], 2), 0.5);
        assert_eq!(map_at_r_ranked(&[false, true, true], 2), 0.25);
        assert_eq!(map_at_r_ranked(&[true, true, false], 2), 1.0);
    }

    #[test]
    fn ties_break_by_index() {
        let db = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(rank_by_similarity(&[1.0, 0.0], &db), vec![0, 1, 2]);
    }

    #[test]
    fn zero_references_are_skipped() {
        let inst = RetrievalInstance {
            query: vec![1.0],
            query_class: 9,
            database: vec![vec![1.0]],
            classes: vec![0],
        };
        assert_eq!(map_at_r(&inst), None);
    }

    #[test]
    fn perfect_clusters_score_one() {
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.1, 0.9]]).unwrap();
        let s = mean_map_at_r(&e, &[0, 0, 1, 1]).unwrap();
        assert_eq!(s.score, 1.0);
        assert_eq!(s.evaluated, 4);
    }
}

//! Single-query retrieval evaluation: mAP and CMC on the unseen domain.
//!
//! Features are L2-normalized encoder outputs compared by Euclidean distance.
//! Each query ranks the whole gallery by ascending distance, ties going to
//! the lower gallery index. There is no camera filtering.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{l2_dist, Matrix};
use crate::error::{Error, Result};
use crate::losses::kl_to_uniform;
use crate::model::{discriminate, encode, normalize_features, DiscriminatorParams, EncoderParams};
use crate::synthgen::{input_matrix, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `cmc[r]` is the fraction of queries with a match within the top `r + 1`.
    pub cmc: Vec<f64>,
    pub per_query_ap: Vec<f64>,
    pub n_queries: usize,
    pub n_gallery: usize,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// `query,ap` rows.
    pub fn write_per_query_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["query", "ap"])?;
        for (i, ap) in self.per_query_ap.iter().enumerate() {
            w.write_record([i.to_string(), ap.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Encodes, normalizes and evaluates `query` against `gallery`.
pub fn evaluate(encoder: &EncoderParams, query: &[Sample], gallery: &[Sample]) -> Result<EvalReport> {
    let qf = normalize_features(&encode(encoder, &input_matrix(query))?);
    let gf = normalize_features(&encode(encoder, &input_matrix(gallery))?);
    evaluate_features(&qf, &identities(query)?, &gf, &identities(gallery)?)
}

fn identities(samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            s.identity
                .ok_or_else(|| Error::Protocol(format!("sample {} has no identity", s.id)))
        })
        .collect()
}

/// mAP and full-length CMC from precomputed features.
pub fn evaluate_features(
    query: &Matrix,
    query_ids: &[usize],
    gallery: &Matrix,
    gallery_ids: &[usize],
) -> Result<EvalReport> {
    check_inputs(query, query_ids, gallery, gallery_ids)?;
    let g = gallery.rows();
    let mut cmc_hits = vec![0usize; g];
    let mut per_query_ap = Vec::with_capacity(query.rows());
    for (qi, &qid) in query_ids.iter().enumerate() {
        let order = rank_gallery(query.row(qi), gallery);
        let n_rel = gallery_ids.iter().filter(|&&id| id == qid).count();
        if n_rel == 0 {
            return Err(Error::Protocol(format!(
                "query {qi} (identity {qid}) has no match in the gallery"
            )));
        }
        let mut hits = 0usize;
        let mut ap = 0.0;
        let mut first_hit = None;
        for (k, &gi) in order.iter().enumerate() {
            if gallery_ids[gi] == qid {
                hits += 1;
                ap += hits as f64 / (k + 1) as f64;
                first_hit.get_or_insert(k);
                if hits == n_rel {
                    break;
                }
            }
        }
        per_query_ap.push(ap / n_rel as f64);
        cmc_hits[first_hit.expect("n_rel > 0")] += 1;
    }
    let nq = query.rows() as f64;
    let mut acc = 0usize;
    let cmc = cmc_hits
        .iter()
        .map(|&h| {
            acc += h;
            acc as f64 / nq
        })
        .collect();
    Ok(EvalReport {
        map: per_query_ap.iter().sum::<f64>() / nq,
        cmc,
        per_query_ap,
        n_queries: query.rows(),
        n_gallery: g,
    })
}

/// Gallery indices sorted by distance to `q`, ties by index.
fn rank_gallery(q: &[f64], gallery: &Matrix) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = gallery
        .row_iter()
        .enumerate()
        .map(|(i, g)| (l2_dist(q, g), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().map(|(_, i)| i).collect()
}

/// Brute-force mAP that never sorts: for every relevant gallery item it
/// counts how many items outrank it and how many of those are relevant, and
/// averages `hits / rank` over the relevant items.
pub fn map_oracle(
    query: &Matrix,
    query_ids: &[usize],
    gallery: &Matrix,
    gallery_ids: &[usize],
) -> Result<f64> {
    check_inputs(query, query_ids, gallery, gallery_ids)?;
    let mut total = 0.0;
    for (qi, &qid) in query_ids.iter().enumerate() {
        let q = query.row(qi);
        let dist: Vec<f64> = gallery
            .row_iter()
            .map(|g| q.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect();
        let outranks = |a: usize, b: usize| dist[a] < dist[b] || (dist[a] == dist[b] && a < b);
        let relevant: Vec<usize> = (0..gallery_ids.len()).filter(|&i| gallery_ids[i] == qid).collect();
        if relevant.is_empty() {
            return Err(Error::Protocol(format!(
                "query {qi} (identity {qid}) has no relevant gallery item"
            )));
        }
        let mut ap = 0.0;
        for &r in &relevant {
            let rank = 1 + (0..dist.len()).filter(|&o| outranks(o, r)).count();
            let hits = 1 + relevant.iter().filter(|&&o| outranks(o, r)).count();
            ap += hits as f64 / rank as f64;
        }
        total += ap / relevant.len() as f64;
    }
    Ok(total / query_ids.len() as f64)
}

fn check_inputs(query: &Matrix, query_ids: &[usize], gallery: &Matrix, gallery_ids: &[usize]) -> Result<()> {
    if query.rows() != query_ids.len() || gallery.rows() != gallery_ids.len() {
        return Err(Error::dim("evaluate", "identity count does not match feature rows"));
    }
    if query.rows() == 0 || gallery.rows() == 0 {
        return Err(Error::Protocol("empty query or gallery".into()));
    }
    if query.cols() != gallery.cols() {
        return Err(Error::dim(
            "evaluate",
            format!("query width {} vs gallery width {}", query.cols(), gallery.cols()),
        ));
    }
    Ok(())
}

/// Mean `KL(discriminator output || uniform)` over a feature batch's inputs.
pub fn domain_confusion(encoder: &EncoderParams, discriminator: &DiscriminatorParams, inputs: &Matrix) -> Result<f64> {
    let f = encode(encoder, inputs)?;
    Ok(kl_to_uniform(&discriminate(discriminator, &f)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Matrix {
        Matrix::from_rows(&v.iter().map(|&x| vec![x]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn correct_match_first() {
        let r = evaluate_features(&col(&[0.0]), &[7], &col(&[0.1, 1.0, 2.0]), &[7, 1, 2]).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.rank1(), 1.0);
        assert_eq!(r.cmc, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn two_relevant_at_ranks_one_and_three() {
        let r = evaluate_features(&col(&[0.0]), &[7], &col(&[0.1, 0.2, 0.3, 0.4]), &[7, 1, 7, 2]).unwrap();
        assert!((r.per_query_ap[0] - 5.0 / 6.0).abs() < 1e-15);
        assert!((r.map - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        // both gallery items equidistant; the relevant one has the higher index
        let r = evaluate_features(&col(&[0.0]), &[1], &col(&[1.0, -1.0]), &[0, 1]).unwrap();
        assert_eq!(r.map, 0.5);
        assert_eq!(r.cmc, vec![0.0, 1.0]);
    }

    #[test]
    fn missing_identity_is_a_protocol_error() {
        assert!(matches!(
            evaluate_features(&col(&[0.0]), &[3], &col(&[0.0, 1.0]), &[1, 2]),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn oracle_single_item_gallery() {
        assert_eq!(map_oracle(&col(&[0.0]), &[4], &col(&[5.0]), &[4]).unwrap(), 1.0);
        assert!(matches!(
            map_oracle(&col(&[0.0]), &[4], &col(&[5.0]), &[3]),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn oracle_agrees_on_hand_case() {
        let q = col(&[0.0]);
        let g = col(&[0.1, 0.2, 0.3, 0.4]);
        assert!((map_oracle(&q, &[7], &g, &[7, 1, 7, 2]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn report_json_has_map_key() {
        let r = evaluate_features(&col(&[0.0]), &[7], &col(&[0.1]), &[7]).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["mAP"], 1.0);
    }
}

//! Cross-camera retrieval metrics: CMC Rank-k and mean average precision.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::scalar::Scalar;

/// Identity and camera of a query or gallery item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ItemMeta {
    pub identity: usize,
    pub camera: usize,
}

/// Longest CMC prefix reported.
pub const CMC_DEPTH: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `cmc[k]` is the fraction of valid queries matched within the top `k + 1`.
    pub cmc: Vec<f64>,
    /// Average precision per query; `None` for skipped queries.
    pub per_query_ap: Vec<Option<f64>>,
    pub skipped: usize,
}

/// Ranking of one query: valid gallery indices by descending similarity,
/// ties broken by gallery index. Same identity and same camera are excluded.
pub fn rank_gallery<T: Scalar>(
    query: &[T],
    meta: ItemMeta,
    gallery: &Matrix<T>,
    gallery_meta: &[ItemMeta],
) -> Vec<(usize, T)> {
    let mut scored: Vec<(usize, T)> = (0..gallery.rows())
        .filter(|&g| !(gallery_meta[g].identity == meta.identity && gallery_meta[g].camera == meta.camera))
        .map(|g| (g, dot(query, gallery.row(g))))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite similarity").then(a.0.cmp(&b.0)));
    scored
}

/// Average precision from the 1-based ranks of the true matches (ascending).
fn average_precision(match_ranks: &[usize]) -> f64 {
    match_ranks
        .iter()
        .enumerate()
        .map(|(hit, &rank)| (hit + 1) as f64 / rank as f64)
        .sum::<f64>()
        / match_ranks.len() as f64
}

pub fn evaluate<T: Scalar>(
    query: &Matrix<T>,
    query_meta: &[ItemMeta],
    gallery: &Matrix<T>,
    gallery_meta: &[ItemMeta],
) -> Result<EvalResult> {
    if query.rows() != query_meta.len() {
        return Err(Error::DimensionMismatch { expected: query.rows(), got: query_meta.len() });
    }
    if gallery.rows() != gallery_meta.len() {
        return Err(Error::DimensionMismatch { expected: gallery.rows(), got: gallery_meta.len() });
    }
    if query.rows() > 0 && gallery.rows() > 0 && query.cols() != gallery.cols() {
        return Err(Error::DimensionMismatch { expected: gallery.cols(), got: query.cols() });
    }
    let depth = gallery.rows().min(CMC_DEPTH);
    let mut hits_at = vec![0usize; depth];
    let mut per_query_ap = Vec::with_capacity(query.rows());
    let mut skipped = 0;
    for (q, &meta) in query_meta.iter().enumerate() {
        let ranking = rank_gallery(query.row(q), meta, gallery, gallery_meta);
        let match_ranks: Vec<usize> = ranking
            .iter()
            .enumerate()
            .filter(|(_, &(g, _))| gallery_meta[g].identity == meta.identity)
            .map(|(pos, _)| pos + 1)
            .collect();
        let Some(&first) = match_ranks.first() else {
            skipped += 1;
            per_query_ap.push(None);
            continue;
        };
        for h in hits_at.iter_mut().skip(first - 1) {
            *h += 1;
        }
        per_query_ap.push(Some(average_precision(&match_ranks)));
    }
    let valid = query.rows() - skipped;
    if valid == 0 {
        return Err(Error::NoValidQueries);
    }
    let cmc: Vec<f64> = hits_at.iter().map(|&h| h as f64 / valid as f64).collect();
    let at = |k: usize| cmc.get(k - 1).or(cmc.last()).copied().unwrap_or(0.0);
    let map = per_query_ap.iter().flatten().sum::<f64>() / valid as f64;
    Ok(EvalResult {
        rank1: at(1),
        rank5: at(5),
        rank10: at(10),
        map,
        cmc,
        per_query_ap,
        skipped,
    })
}

//! Anonymization evaluation: identity retrieval, attribute preservation
//! and embedding dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::perception::{
    cosine, fit_nuisance, toy_landmarks, IdentityEmbedder, IdentityEmbedding, LandmarkLayout, SyntheticFaceSpec,
    IDENTITY_FACTORS,
};
use crate::raster::ImageTensor;

/// How `mean_cosine` pairs a query with its true identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosinePairing {
    /// Cosine to the mean of the identity's gallery embeddings.
    #[default]
    Centroid,
    /// Highest cosine to any gallery item of the identity.
    NearestTrue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub top1: f64,
    pub top5: f64,
    /// Mean average precision over the full ranked gallery.
    pub map: f64,
    pub mean_cosine: f64,
    pub n_queries: usize,
    pub n_gallery: usize,
    /// Queries whose identity has no gallery item; left out of every mean.
    pub excluded: usize,
}

/// Gallery indices by descending similarity; exact ties keep gallery order.
pub fn rank_gallery(query: &IdentityEmbedding, gallery: &[IdentityEmbedding]) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = gallery.iter().enumerate().map(|(i, g)| (i, query.cosine(g))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Average precision of one ranked relevance list (`None` without hits).
pub fn average_precision(relevant: impl IntoIterator<Item = bool>) -> Option<f64> {
    let (mut hits, mut sum) = (0usize, 0.0);
    for (k, rel) in relevant.into_iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

pub fn retrieval_eval(
    queries: &[IdentityEmbedding],
    query_labels: &[u32],
    gallery: &[IdentityEmbedding],
    gallery_labels: &[u32],
) -> Result<RetrievalReport> {
    retrieval_eval_with(queries, query_labels, gallery, gallery_labels, CosinePairing::Centroid)
}

pub fn retrieval_eval_with(
    queries: &[IdentityEmbedding],
    query_labels: &[u32],
    gallery: &[IdentityEmbedding],
    gallery_labels: &[u32],
    pairing: CosinePairing,
) -> Result<RetrievalReport> {
    ensure(!queries.is_empty() && !gallery.is_empty(), || "query and gallery sets must be nonempty".into())?;
    ensure(queries.len() == query_labels.len() && gallery.len() == gallery_labels.len(), || {
        "labels must align with embeddings".into()
    })?;
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in gallery_labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    let dim = gallery[0].dim();
    let centroids: BTreeMap<u32, Vec<f64>> = members
        .iter()
        .map(|(&l, idx)| {
            let mut c = vec![0.0; dim];
            for &i in idx {
                for (a, b) in c.iter_mut().zip(&gallery[i].vector) {
                    *a += b;
                }
            }
            (l, c.into_iter().map(|v| v / idx.len() as f64).collect())
        })
        .collect();

    let (mut top1, mut top5, mut ap_sum, mut cos_sum, mut used) = (0usize, 0usize, 0.0, 0.0, 0usize);
    for (q, &label) in queries.iter().zip(query_labels) {
        let Some(mine) = members.get(&label) else { continue };
        let ranked = rank_gallery(q, gallery);
        let rel: Vec<bool> = ranked.iter().map(|&(i, _)| gallery_labels[i] == label).collect();
        top1 += rel[0] as usize;
        top5 += rel.iter().take(5).any(|&r| r) as usize;
        ap_sum += average_precision(rel.iter().copied()).expect("identity has gallery items");
        cos_sum += match pairing {
            CosinePairing::Centroid => cosine(&q.vector, &centroids[&label]),
            CosinePairing::NearestTrue => mine.iter().map(|&i| q.cosine(&gallery[i])).fold(f64::NEG_INFINITY, f64::max),
        };
        used += 1;
    }
    let denom = used.max(1) as f64;
    Ok(RetrievalReport {
        top1: top1 as f64 / denom,
        top5: top5 as f64 / denom,
        map: ap_sum / denom,
        mean_cosine: cos_sum / denom,
        n_queries: queries.len(),
        n_gallery: gallery.len(),
        excluded: queries.len() - used,
    })
}

/// Mean attribute distances between source and output images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    /// Mean keypoint distance in pixels.
    pub landmark_l2: f64,
    /// Absolute in-plane rotation difference in radians.
    pub pose_l2: f64,
    pub expression_l2: f64,
    pub n_pairs: usize,
    /// Pairs where either nuisance fit failed to converge; excluded.
    pub failed_fits: usize,
}

/// Per-pair attribute distances, or `None` when a fit failed.
pub fn attribute_distances(x: &ImageTensor, x_hat: &ImageTensor, layout: LandmarkLayout) -> Result<Option<[f64; 3]>> {
    ensure(x.shape() == x_hat.shape(), || "paired images must share a shape".into())?;
    let (fa, fb) = (fit_nuisance(x)?, fit_nuisance(x_hat)?);
    if !(fa.converged() && fb.converged()) {
        return Ok(None);
    }
    let size = x.height();
    let lm = |n| SyntheticFaceSpec::new(vec![0.5; IDENTITY_FACTORS], n, size).and_then(|s| toy_landmarks(&s, layout));
    let (la, lb) = (lm(fa.nuisance)?, lm(fb.nuisance)?);
    Ok(Some([
        la.mean_distance(&lb, size),
        (fa.nuisance.pose - fb.nuisance.pose).abs(),
        (fa.nuisance.expression - fb.nuisance.expression).abs(),
    ]))
}

pub fn attribute_eval(x: &[ImageTensor], x_hat: &[ImageTensor], layout: LandmarkLayout) -> Result<AttributeReport> {
    ensure(!x.is_empty() && x.len() == x_hat.len(), || "attribute evaluation needs paired, nonempty batches".into())?;
    let (mut sums, mut ok) = ([0.0; 3], 0usize);
    for (a, b) in x.iter().zip(x_hat) {
        if let Some(d) = attribute_distances(a, b, layout)? {
            for (s, v) in sums.iter_mut().zip(d) {
                *s += v;
            }
            ok += 1;
        }
    }
    let denom = ok.max(1) as f64;
    Ok(AttributeReport {
        landmark_l2: sums[0] / denom,
        pose_l2: sums[1] / denom,
        expression_l2: sums[2] / denom,
        n_pairs: x.len(),
        failed_fits: x.len() - ok,
    })
}

/// Write `image_id,source_id,e0,…` rows with the embedding of each image.
pub fn dump_embeddings(
    images: &[ImageTensor],
    source_ids: &[u32],
    embedder: &dyn IdentityEmbedder,
    path: &Path,
) -> Result<usize> {
    ensure(images.len() == source_ids.len(), || "one source id per image is required".into())?;
    let mut out = String::from("image_id,source_id");
    for k in 0..embedder.dim() {
        write!(out, ",e{k}").expect("writing to a string");
    }
    out.push('\n');
    for (i, (img, sid)) in images.iter().zip(source_ids).enumerate() {
        let e = embedder.embed(img)?;
        write!(out, "{i},{sid}").expect("writing to a string");
        for v in &e.vector {
            write!(out, ",{v:e}").expect("writing to a string");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(images.len())
}

/// Read back a file written by [`dump_embeddings`].
pub fn read_embedding_dump(path: &Path) -> Result<Vec<(u32, IdentityEmbedding)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize| Error::Dataset(format!("{}: malformed row {line}", path.display()));
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(n, line)| {
            let mut cols = line.split(',');
            cols.next().ok_or_else(|| bad(n))?;
            let sid = cols.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(n))?;
            let v = cols.map(|c| c.parse::<f64>().map_err(|_| bad(n))).collect::<Result<Vec<_>>>()?;
            Ok((sid, IdentityEmbedding::raw(v)))
        })
        .collect()
}

/// Mean cosine over all unordered pairs.
pub fn mean_pairwise_cosine(embs: &[IdentityEmbedding]) -> Result<f64> {
    ensure(embs.len() >= 2, || "need at least two embeddings".into())?;
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            sum += embs[i].cosine(&embs[j]);
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// A report serialized together with the hash of the run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_hash: String,
    pub anonymized: RetrievalReport,
    pub reconstructed: Option<RetrievalReport>,
    pub attributes: AttributeReport,
    pub reconstruction_attributes: Option<AttributeReport>,
    pub diversity_mean_cosine: Option<f64>,
}

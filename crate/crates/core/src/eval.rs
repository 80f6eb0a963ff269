//! Zero-shot retrieval evaluation (Recall@K per language against a shared
//! image gallery) and numeric cross-lingual alignment diagnostics.

use serde::Serialize;
use std::path::Path;

use crate::data_io::{check_rows, Checkpoint, EmbeddingSet, ManifestRecord};
use crate::error::{Error, Result};
use crate::matrix::{dot, squared_distance, Mat};
use crate::projection::EPS_NORM;
use crate::train::project_texts;

/// Ranking distance. Squared Euclidean matches the training objective and
/// is the default; cosine is offered as an alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    SqEuclidean,
    Cosine,
}

impl Distance {
    pub fn between(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Distance::SqEuclidean => squared_distance(x, y),
            Distance::Cosine => {
                let nx = dot(x, x).sqrt();
                let ny = dot(y, y).sqrt();
                1.0 - dot(x, y) / ((nx + EPS_NORM) * (ny + EPS_NORM))
            }
        }
    }
}

impl std::str::FromStr for Distance {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sqeuclidean" => Ok(Distance::SqEuclidean),
            "cosine" => Ok(Distance::Cosine),
            other => Err(format!(
                "unknown distance {other:?} (expected sqeuclidean or cosine)"
            )),
        }
    }
}

impl std::fmt::Display for Distance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Distance::SqEuclidean => write!(f, "sqeuclidean"),
            Distance::Cosine => write!(f, "cosine"),
        }
    }
}

/// True when the query's true gallery row ranks among the k nearest.
/// Ties break by ascending gallery row index, so the rank of row t is the
/// number of rows strictly closer plus equally-close rows with lower index.
fn is_hit(query: &[f64], gallery: &Mat, true_row: usize, k: usize, distance: Distance) -> bool {
    let d_true = distance.between(query, gallery.row(true_row));
    let mut rank = 0usize;
    for j in 0..gallery.rows() {
        if j == true_row {
            continue;
        }
        let d = distance.between(query, gallery.row(j));
        if d < d_true || (d == d_true && j < true_row) {
            rank += 1;
            if rank >= k {
                return false;
            }
        }
    }
    rank < k
}

/// Fraction of queries whose true gallery row appears among the k nearest
/// gallery rows by squared Euclidean distance.
pub fn recall_at_k(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    true_gallery_row: &[usize],
    k: usize,
) -> Result<f64> {
    recall_at_k_with(queries, gallery, true_gallery_row, k, Distance::SqEuclidean)
}

pub fn recall_at_k_with(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    true_gallery_row: &[usize],
    k: usize,
    distance: Distance,
) -> Result<f64> {
    if queries.dim() != gallery.dim() {
        return Err(Error::Shape(format!(
            "query width {} != gallery width {}",
            queries.dim(),
            gallery.dim()
        )));
    }
    if true_gallery_row.len() != queries.count() {
        return Err(Error::Shape(format!(
            "{} true rows for {} queries",
            true_gallery_row.len(),
            queries.count()
        )));
    }
    if k == 0 || k > gallery.count() {
        return Err(Error::Validation(format!(
            "k = {k} out of range for gallery of {}",
            gallery.count()
        )));
    }
    if let Some(&bad) = true_gallery_row.iter().find(|&&r| r >= gallery.count()) {
        return Err(Error::Validation(format!(
            "true gallery row {bad} out of range ({} rows)",
            gallery.count()
        )));
    }
    if queries.count() == 0 {
        return Err(Error::Validation("no queries".into()));
    }

    let mut hits = 0usize;
    for (i, &t) in true_gallery_row.iter().enumerate() {
        if is_hit(queries.data.row(i), &gallery.data, t, k, distance) {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.count() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallRow {
    pub lang: String,
    pub k: usize,
    pub recall: f64,
    pub query_count: usize,
    pub gallery_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallReport {
    pub checkpoint: String,
    pub distance: Distance,
    pub k_list: Vec<usize>,
    pub rows: Vec<RecallRow>,
}

impl RecallReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lang,k,recall,query_count,gallery_size\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.lang, r.k, r.recall, r.query_count, r.gallery_size
            ));
        }
        out
    }

    /// Plain-text table: one row per language, one column per K.
    pub fn render_table(&self) -> String {
        let mut langs: Vec<&str> = Vec::new();
        for row in &self.rows {
            if !langs.contains(&row.lang.as_str()) {
                langs.push(&row.lang);
            }
        }
        let mut out = String::new();
        out.push_str(&format!("{:<8}", "lang"));
        for k in &self.k_list {
            out.push_str(&format!("{:>10}", format!("R@{k}")));
        }
        out.push_str(&format!("{:>10}\n", "queries"));
        for lang in langs {
            out.push_str(&format!("{lang:<8}"));
            let mut queries = 0;
            for k in &self.k_list {
                if let Some(row) = self.rows.iter().find(|r| r.lang == lang && r.k == *k) {
                    out.push_str(&format!("{:>10.4}", row.recall));
                    queries = row.query_count;
                } else {
                    out.push_str(&format!("{:>10}", "-"));
                }
            }
            out.push_str(&format!("{queries:>10}\n"));
        }
        out
    }
}

/// Project every language's texts through the checkpoint and rank them
/// against the single shared gallery. Rows are grouped by the manifest
/// records' language, in first-appearance order.
pub fn evaluate_zero_shot(
    ckpt: &Checkpoint,
    text_sets: &[(&EmbeddingSet, &[ManifestRecord])],
    gallery: &EmbeddingSet,
    gallery_manifest: &[ManifestRecord],
    k_list: &[usize],
    distance: Distance,
    checkpoint_id: &str,
) -> Result<RecallReport> {
    if k_list.is_empty() {
        return Err(Error::Validation("empty K list".into()));
    }
    check_rows(gallery_manifest, gallery.count())?;
    let mut gallery_row = std::collections::HashMap::new();
    for record in gallery_manifest {
        if gallery_row.insert(record.id.as_str(), record.row).is_some() {
            return Err(Error::Validation(format!(
                "duplicate image id {:?} in gallery manifest",
                record.id
            )));
        }
    }

    // lang -> (flat query buffer, true rows)
    let mut groups: Vec<(String, Vec<f64>, Vec<usize>)> = Vec::new();
    let out_dim = ckpt.config.output_dim();
    for (set, manifest) in text_sets {
        check_rows(manifest, set.count())?;
        let projected = project_texts(ckpt, set)?;
        for record in *manifest {
            let image_id = record.image_id.as_deref().ok_or_else(|| Error::MissingImageId {
                text_id: record.id.clone(),
            })?;
            let &true_row = gallery_row
                .get(image_id)
                .ok_or_else(|| Error::UnresolvedImageId {
                    text_id: record.id.clone(),
                    image_id: image_id.to_string(),
                })?;
            let group = match groups.iter_mut().find(|(lang, _, _)| *lang == record.lang) {
                Some(g) => g,
                None => {
                    groups.push((record.lang.clone(), Vec::new(), Vec::new()));
                    groups.last_mut().unwrap()
                }
            };
            group.1.extend_from_slice(projected.data.row(record.row));
            group.2.push(true_row);
        }
    }

    let mut rows = Vec::new();
    for (lang, buffer, true_rows) in groups {
        let queries = EmbeddingSet::new(Mat::from_vec(true_rows.len(), out_dim, buffer));
        for &k in k_list {
            let recall = recall_at_k_with(&queries, gallery, &true_rows, k, distance)?;
            rows.push(RecallRow {
                lang: lang.clone(),
                k,
                recall,
                query_count: true_rows.len(),
                gallery_size: gallery.count(),
            });
        }
    }

    Ok(RecallReport {
        checkpoint: checkpoint_id.to_string(),
        distance,
        k_list: k_list.to_vec(),
        rows,
    })
}

/// Mean squared distance between row-paired embeddings over the mean
/// distance between non-paired rows. 0 = perfectly aligned, roughly 1 =
/// unrelated sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlignmentScore {
    pub paired_mean: f64,
    pub mismatched_mean: f64,
    pub ratio: f64,
}

/// Both (i, j) and (j, i) mismatched terms are accumulated pairwise, so the
/// score is exactly symmetric in (A, B).
pub fn alignment_score(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<AlignmentScore> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "width mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.count() != b.count() {
        return Err(Error::Shape(format!(
            "count mismatch: {} vs {}",
            a.count(),
            b.count()
        )));
    }
    let n = a.count();
    if n < 2 {
        return Err(Error::Validation("alignment needs at least 2 rows".into()));
    }

    let mut paired = 0.0;
    for i in 0..n {
        paired += squared_distance(a.data.row(i), b.data.row(i));
    }
    let paired_mean = paired / n as f64;

    let mut mismatched = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            mismatched += squared_distance(a.data.row(i), b.data.row(j))
                + squared_distance(a.data.row(j), b.data.row(i));
        }
    }
    let mismatched_mean = mismatched / (n * (n - 1)) as f64;

    let ratio = if paired_mean == 0.0 {
        0.0
    } else {
        paired_mean / mismatched_mean
    };
    Ok(AlignmentScore {
        paired_mean,
        mismatched_mean,
        ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentEntry {
    pub lang_a: String,
    pub lang_b: String,
    pub paired_mean: f64,
    pub mismatched_mean: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct AlignmentReport {
    pub entries: Vec<AlignmentEntry>,
}

impl AlignmentReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lang_a,lang_b,paired_mean,mismatched_mean,ratio\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.lang_a, e.lang_b, e.paired_mean, e.mismatched_mean, e.ratio
            ));
        }
        out
    }

    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:<8}{:<8}{:>14}{:>16}{:>10}\n",
            "lang_a", "lang_b", "paired_mean", "mismatched_mean", "ratio"
        );
        for e in &self.entries {
            out.push_str(&format!(
                "{:<8}{:<8}{:>14.6}{:>16.6}{:>10.6}\n",
                e.lang_a, e.lang_b, e.paired_mean, e.mismatched_mean, e.ratio
            ));
        }
        out
    }
}

/// Write `id,lang,v0..v{d-1}` rows of the projected texts, one line per
/// manifest record in order, coordinates formatted as %.9e.
pub fn export_projection_csv(
    ckpt: &Checkpoint,
    text_sets: &[(&EmbeddingSet, &[ManifestRecord])],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str("id,lang");
    for c in 0..ckpt.config.output_dim() {
        out.push_str(&format!(",v{c}"));
    }
    out.push('\n');

    for (set, manifest) in text_sets {
        check_rows(manifest, set.count())?;
        let projected = project_texts(ckpt, set)?;
        for record in *manifest {
            for field in [&record.id, &record.lang] {
                if field.contains(',') || field.contains('"') || field.contains('\n') {
                    return Err(Error::Validation(format!(
                        "id/lang {field:?} contains csv delimiter characters"
                    )));
                }
            }
            out.push_str(&record.id);
            out.push(',');
            out.push_str(&record.lang);
            for v in projected.data.row(record.row) {
                out.push_str(&format!(",{v:.9e}"));
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

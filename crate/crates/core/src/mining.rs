//! Online in-batch hard-negative selection: for every anchor text, the
//! nearest batch image whose id differs from the anchor's positive image.
//! The caption (projected text) at the chosen index becomes the negative
//! text downstream.

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Mat};

/// Per-anchor selection: chosen batch index and the squared distance it
/// achieves.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningResult {
    pub negative_index: Vec<usize>,
    pub negative_distance: Vec<f64>,
}

impl MiningResult {
    pub fn mean_negative_distance(&self) -> f64 {
        if self.negative_distance.is_empty() {
            return 0.0;
        }
        self.negative_distance.iter().sum::<f64>() / self.negative_distance.len() as f64
    }
}

/// Argmin over eligible candidates, ties to the lowest index. Candidate j
/// is eligible for anchor i when the image ids differ.
fn argmin_eligible<S: AsRef<str>>(
    n: usize,
    ids: &[S],
    dist: impl Fn(usize, usize) -> f64,
) -> Result<MiningResult> {
    let mut negative_index = Vec::with_capacity(n);
    let mut negative_distance = Vec::with_capacity(n);
    for i in 0..n {
        let anchor_id = ids[i].as_ref();
        let mut best: Option<(usize, f64)> = None;
        for (j, id) in ids.iter().enumerate() {
            if id.as_ref() == anchor_id {
                continue;
            }
            let d = dist(i, j);
            match best {
                Some((_, bd)) if d >= bd => {}
                _ => best = Some((j, d)),
            }
        }
        let (j, d) = best.ok_or(Error::NoEligibleNegative { anchor: i })?;
        negative_index.push(j);
        negative_distance.push(d);
    }
    Ok(MiningResult {
        negative_index,
        negative_distance,
    })
}

/// For anchor i, pick argmin over j with positive_image_ids[j] !=
/// positive_image_ids[i] of d(projected_texts[i], batch_images[j]).
/// Ties break to the lowest index. Exclusion is by image id, so duplicated
/// images can never be chosen as their own negatives.
pub fn mine_hard_negatives<S: AsRef<str>>(
    projected_texts: &Mat,
    batch_images: &Mat,
    positive_image_ids: &[S],
) -> Result<MiningResult> {
    let n = projected_texts.rows();
    if batch_images.rows() != n || positive_image_ids.len() != n {
        return Err(Error::Shape(format!(
            "mining inputs disagree: {} texts, {} images, {} ids",
            n,
            batch_images.rows(),
            positive_image_ids.len()
        )));
    }
    if projected_texts.cols() != batch_images.cols() {
        return Err(Error::Shape(format!(
            "projected width {} != image width {}",
            projected_texts.cols(),
            batch_images.cols()
        )));
    }
    argmin_eligible(n, positive_image_ids, |i, j| {
        squared_distance(projected_texts.row(i), batch_images.row(j))
    })
}

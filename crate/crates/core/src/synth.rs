//! Deterministic synthetic multi-language, multi-modal embedding datasets.
//!
//! Every item i draws a latent z_i ~ N(0, I). Texts in language l are
//! (A + gamma * D_l) z_i plus sigma-scaled noise; images are relu(B z_i)
//! plus sigma-scaled noise. The ReLU mirrors the non-negativity of frozen
//! average-pooled image features.
//!
//! Scaling conventions: map entries are N(0, 1/(latent_dim * out_dim)) so
//! every map output has unit expected squared norm, and noise vectors have
//! coordinates N(0, 1/dim) so their expected norm is 1. gamma and sigma are
//! therefore dimensionless relative perturbation scales: gamma = 0.05 means
//! a 5% cross-lingual map perturbation, sigma = 0.1 a 10% noise floor.
//!
//! Draw order (one seeded ChaCha8 stream): A row-major, B row-major, each
//! D_l in language order, all z_i, image noise per item, then per language
//! the text noise per item.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_io::{EmbeddingSet, ManifestRecord};
use crate::error::{Error, Result};
use crate::matrix::{dot, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_items: usize,
    pub latent_dim: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    pub languages: Vec<String>,
    /// Per-language map perturbation scale (cross-lingual misalignment).
    pub gamma: f64,
    /// Additive noise scale relative to unit-norm signal.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_items: 1000,
            latent_dim: 32,
            text_dim: 512,
            image_dim: 256,
            languages: vec!["en".into(), "xx".into()],
            gamma: 0.05,
            sigma: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 {
            return Err(Error::Config("n_items must be positive".into()));
        }
        if self.latent_dim == 0 || self.text_dim == 0 || self.image_dim == 0 {
            return Err(Error::Config("all dimensions must be positive".into()));
        }
        if self.gamma < 0.0 || self.sigma < 0.0 {
            return Err(Error::Config("gamma and sigma must be non-negative".into()));
        }
        if self.languages.is_empty() {
            return Err(Error::Config("at least one language is required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for lang in &self.languages {
            if !seen.insert(lang) {
                return Err(Error::Config(format!("duplicate language {lang:?}")));
            }
        }
        Ok(())
    }
}

/// One language's text embeddings with their manifest.
#[derive(Debug, Clone)]
pub struct LanguageSet {
    pub lang: String,
    pub embeddings: EmbeddingSet,
    pub manifest: Vec<ManifestRecord>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub languages: Vec<LanguageSet>,
    pub images: EmbeddingSet,
    pub image_manifest: Vec<ManifestRecord>,
}

fn normal_mat<R: rand::Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in m.as_mut_slice() {
        let n: f64 = StandardNormal.sample(rng);
        *v = n * scale;
    }
    m
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, latent) = (cfg.n_items, cfg.latent_dim);

    let text_map_scale = 1.0 / ((latent * cfg.text_dim) as f64).sqrt();
    let image_map_scale = 1.0 / ((latent * cfg.image_dim) as f64).sqrt();
    let a = normal_mat(&mut rng, cfg.text_dim, latent, text_map_scale);
    let b = normal_mat(&mut rng, cfg.image_dim, latent, image_map_scale);
    let d_maps: Vec<Mat> = cfg
        .languages
        .iter()
        .map(|_| normal_mat(&mut rng, cfg.text_dim, latent, text_map_scale))
        .collect();
    let z = normal_mat(&mut rng, n, latent, 1.0);
    let image_noise = normal_mat(&mut rng, n, cfg.image_dim, 1.0 / (cfg.image_dim as f64).sqrt());
    let text_noises: Vec<Mat> = cfg
        .languages
        .iter()
        .map(|_| normal_mat(&mut rng, n, cfg.text_dim, 1.0 / (cfg.text_dim as f64).sqrt()))
        .collect();

    let mut images = Mat::zeros(n, cfg.image_dim);
    for i in 0..n {
        let zi = z.row(i);
        let noise = image_noise.row(i);
        let row = images.row_mut(i);
        for c in 0..cfg.image_dim {
            let signal = dot(b.row(c), zi).max(0.0);
            row[c] = signal + cfg.sigma * noise[c];
        }
    }
    let image_manifest: Vec<ManifestRecord> = (0..n)
        .map(|i| ManifestRecord {
            row: i,
            id: format!("img{i}"),
            lang: "und".into(),
            image_id: None,
            caption: None,
        })
        .collect();

    let mut languages = Vec::with_capacity(cfg.languages.len());
    for (l, lang) in cfg.languages.iter().enumerate() {
        let mut map = a.clone();
        for (m, d) in map.as_mut_slice().iter_mut().zip(d_maps[l].as_slice()) {
            *m += cfg.gamma * d;
        }
        let noise = &text_noises[l];
        let mut texts = Mat::zeros(n, cfg.text_dim);
        for i in 0..n {
            let zi = z.row(i);
            let ni = noise.row(i);
            let row = texts.row_mut(i);
            for c in 0..cfg.text_dim {
                row[c] = dot(map.row(c), zi) + cfg.sigma * ni[c];
            }
        }
        let manifest: Vec<ManifestRecord> = (0..n)
            .map(|i| ManifestRecord {
                row: i,
                id: format!("{lang}-{i}"),
                lang: lang.clone(),
                image_id: Some(format!("img{i}")),
                caption: None,
            })
            .collect();
        languages.push(LanguageSet {
            lang: lang.clone(),
            embeddings: EmbeddingSet::new(texts),
            manifest,
        });
    }

    Ok(SynthOutput {
        languages,
        images: EmbeddingSet::new(images),
        image_manifest,
    })
}

/// Split by item index into (items [0, n_head), items [n_head, n)),
/// renumbering manifest rows within each part. Ids are preserved, so the
/// text/image linkage stays valid inside each part.
pub fn split_items(out: &SynthOutput, n_head: usize) -> Result<(SynthOutput, SynthOutput)> {
    let n = out.images.count();
    if n_head > n {
        return Err(Error::Validation(format!(
            "cannot split {n_head} items from a set of {n}"
        )));
    }
    let slice_part = |set: &EmbeddingSet, manifest: &[ManifestRecord], start: usize, end: usize| {
        let embeddings = EmbeddingSet::new(set.data.slice_rows(start, end));
        let manifest: Vec<ManifestRecord> = manifest[start..end]
            .iter()
            .enumerate()
            .map(|(i, r)| ManifestRecord {
                row: i,
                ..r.clone()
            })
            .collect();
        (embeddings, manifest)
    };

    let make = |start: usize, end: usize| {
        let (images, image_manifest) = slice_part(&out.images, &out.image_manifest, start, end);
        let languages = out
            .languages
            .iter()
            .map(|l| {
                let (embeddings, manifest) = slice_part(&l.embeddings, &l.manifest, start, end);
                LanguageSet {
                    lang: l.lang.clone(),
                    embeddings,
                    manifest,
                }
            })
            .collect();
        SynthOutput {
            languages,
            images,
            image_manifest,
        }
    };
    Ok((make(0, n_head), make(n_head, n)))
}

//! The training loop: shuffle pairs, form mini-batches, project texts,
//! mine in-batch hard negatives, evaluate the loss, accumulate output
//! gradients into both anchor and negative-text rows of the shared forward
//! pass, backpropagate once, and Adam-update.
//!
//! Randomness comes from two ChaCha8 streams of the configured seed:
//! stream 0 initializes the weights, stream 1 drives shuffling and dropout
//! (in that fixed order within each batch). Identical inputs therefore
//! produce bit-identical checkpoints and logs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{Checkpoint, EmbeddingSet, PairedDataset};
use crate::error::{Error, Result};
use crate::losses::{triplet_loss, LossConfig, TripletBatch};
use crate::matrix::Mat;
use crate::mining::mine_hard_negatives;
use crate::projection::{
    adam_step, backward, forward_eval, forward_masked, init_weights, l2_normalize,
    sample_dropout_masks, AdamParams, AdamState, Layer, NetworkWeights, ProjectionConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// l2-normalize text embeddings before the head. Recorded in the
    /// checkpoint so inference applies the same preprocessing.
    pub normalize_inputs: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 128,
            lr: 0.001,
            beta1: 0.99,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
            loss: LossConfig::default(),
            normalize_inputs: false,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1/beta2 must lie in [0, 1)".into()));
        }
        if !self.adam_eps.is_finite() || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        self.loss.validate()
    }

    pub fn adam_params(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossLogEntry {
    pub epoch: u64,
    pub batch: usize,
    pub loss: f64,
    pub mean_neg_dist: f64,
}

/// Per-batch training log, one entry per logged batch in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossLog {
    pub entries: Vec<LossLogEntry>,
}

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,batch,loss,mean_neg_dist\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.batch, e.loss, e.mean_neg_dist));
        }
        out
    }

    /// Mean loss over the entries of one epoch; None if none were logged.
    pub fn epoch_mean_loss(&self, epoch: u64) -> Option<f64> {
        let losses: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.epoch == epoch)
            .map(|e| e.loss)
            .collect();
        if losses.is_empty() {
            None
        } else {
            Some(losses.iter().sum::<f64>() / losses.len() as f64)
        }
    }
}

/// One batch's loss, mining diagnostics, and parameter gradients.
#[derive(Debug, Clone)]
pub struct BatchStep {
    pub loss: f64,
    pub mean_neg_dist: f64,
    pub grads: Vec<Layer>,
}

/// Forward the batch texts once, mine hard negatives against the batch
/// images, assemble the triplet batch (negative texts are rows of the same
/// forward pass), and backpropagate the accumulated output gradients.
pub fn batch_loss_and_grads<S: AsRef<str>>(
    weights: &NetworkWeights,
    proj_cfg: &ProjectionConfig,
    loss_cfg: &LossConfig,
    text_batch: &Mat,
    image_batch: &Mat,
    image_ids: &[S],
    masks: &[Option<Mat>],
) -> Result<BatchStep> {
    let cache = forward_masked(weights, proj_cfg, text_batch, masks)?;
    let projected = cache.output();

    let mined = mine_hard_negatives(projected, image_batch, image_ids)?;
    let triplet = TripletBatch {
        te_an: projected.clone(),
        im_p: image_batch.clone(),
        im_n: image_batch.gather(&mined.negative_index),
        te_n: projected.gather(&mined.negative_index),
    };
    let out = triplet_loss(&triplet, loss_cfg)?;

    // Anchor and negative text share one forward pass: accumulate both
    // gradient contributions into the same output-gradient matrix, then
    // run a single backward.
    let mut out_grad = out.grad_te_an.clone();
    if let Some(g_tn) = &out.grad_te_n {
        for (i, &neg) in mined.negative_index.iter().enumerate() {
            let src = g_tn.row(i).to_vec();
            let dst = out_grad.row_mut(neg);
            for (d, s) in dst.iter_mut().zip(&src) {
                *d += s;
            }
        }
    }
    let (grads, _) = backward(weights, proj_cfg, &cache, &out_grad)?;

    Ok(BatchStep {
        loss: out.loss,
        mean_neg_dist: mined.mean_negative_distance(),
        grads,
    })
}

/// Train the projection head on the paired dataset. Per epoch the pairs are
/// reshuffled; the final partial batch is dropped, so each epoch runs
/// exactly floor(pairs / batch_size) optimizer steps.
pub fn train(
    dataset: &PairedDataset,
    proj_cfg: &ProjectionConfig,
    train_cfg: &TrainConfig,
) -> Result<(Checkpoint, LossLog)> {
    proj_cfg.validate()?;
    train_cfg.validate()?;

    let n_pairs = dataset.pairs.len();
    if n_pairs == 0 {
        return Err(Error::Validation("dataset has no pairs".into()));
    }
    if train_cfg.batch_size > n_pairs {
        return Err(Error::Validation(format!(
            "batch_size {} exceeds pair count {}",
            train_cfg.batch_size, n_pairs
        )));
    }
    if dataset.text_embeddings.dim() != proj_cfg.input_dim {
        return Err(Error::Shape(format!(
            "text width {} != input_dim {}",
            dataset.text_embeddings.dim(),
            proj_cfg.input_dim
        )));
    }
    if dataset.image_embeddings.dim() != proj_cfg.output_dim() {
        return Err(Error::Shape(format!(
            "image width {} != final block dim {}",
            dataset.image_embeddings.dim(),
            proj_cfg.output_dim()
        )));
    }

    let texts = if train_cfg.normalize_inputs {
        normalize_rows(&dataset.text_embeddings.data)
    } else {
        dataset.text_embeddings.data.clone()
    };
    let images = &dataset.image_embeddings.data;

    let mut weights = init_weights(proj_cfg, train_cfg.seed)?;
    let mut adam = AdamState::new(&weights, train_cfg.adam_params());
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    rng.set_stream(1);

    let mut log = LossLog::default();
    let mut order: Vec<usize> = (0..n_pairs).collect();
    for epoch in 0..train_cfg.epochs {
        order.shuffle(&mut rng);
        for (batch_idx, chunk) in order.chunks_exact(train_cfg.batch_size).enumerate() {
            let text_rows: Vec<usize> = chunk.iter().map(|&p| dataset.pairs[p].text_row).collect();
            let image_rows: Vec<usize> = chunk.iter().map(|&p| dataset.pairs[p].image_row).collect();
            let ids: Vec<&str> = text_rows
                .iter()
                .map(|r| dataset.image_id_of[r].as_str())
                .collect();

            let text_batch = texts.gather(&text_rows);
            let image_batch = images.gather(&image_rows);
            let masks = sample_dropout_masks(proj_cfg, chunk.len(), &mut rng);
            let step = batch_loss_and_grads(
                &weights,
                proj_cfg,
                &train_cfg.loss,
                &text_batch,
                &image_batch,
                &ids,
                &masks,
            )?;
            adam_step(&mut adam, &mut weights, &step.grads)?;

            if batch_idx % train_cfg.log_every == 0 {
                log.entries.push(LossLogEntry {
                    epoch,
                    batch: batch_idx,
                    loss: step.loss,
                    mean_neg_dist: step.mean_neg_dist,
                });
            }
        }
    }

    let ckpt = Checkpoint {
        config: proj_cfg.clone(),
        loss_config: train_cfg.loss.clone(),
        train_config: train_cfg.clone(),
        weights,
        epochs_trained: train_cfg.epochs,
        seed: train_cfg.seed,
    };
    Ok((ckpt, log))
}

fn normalize_rows(m: &Mat) -> Mat {
    let mut out = Mat::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        out.row_mut(i).copy_from_slice(&l2_normalize(m.row(i)));
    }
    out
}

/// Eval-mode projection of every row into the image space. Applies the
/// same input normalization the checkpoint was trained with.
pub fn project_texts(ckpt: &Checkpoint, texts: &EmbeddingSet) -> Result<EmbeddingSet> {
    if texts.dim() != ckpt.config.input_dim {
        return Err(Error::Shape(format!(
            "text width {} != checkpoint input_dim {}",
            texts.dim(),
            ckpt.config.input_dim
        )));
    }
    let data = if ckpt.train_config.normalize_inputs {
        normalize_rows(&texts.data)
    } else {
        texts.data.clone()
    };

    // chunked so eval of large sets does not hold per-block caches for
    // every row at once
    let chunk = 512;
    let mut out = Mat::zeros(texts.count(), ckpt.config.output_dim());
    let mut start = 0;
    while start < data.rows() {
        let end = (start + chunk).min(data.rows());
        let cache = forward_eval(&ckpt.weights, &ckpt.config, &data.slice_rows(start, end))?;
        for (i, row) in cache.output().row_iter().enumerate() {
            out.row_mut(start + i).copy_from_slice(row);
        }
        start = end;
    }
    Ok(EmbeddingSet::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::join_pairs;
    use crate::synth::{generate, SynthConfig};

    fn tiny_dataset(n: usize, seed: u64) -> PairedDataset {
        let cfg = SynthConfig {
            n_items: n,
            latent_dim: 4,
            text_dim: 6,
            image_dim: 4,
            languages: vec!["en".into()],
            gamma: 0.0,
            sigma: 0.01,
            seed,
        };
        let out = generate(&cfg).unwrap();
        let lang = &out.languages[0];
        join_pairs(
            lang.embeddings.clone(),
            &lang.manifest,
            out.images.clone(),
            &out.image_manifest,
            Some("en"),
        )
        .unwrap()
    }

    fn tiny_proj() -> ProjectionConfig {
        ProjectionConfig {
            input_dim: 6,
            block_dims: vec![8, 4],
            dropout_rates: vec![0.0, 0.0],
            l2norm_flags: vec![true, false],
            relu_flags: vec![true, true],
        }
    }

    #[test]
    fn zero_epochs_returns_initial_weights_and_empty_log() {
        let ds = tiny_dataset(8, 1);
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        let (ckpt, log) = train(&ds, &tiny_proj(), &cfg).unwrap();
        assert_eq!(ckpt.weights, init_weights(&tiny_proj(), 5).unwrap());
        assert!(log.entries.is_empty());
        assert_eq!(ckpt.epochs_trained, 0);
    }

    #[test]
    fn log_length_counts_full_batches_only() {
        let ds = tiny_dataset(10, 2);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        let (_, log) = train(&ds, &tiny_proj(), &cfg).unwrap();
        // 10 pairs / batch 4 -> 2 full batches per epoch, partial dropped
        assert_eq!(log.entries.len(), 3 * 2);
        for e in &log.entries {
            assert!(e.batch < 2);
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let ds = tiny_dataset(12, 3);
        let proj = tiny_proj();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 4,
            seed: 77,
            ..TrainConfig::default()
        };
        let (c1, l1) = train(&ds, &proj, &cfg).unwrap();
        let (c2, l2) = train(&ds, &proj, &cfg).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(l1, l2);
        let other = TrainConfig { seed: 78, ..cfg };
        let (c3, _) = train(&ds, &proj, &other).unwrap();
        assert_ne!(c1.weights, c3.weights);
    }

    #[test]
    fn image_embeddings_stay_untouched() {
        let ds = tiny_dataset(8, 4);
        let before = ds.image_embeddings.data.clone();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        train(&ds, &tiny_proj(), &cfg).unwrap();
        assert_eq!(ds.image_embeddings.data, before);
    }

    /// With dropout disabled, the parameter gradient of one batch matches a
    /// finite-difference estimate of the batch loss, confirming the
    /// accumulation through both the anchor and negative-text paths.
    #[test]
    fn batch_gradients_match_finite_differences() {
        let ds = tiny_dataset(6, 6);
        let proj = tiny_proj();
        let mut weights = init_weights(&proj, 11).unwrap();
        let loss_cfg = LossConfig::default();

        let text_rows: Vec<usize> = ds.pairs.iter().map(|p| p.text_row).collect();
        let image_rows: Vec<usize> = ds.pairs.iter().map(|p| p.image_row).collect();
        let ids: Vec<&str> = text_rows.iter().map(|r| ds.image_id_of[r].as_str()).collect();
        let texts = ds.text_embeddings.data.gather(&text_rows);
        let images = ds.image_embeddings.data.gather(&image_rows);
        let masks = vec![None, None];

        let step =
            batch_loss_and_grads(&weights, &proj, &loss_cfg, &texts, &images, &ids, &masks).unwrap();

        let h = 1e-6;
        let eval = |w: &NetworkWeights| {
            batch_loss_and_grads(w, &proj, &loss_cfg, &texts, &images, &ids, &masks)
                .unwrap()
                .loss
        };
        for k in 0..2 {
            for idx in 0..weights.layers[k].weight.as_slice().len() {
                let orig = weights.layers[k].weight.as_slice()[idx];
                weights.layers[k].weight.as_mut_slice()[idx] = orig + h;
                let up = eval(&weights);
                weights.layers[k].weight.as_mut_slice()[idx] = orig - h;
                let down = eval(&weights);
                weights.layers[k].weight.as_mut_slice()[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = step.grads[k].weight.as_slice()[idx];
                let diff = (an - fd).abs();
                assert!(
                    diff < 1e-8 || diff / an.abs().max(fd.abs()).max(1e-4) < 1e-4,
                    "layer {k} weight {idx}: analytic {an} fd {fd}"
                );
            }
            for idx in 0..weights.layers[k].bias.len() {
                let orig = weights.layers[k].bias[idx];
                weights.layers[k].bias[idx] = orig + h;
                let up = eval(&weights);
                weights.layers[k].bias[idx] = orig - h;
                let down = eval(&weights);
                weights.layers[k].bias[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = step.grads[k].bias[idx];
                let diff = (an - fd).abs();
                assert!(
                    diff < 1e-8 || diff / an.abs().max(fd.abs()).max(1e-4) < 1e-4,
                    "layer {k} bias {idx}: analytic {an} fd {fd}"
                );
            }
        }
    }

    /// Overfit smoke run: on 8 pairs the loss must collapse within 300
    /// epochs.
    #[test]
    fn tiny_dataset_overfits() {
        let ds = tiny_dataset(8, 8);
        let cfg = TrainConfig {
            epochs: 300,
            batch_size: 4,
            seed: 21,
            ..TrainConfig::default()
        };
        let (_, log) = train(&ds, &tiny_proj(), &cfg).unwrap();
        let first = log.epoch_mean_loss(0).unwrap();
        let last = log.epoch_mean_loss(299).unwrap();
        assert!(
            last < 0.1 * first,
            "no overfit: first epoch {first}, last epoch {last}"
        );
    }

    #[test]
    fn project_texts_is_deterministic_and_checks_widths() {
        let ds = tiny_dataset(8, 10);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let (ckpt, _) = train(&ds, &tiny_proj(), &cfg).unwrap();

        let a = project_texts(&ckpt, &ds.text_embeddings).unwrap();
        let b = project_texts(&ckpt, &ds.text_embeddings).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 4);
        assert_eq!(a.count(), ds.text_embeddings.count());

        let empty = EmbeddingSet::new(Mat::zeros(0, 6));
        let projected = project_texts(&ckpt, &empty).unwrap();
        assert_eq!(projected.count(), 0);
        assert_eq!(projected.dim(), 4);

        let wrong = EmbeddingSet::new(Mat::zeros(2, 5));
        assert!(matches!(project_texts(&ckpt, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_size_larger_than_dataset_is_rejected() {
        let ds = tiny_dataset(4, 12);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        assert!(train(&ds, &tiny_proj(), &cfg).is_err());
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(train(&ds, &tiny_proj(), &cfg).is_err());
    }
}

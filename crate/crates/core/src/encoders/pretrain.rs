//! Brief contrastive alignment of the dual encoder on synthetic data,
//! then freeze. Stands in for large-scale VLM pretraining so the zero-shot
//! baseline is meaningful without ever seeing the tuning distribution.

use rand::Rng;

use super::{DualEncoder, FrozenModel, ModelConfig};
use crate::autodiff::{backward, Adam, Tensor};
use crate::error::{Error, Result};
use crate::geom::{patchify, PatchSet};
use crate::rng::derive;
use crate::synthdata::DatasetManifest;

pub struct PretrainConfig {
    pub seed: u64,
    pub epochs_max: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// stop once held-out zero-shot accuracy reaches this level; keeps the
    /// baseline modest so tuning has measurable headroom
    pub target_accuracy: f64,
    pub n_patches: usize,
    pub k_points: usize,
    /// per-epoch progress on stderr
    pub log: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            seed: 0,
            epochs_max: 10,
            batch_size: 32,
            lr: 1e-3,
            target_accuracy: 0.55,
            n_patches: 16,
            k_points: 16,
            log: false,
        }
    }
}

pub struct PretrainReport {
    pub epochs_run: usize,
    pub holdout_accuracy: f64,
}

struct Sample {
    patches: PatchSet,
    label: usize,
}

fn load_samples(manifest: &DatasetManifest, n: usize, k: usize) -> Result<Vec<Sample>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let pc = manifest.load_cloud(e)?;
            Ok(Sample {
                patches: patchify(&pc, n, k)?,
                label: e.label as usize,
            })
        })
        .collect()
}

fn zero_shot_accuracy(enc: &DualEncoder, samples: &[Sample], num_cats: usize) -> f64 {
    let ws: Vec<Vec<f64>> = (0..num_cats)
        .map(|c| enc.handcrafted_embedding(c).vector.data().to_vec())
        .collect();
    let mut correct = 0usize;
    for s in samples {
        let (z, _) = enc.unprompted_forward(&s.patches);
        let zv = z.data();
        let zn: f64 = zv.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for (c, w) in ws.iter().enumerate() {
            let wn: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = zv.iter().zip(w).map(|(a, b)| a * b).sum();
            let sim = dot / (zn * wn);
            if sim > best_sim {
                best_sim = sim;
                best = c;
            }
        }
        if best == s.label {
            correct += 1;
        }
    }
    correct as f64 / samples.len() as f64
}

/// Train with a symmetric contrastive objective (cloud-to-text CE over the
/// category embeddings plus a multi-positive text-to-cloud term), evaluate
/// zero-shot accuracy on the held-out split each epoch, stop at the target,
/// then freeze and hash.
pub fn pretrain_align(
    model_cfg: ModelConfig,
    cfg: &PretrainConfig,
    train: &DatasetManifest,
    holdout: &DatasetManifest,
) -> Result<(FrozenModel, PretrainReport)> {
    let enc = DualEncoder::build(model_cfg, cfg.seed, true)?;
    let num_cats = enc.cfg.num_categories();
    let train_samples = load_samples(train, cfg.n_patches, cfg.k_points)?;
    let holdout_samples = load_samples(holdout, cfg.n_patches, cfg.k_points)?;
    if train_samples.is_empty() {
        return Err(Error::argument("pretrain: empty train manifest"));
    }

    let params = enc.params();
    let trainable: Vec<_> = params.iter().filter(|p| p.trainable()).cloned().collect();
    let mut opt = Adam::new(cfg.lr);
    let inv_tau = 1.0 / enc.tau();

    let mut epochs_run = 0;
    let mut holdout_acc = zero_shot_accuracy(&enc, &holdout_samples, num_cats);
    for epoch in 0..cfg.epochs_max {
        if holdout_acc >= cfg.target_accuracy {
            break;
        }
        epochs_run = epoch + 1;
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        let mut rng = derive(cfg.seed, &[0x93E7, epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let ws: Vec<Tensor> = (0..num_cats)
                .map(|c| enc.handcrafted_embedding(c).vector)
                .collect();
            let zs: Vec<(Tensor, usize)> = batch
                .iter()
                .map(|&i| {
                    let (z, _) = enc.unprompted_forward(&train_samples[i].patches);
                    (z, train_samples[i].label)
                })
                .collect();

            // similarity matrix as scalar graph nodes
            let sims: Vec<Vec<Tensor>> = zs
                .iter()
                .map(|(z, _)| ws.iter().map(|w| z.cosine_sim(w).scale(inv_tau)).collect())
                .collect();

            let mut terms: Vec<Tensor> = Vec::new();
            // cloud -> text
            for (row, (_, label)) in sims.iter().zip(&zs) {
                let logits = Tensor::concat_rows(
                    &row.iter().map(|s| s.reshape(&[1, 1])).collect::<Vec<_>>(),
                )
                .reshape(&[num_cats]);
                let p = logits.softmax().gather_rows_1d(&[*label]);
                terms.push(p.clamp_min(1e-12).ln().neg());
            }
            let l_cloud = Tensor::concat_rows(
                &terms.iter().map(|t| t.reshape(&[1, 1])).collect::<Vec<_>>(),
            )
            .mean_all();

            // text -> cloud, multi-positive over the batch
            let mut text_terms: Vec<Tensor> = Vec::new();
            for c in 0..num_cats {
                let members: Vec<usize> = zs
                    .iter()
                    .enumerate()
                    .filter(|(_, (_, l))| *l == c)
                    .map(|(j, _)| j)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let col = Tensor::concat_rows(
                    &sims
                        .iter()
                        .map(|row| row[c].reshape(&[1, 1]))
                        .collect::<Vec<_>>(),
                )
                .reshape(&[zs.len()]);
                let p = col.softmax().gather_rows_1d(&members);
                text_terms.push(p.sum_all().clamp_min(1e-12).ln().neg());
            }
            let l_text = Tensor::concat_rows(
                &text_terms.iter().map(|t| t.reshape(&[1, 1])).collect::<Vec<_>>(),
            )
            .mean_all();

            let loss = l_cloud.add(&l_text).scale(0.5);
            epoch_loss += loss.item();
            batches += 1;
            backward(&loss);
            opt.step(&trainable);
        }

        holdout_acc = zero_shot_accuracy(&enc, &holdout_samples, num_cats);
        if cfg.log {
            eprintln!(
                "pretrain epoch {epoch}: loss {:.4}, holdout zero-shot {:.3}",
                epoch_loss / batches.max(1) as f64,
                holdout_acc
            );
        }
    }

    let model = FrozenModel::freeze(enc);
    Ok((
        model,
        PretrainReport {
            epochs_run,
            holdout_accuracy: holdout_acc,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, load_manifest, DatasetConfig, Preset, CATEGORIES};

    #[test]
    fn pretrain_beats_chance_on_holdout() {
        let dir = tempfile::tempdir().unwrap();
        let mut dcfg = DatasetConfig::new("pre", Preset::Pretrain, 3);
        dcfg.train_per_category = 12;
        dcfg.test_per_category = 6;
        dcfg.points = 96;
        let ds = generate_dataset(dir.path(), &dcfg).unwrap();
        let train = load_manifest(&ds, "train").unwrap();
        let holdout = load_manifest(&ds, "test").unwrap();

        let cats: Vec<String> = CATEGORIES.iter().map(|s| s.to_string()).collect();
        let model_cfg = ModelConfig::micro(cats, 16);
        let pcfg = PretrainConfig {
            seed: 1,
            epochs_max: 6,
            batch_size: 16,
            lr: 2e-3,
            target_accuracy: 0.5,
            n_patches: 8,
            k_points: 12,
            ..Default::default()
        };
        let (model, report) = pretrain_align(model_cfg, &pcfg, &train, &holdout).unwrap();
        let chance = 1.0 / CATEGORIES.len() as f64;
        assert!(
            report.holdout_accuracy > chance,
            "holdout accuracy {} not above chance {chance}",
            report.holdout_accuracy
        );
        // tau survives the freeze at its configured value
        assert_eq!(model.tau(), 0.07);
        for p in model.params() {
            assert!(!p.trainable());
        }
    }
}

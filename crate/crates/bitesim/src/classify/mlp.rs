//! Small fully-connected classifier (ReLU hidden layers, softmax output)
//! trained by seeded per-sample SGD on the cross-entropy loss, with a
//! central-finite-difference gradient self-check.

use super::{standardize_and_mask, InteractionLabel, LabeledDataset, ModalityChoice, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::features::{fit_standardizer, FeatureLayout, FeatureVector, Standardizer};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub finetune_lr_scale: f64,
    pub finetune_epochs: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: vec![64, 32],
            lr: 1e-3,
            epochs: 200,
            finetune_lr_scale: 0.1,
            finetune_epochs: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpModel {
    pub layout: FeatureLayout,
    pub standardizer: Standardizer,
    pub modality: ModalityChoice,
    pub config: MlpConfig,
    /// Layer sizes [F, hidden..., 4].
    pub sizes: Vec<usize>,
    /// weights[l][out][in], biases[l][out].
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

impl MlpModel {
    fn init(layout: &FeatureLayout, modality: ModalityChoice, cfg: &MlpConfig, st: Standardizer, seed: u64) -> MlpModel {
        let mut sizes = vec![layout.len()];
        sizes.extend(cfg.hidden.iter());
        sizes.push(NUM_CLASSES);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            let bound = (6.0 / (sizes[l] + sizes[l + 1]) as f64).sqrt();
            weights.push(
                (0..sizes[l + 1])
                    .map(|_| (0..sizes[l]).map(|_| rng.random_range(-bound..bound)).collect())
                    .collect(),
            );
            biases.push(vec![0.0; sizes[l + 1]]);
        }
        MlpModel {
            layout: layout.clone(),
            standardizer: st,
            modality,
            config: cfg.clone(),
            sizes,
            weights,
            biases,
        }
    }

    /// Forward pass on a standardized+masked input; returns per-layer
    /// activations (post-nonlinearity), last entry is the softmax output.
    fn forward(&self, z: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![z.to_vec()];
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            let prev = &acts[l];
            let mut out: Vec<f64> = self.weights[l]
                .iter()
                .zip(self.biases[l].iter())
                .map(|(row, b)| row.iter().zip(prev.iter()).map(|(w, a)| w * a).sum::<f64>() + b)
                .collect();
            if l < last {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            } else {
                out = softmax(&out);
            }
            acts.push(out);
        }
        acts
    }

    /// Mean cross-entropy loss and its gradient over a standardized batch.
    fn loss_and_grad(
        &self,
        batch: &[(Vec<f64>, usize)],
    ) -> (f64, Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
        let mut gw: Vec<Vec<Vec<f64>>> = self
            .weights
            .iter()
            .map(|l| l.iter().map(|row| vec![0.0; row.len()]).collect())
            .collect();
        let mut gb: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let mut loss = 0.0;
        let n = batch.len() as f64;
        for (z, target) in batch {
            let acts = self.forward(z);
            let probs = acts.last().unwrap();
            let p = probs[*target];
            loss += if p.is_nan() { f64::NAN } else { -(p.max(1e-300)).ln() };
            // delta at the softmax pre-activation
            let mut delta: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(k, p)| (p - if k == *target { 1.0 } else { 0.0 }) / n)
                .collect();
            for l in (0..self.weights.len()).rev() {
                let prev = &acts[l];
                for (o, d) in delta.iter().enumerate() {
                    gb[l][o] += d;
                    for (i, a) in prev.iter().enumerate() {
                        gw[l][o][i] += d * a;
                    }
                }
                if l > 0 {
                    let mut next = vec![0.0; prev.len()];
                    for (o, d) in delta.iter().enumerate() {
                        for (i, nx) in next.iter_mut().enumerate() {
                            *nx += d * self.weights[l][o][i];
                        }
                    }
                    // ReLU mask of the layer below
                    for (nx, a) in next.iter_mut().zip(prev.iter()) {
                        if *a <= 0.0 {
                            *nx = 0.0;
                        }
                    }
                    delta = next;
                }
            }
        }
        (loss / n, gw, gb)
    }

    fn sgd(&mut self, data: &[(Vec<f64>, usize)], lr: f64, epochs: usize, seed: u64) -> Result<()> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        // offset keeps the shuffle stream distinct from the init stream
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4d4c_5053);
        for _epoch in 0..epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let batch = [(data[i].0.clone(), data[i].1)];
                let (loss, gw, gb) = self.loss_and_grad(&batch);
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "MLP loss became non-finite during SGD (lr = {lr})"
                    )));
                }
                for l in 0..self.weights.len() {
                    for o in 0..self.weights[l].len() {
                        self.biases[l][o] -= lr * gb[l][o];
                        for i2 in 0..self.weights[l][o].len() {
                            self.weights[l][o][i2] -= lr * gw[l][o][i2];
                        }
                    }
                }
            }
            if self.weights.iter().flatten().flatten().any(|w| !w.is_finite()) {
                return Err(Error::Divergence(format!(
                    "MLP weights became non-finite during SGD (lr = {lr})"
                )));
            }
        }
        Ok(())
    }

    pub fn predict(&self, fv: &FeatureVector) -> Result<(InteractionLabel, [f64; NUM_CLASSES])> {
        let mask = self.modality.mask(&self.layout);
        let z = standardize_and_mask(&self.standardizer, &mask, fv)?;
        let acts = self.forward(&z);
        let probs = acts.last().unwrap();
        let mut scores = [0.0; NUM_CLASSES];
        scores.copy_from_slice(probs);
        let best = (0..NUM_CLASSES)
            .max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap())
            .unwrap();
        Ok((InteractionLabel::from_index(best)?, scores))
    }

    /// Maximal relative error between the analytic gradient and central
    /// finite differences at `n_coords` seeded parameter coordinates.
    pub fn gradient_check(&self, batch: &[(Vec<f64>, usize)], n_coords: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, gw, gb) = self.loss_and_grad(batch);
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for _ in 0..n_coords {
            let l = rng.random_range(0..self.weights.len());
            let o = rng.random_range(0..self.weights[l].len());
            let (analytic, num) = if rng.random_bool(0.2) {
                let mut probe = self.clone();
                probe.biases[l][o] += eps;
                let (lp, _, _) = probe.loss_and_grad(batch);
                probe.biases[l][o] -= 2.0 * eps;
                let (lm, _, _) = probe.loss_and_grad(batch);
                (gb[l][o], (lp - lm) / (2.0 * eps))
            } else {
                let i = rng.random_range(0..self.weights[l][o].len());
                let mut probe = self.clone();
                probe.weights[l][o][i] += eps;
                let (lp, _, _) = probe.loss_and_grad(batch);
                probe.weights[l][o][i] -= 2.0 * eps;
                let (lm, _, _) = probe.loss_and_grad(batch);
                (gw[l][o][i], (lp - lm) / (2.0 * eps))
            };
            let denom = analytic.abs().max(num.abs()).max(1e-8);
            worst = worst.max((analytic - num).abs() / denom);
        }
        worst
    }

    pub fn standardized_batch(&self, data: &LabeledDataset) -> Result<Vec<(Vec<f64>, usize)>> {
        let mask = self.modality.mask(&self.layout);
        data.samples
            .iter()
            .map(|s| {
                Ok((
                    standardize_and_mask(&self.standardizer, &mask, &s.features)?,
                    s.label.index(),
                ))
            })
            .collect()
    }
}

pub fn train_mlp(
    data: &LabeledDataset,
    layout: &FeatureLayout,
    modality: ModalityChoice,
    cfg: &MlpConfig,
    seed: u64,
) -> Result<MlpModel> {
    let counts = data.class_counts();
    if let Some(cls) = counts.iter().position(|&n| n < 2) {
        return Err(Error::InsufficientData(format!(
            "class {} has {} samples, need at least 2",
            InteractionLabel::from_index(cls)?.name(),
            counts[cls]
        )));
    }
    let fvs: Vec<FeatureVector> = data.samples.iter().map(|s| s.features.clone()).collect();
    let st = fit_standardizer(&fvs)?;
    let mut model = MlpModel::init(layout, modality, cfg, st, seed);
    let batch = model.standardized_batch(data)?;
    model.sgd(&batch, cfg.lr, cfg.epochs, seed)?;
    Ok(model)
}

/// Continued SGD on the new samples with a reduced learning rate; the
/// standardizer and architecture are unchanged.
pub fn finetune_mlp(model: &MlpModel, new_data: &LabeledDataset) -> Result<MlpModel> {
    let mut tuned = model.clone();
    let batch = tuned.standardized_batch(new_data)?;
    let lr = model.config.lr * model.config.finetune_lr_scale;
    tuned.sgd(&batch, lr, model.config.finetune_epochs, 0x71)?;
    Ok(tuned)
}

#[cfg(test)]
mod tests {
    use super::super::testdata::blobs;
    use super::*;

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let (data, layout) = blobs(1, 12, 4.0, 3);
        let cfg = MlpConfig { epochs: 300, lr: 5e-3, ..MlpConfig::default() };
        let model = train_mlp(&data, &layout, ModalityChoice::All, &cfg, 1).unwrap();
        for s in &data.samples {
            assert_eq!(model.predict(&s.features).unwrap().0, s.label);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (data, layout) = blobs(1, 4, 2.0, 5);
        let cfg = MlpConfig { epochs: 3, ..MlpConfig::default() };
        let model = train_mlp(&data, &layout, ModalityChoice::All, &cfg, 2).unwrap();
        let batch = model.standardized_batch(&data).unwrap();
        let err = model.gradient_check(&batch, 20, 9);
        assert!(err < 1e-4, "gradient check relative error {err}");
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (data, layout) = blobs(1, 6, 3.0, 7);
        let cfg = MlpConfig { epochs: 10, ..MlpConfig::default() };
        let a = train_mlp(&data, &layout, ModalityChoice::All, &cfg, 42).unwrap();
        let b = train_mlp(&data, &layout, ModalityChoice::All, &cfg, 42).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.biases, b.biases);
    }

    #[test]
    fn zero_epochs_gives_soft_predictions() {
        let (data, layout) = blobs(1, 6, 3.0, 7);
        let cfg = MlpConfig { epochs: 0, ..MlpConfig::default() };
        let model = train_mlp(&data, &layout, ModalityChoice::All, &cfg, 4).unwrap();
        let (_, scores) = model.predict(&data.samples[0].features).unwrap();
        let sum: f64 = scores.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(scores.iter().all(|&p| p > 0.01), "untrained output should stay soft: {scores:?}");
    }

    #[test]
    fn divergent_lr_reports_error() {
        let (data, layout) = blobs(1, 8, 3.0, 7);
        let cfg = MlpConfig { epochs: 200, lr: 1e12, ..MlpConfig::default() };
        let out = train_mlp(&data, &layout, ModalityChoice::All, &cfg, 4);
        assert!(matches!(out, Err(Error::Divergence(_))));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let (data, layout) = blobs(1, 6, 2.0, 11);
        let cfg = MlpConfig { epochs: 20, ..MlpConfig::default() };
        let model = train_mlp(&data, &layout, ModalityChoice::All, &cfg, 3).unwrap();
        for s in &data.samples {
            let (_, scores) = model.predict(&s.features).unwrap();
            assert!((scores.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

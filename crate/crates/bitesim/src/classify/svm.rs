//! One-vs-one RBF soft-margin SVM trained by sequential minimal optimization
//! with maximal-violating-pair working-set selection. Per-sample box bounds
//! (C·weight) support weighted finetuning by exact retraining.

use super::{
    standardize_and_mask, InteractionLabel, LabeledDataset, ModalityChoice, NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::features::{fit_standardizer, FeatureLayout, FeatureVector, Standardizer};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SvmConfig {
    pub c: f64,
    /// RBF width; `None` means 1/F for feature count F.
    pub gamma: Option<f64>,
    /// Stop when the maximal KKT violation drops below this.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig { c: 10.0, gamma: None, tol: 1e-3, max_iters: 500_000 }
    }
}

/// One binary classifier of the one-vs-one decomposition; positive decision
/// votes for `pos`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairModel {
    pub pos: usize,
    pub neg: usize,
    pub support_vectors: Vec<Vec<f64>>,
    /// alpha_i * y_i per support vector.
    pub coefficients: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvmModel {
    pub layout: FeatureLayout,
    pub standardizer: Standardizer,
    pub modality: ModalityChoice,
    pub config: SvmConfig,
    pub gamma: f64,
    pub pairs: Vec<PairModel>,
    /// Raw (unstandardized) training set retained for finetune retraining.
    pub train_raw: Vec<(Vec<f64>, InteractionLabel, f64)>,
}

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

struct SmoSolution {
    alpha: Vec<f64>,
    bias: f64,
}

/// Solves min_α ½ αᵀQα − eᵀα s.t. yᵀα = 0, 0 ≤ α_i ≤ C_i, with
/// Q_ij = y_i y_j K_ij, by repeatedly optimizing the maximal violating pair.
fn smo(x: &[Vec<f64>], y: &[f64], c: &[f64], gamma: f64, tol: f64, max_iters: usize) -> Result<SmoSolution> {
    let n = x.len();
    let kernel: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| rbf(&x[i], &x[j], gamma)).collect())
        .collect();
    let mut alpha = vec![0.0; n];
    // gradient of the dual objective; starts at -1 with alpha = 0
    let mut grad = vec![-1.0; n];
    let mut m_val = 0.0;
    let mut m_low = 0.0;
    let mut converged = false;
    for _iter in 0..max_iters {
        // maximal violating pair over I_up / I_low
        let mut i_up: Option<usize> = None;
        let mut i_low: Option<usize> = None;
        m_val = f64::NEG_INFINITY;
        m_low = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            let in_up = (y[t] > 0.0 && alpha[t] < c[t]) || (y[t] < 0.0 && alpha[t] > 0.0);
            let in_low = (y[t] < 0.0 && alpha[t] < c[t]) || (y[t] > 0.0 && alpha[t] > 0.0);
            if in_up && v > m_val {
                m_val = v;
                i_up = Some(t);
            }
            if in_low && v < m_low {
                m_low = v;
                i_low = Some(t);
            }
        }
        if m_val - m_low < tol {
            converged = true;
            break;
        }
        let (i, j) = (i_up.unwrap(), i_low.unwrap());
        let old_i = alpha[i];
        let old_j = alpha[j];
        let quad = (kernel[i][i] + kernel[j][j] - 2.0 * y[i] * y[j] * kernel[i][j]).max(1e-12);
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > c[i] - c[j] {
                if alpha[i] > c[i] {
                    alpha[i] = c[i];
                    alpha[j] = c[i] - diff;
                }
            } else if alpha[j] > c[j] {
                alpha[j] = c[j];
                alpha[i] = c[j] + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c[i] {
                if alpha[i] > c[i] {
                    alpha[i] = c[i];
                    alpha[j] = sum - c[i];
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c[j] {
                if alpha[j] > c[j] {
                    alpha[j] = c[j];
                    alpha[i] = sum - c[j];
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let di = alpha[i] - old_i;
        let dj = alpha[j] - old_j;
        if di == 0.0 && dj == 0.0 {
            // numerically stuck at the box boundary
            converged = true;
            break;
        }
        for t in 0..n {
            grad[t] += y[t] * (y[i] * kernel[i][t] * di + y[j] * kernel[j][t] * dj);
        }
    }
    if !converged {
        return Err(Error::NonConvergence(format!(
            "SMO hit the iteration cap with KKT gap {:.3e} (tol {:.1e}, n = {})",
            m_val - m_low,
            tol,
            n
        )));
    }
    // bias from free support vectors, falling back to the violation midpoint
    let mut free_sum = 0.0;
    let mut free_n = 0usize;
    for t in 0..n {
        if alpha[t] > 1e-9 && alpha[t] < c[t] - 1e-9 {
            free_sum += -y[t] * grad[t];
            free_n += 1;
        }
    }
    let bias = if free_n > 0 {
        free_sum / free_n as f64
    } else {
        0.5 * (m_val.min(m_low) + m_val.max(m_low))
    };
    Ok(SmoSolution { alpha, bias })
}

fn train_pairs(
    x: &[Vec<f64>],
    labels: &[InteractionLabel],
    weights: &[f64],
    cfg: &SvmConfig,
    gamma: f64,
) -> Result<Vec<PairModel>> {
    let mut pairs = Vec::new();
    for a in 0..NUM_CLASSES {
        for b in (a + 1)..NUM_CLASSES {
            let idx: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, l)| l.index() == a || l.index() == b)
                .map(|(i, _)| i)
                .collect();
            let px: Vec<Vec<f64>> = idx.iter().map(|&i| x[i].clone()).collect();
            let py: Vec<f64> =
                idx.iter().map(|&i| if labels[i].index() == a { 1.0 } else { -1.0 }).collect();
            let pc: Vec<f64> = idx.iter().map(|&i| cfg.c * weights[i]).collect();
            let sol = smo(&px, &py, &pc, gamma, cfg.tol, cfg.max_iters)?;
            let mut sv = Vec::new();
            let mut coef = Vec::new();
            for (k, &al) in sol.alpha.iter().enumerate() {
                if al > 1e-12 {
                    sv.push(px[k].clone());
                    coef.push(al * py[k]);
                }
            }
            pairs.push(PairModel {
                pos: a,
                neg: b,
                support_vectors: sv,
                coefficients: coef,
                bias: sol.bias,
            });
        }
    }
    Ok(pairs)
}

fn train_weighted(
    raw: Vec<(Vec<f64>, InteractionLabel, f64)>,
    layout: &FeatureLayout,
    modality: ModalityChoice,
    cfg: &SvmConfig,
) -> Result<SvmModel> {
    let mut counts = [0usize; NUM_CLASSES];
    for (_, l, _) in &raw {
        counts[l.index()] += 1;
    }
    if let Some(cls) = counts.iter().position(|&n| n < 2) {
        return Err(Error::InsufficientData(format!(
            "class {} has {} samples, need at least 2",
            InteractionLabel::from_index(cls)?.name(),
            counts[cls]
        )));
    }
    let fvs: Vec<FeatureVector> = raw
        .iter()
        .map(|(v, _, _)| FeatureVector { values: v.clone(), visual_present: true })
        .collect();
    let standardizer = fit_standardizer(&fvs)?;
    let mask = modality.mask(layout);
    let x: Vec<Vec<f64>> = fvs
        .iter()
        .map(|fv| standardize_and_mask(&standardizer, &mask, fv))
        .collect::<Result<_>>()?;
    let gamma = cfg.gamma.unwrap_or(1.0 / layout.len() as f64);
    let labels: Vec<InteractionLabel> = raw.iter().map(|(_, l, _)| *l).collect();
    let weights: Vec<f64> = raw.iter().map(|(_, _, w)| *w).collect();
    let pairs = train_pairs(&x, &labels, &weights, cfg, gamma)?;
    Ok(SvmModel {
        layout: layout.clone(),
        standardizer,
        modality,
        config: cfg.clone(),
        gamma,
        pairs,
        train_raw: raw,
    })
}

pub fn train_svm(
    data: &LabeledDataset,
    layout: &FeatureLayout,
    modality: ModalityChoice,
    cfg: &SvmConfig,
) -> Result<SvmModel> {
    let raw: Vec<(Vec<f64>, InteractionLabel, f64)> = data
        .samples
        .iter()
        .map(|s| (s.features.values.clone(), s.label, 1.0))
        .collect();
    train_weighted(raw, layout, modality, cfg)
}

/// Exact retrain on the union of the stored training set and the new samples
/// with per-sample weight (effective box bound C·weight).
pub fn finetune_svm(model: &SvmModel, new_data: &LabeledDataset, weight: f64) -> Result<SvmModel> {
    if weight <= 0.0 {
        return Err(Error::Config(format!("finetune weight must be positive, got {weight}")));
    }
    let mut raw = model.train_raw.clone();
    for s in &new_data.samples {
        if s.features.values.len() != model.layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "finetune sample has {} features, model expects {}",
                s.features.values.len(),
                model.layout.len()
            )));
        }
        raw.push((s.features.values.clone(), s.label, weight));
    }
    train_weighted(raw, &model.layout, model.modality, &model.config)
}

impl SvmModel {
    pub fn decision(&self, pair: &PairModel, z: &[f64]) -> f64 {
        pair.support_vectors
            .iter()
            .zip(pair.coefficients.iter())
            .map(|(sv, c)| c * rbf(sv, z, self.gamma))
            .sum::<f64>()
            + pair.bias
    }

    pub fn predict(&self, fv: &FeatureVector) -> Result<(InteractionLabel, [f64; NUM_CLASSES])> {
        let mask = self.modality.mask(&self.layout);
        let z = standardize_and_mask(&self.standardizer, &mask, fv)?;
        let mut votes = [0.0f64; NUM_CLASSES];
        let mut margin = [0.0f64; NUM_CLASSES];
        for pair in &self.pairs {
            let d = self.decision(pair, &z);
            if d >= 0.0 {
                votes[pair.pos] += 1.0;
            } else {
                votes[pair.neg] += 1.0;
            }
            margin[pair.pos] += d;
            margin[pair.neg] -= d;
        }
        // bounded margin tie-break keeps the vote ordering primary
        let mut scores = [0.0f64; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            scores[c] = votes[c] + 1e-3 * (1.0 / (1.0 + (-margin[c]).exp()));
        }
        let best = (0..NUM_CLASSES)
            .max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap())
            .unwrap();
        Ok((InteractionLabel::from_index(best)?, scores))
    }
}

//! Interaction classifiers (one-vs-one RBF SVM, small MLP), evaluation
//! metrics, and the dataset protocols: per-participant 80:20 aggregation,
//! leave-one-participant-out, and weighted finetuning.

pub mod mlp;
pub mod svm;

use crate::error::{Error, Result};
use crate::features::{FeatureLayout, FeatureVector, Modality, Standardizer};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use mlp::{MlpConfig, MlpModel};
pub use svm::{SvmConfig, SvmModel};

pub const NUM_CLASSES: usize = 4;
pub const MODEL_FORMAT: &str = "bitesim-model-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InteractionLabel {
    Incidental,
    InMouthManipulation,
    Impulsive,
    Bite,
}

impl InteractionLabel {
    pub const ALL: [InteractionLabel; NUM_CLASSES] = [
        InteractionLabel::Incidental,
        InteractionLabel::InMouthManipulation,
        InteractionLabel::Impulsive,
        InteractionLabel::Bite,
    ];

    pub fn index(self) -> usize {
        match self {
            InteractionLabel::Incidental => 0,
            InteractionLabel::InMouthManipulation => 1,
            InteractionLabel::Impulsive => 2,
            InteractionLabel::Bite => 3,
        }
    }

    pub fn from_index(i: usize) -> Result<InteractionLabel> {
        InteractionLabel::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Config(format!("label index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            InteractionLabel::Incidental => "incidental",
            InteractionLabel::InMouthManipulation => "in_mouth_manipulation",
            InteractionLabel::Impulsive => "impulsive",
            InteractionLabel::Bite => "bite",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub features: FeatureVector,
    pub label: InteractionLabel,
    pub participant: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    /// Generator config digest + seed, recorded for reproducibility.
    pub provenance: String,
}

impl LabeledDataset {
    pub fn participants(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.samples.iter().map(|s| s.participant).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for s in &self.samples {
            counts[s.label.index()] += 1;
        }
        counts
    }

    pub fn filter<F: Fn(&Sample) -> bool>(&self, keep: F) -> LabeledDataset {
        LabeledDataset {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Which feature block the model sees; masked-out entries are zeroed after
/// standardization so the layout stays fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityChoice {
    All,
    Haptic,
    Visual,
}

impl ModalityChoice {
    pub fn mask(self, layout: &FeatureLayout) -> Vec<bool> {
        layout
            .modality
            .iter()
            .map(|m| match self {
                ModalityChoice::All => true,
                ModalityChoice::Haptic => *m == Modality::Haptic,
                ModalityChoice::Visual => *m == Modality::Visual,
            })
            .collect()
    }
}

pub(crate) fn standardize_and_mask(
    st: &Standardizer,
    mask: &[bool],
    fv: &FeatureVector,
) -> Result<Vec<f64>> {
    let z = st.apply(fv)?;
    Ok(z.values
        .iter()
        .zip(mask.iter())
        .map(|(v, keep)| if *keep { *v } else { 0.0 })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub macro_f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// confusion[true][predicted]
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub n_test: usize,
}

/// Computes the confusion matrix and macro-averaged F1 from paired
/// (true, predicted) labels. A class with no true and no predicted samples
/// contributes F1 = 0 to the macro average.
pub fn metrics_from_pairs(pairs: &[(InteractionLabel, InteractionLabel)]) -> Result<Metrics> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no test samples".into()));
    }
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (truth, pred) in pairs {
        confusion[truth.index()][pred.index()] += 1;
    }
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    for c in 0..NUM_CLASSES {
        let tp = confusion[c][c] as f64;
        let pred_c: f64 = (0..NUM_CLASSES).map(|t| confusion[t][c] as f64).sum();
        let true_c: f64 = confusion[c].iter().map(|&x| x as f64).sum();
        let precision = if pred_c > 0.0 { tp / pred_c } else { 0.0 };
        let recall = if true_c > 0.0 { tp / true_c } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics { precision, recall, f1 });
    }
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / NUM_CLASSES as f64;
    let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    Ok(Metrics {
        macro_f1,
        accuracy: correct as f64 / pairs.len() as f64,
        per_class,
        confusion,
        n_test: pairs.len(),
    })
}

/// A trained model of either kind, serialized as a single tagged JSON value.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Model {
    Svm(SvmModel),
    Mlp(MlpModel),
}

impl Model {
    pub fn predict(&self, fv: &FeatureVector) -> Result<(InteractionLabel, [f64; NUM_CLASSES])> {
        match self {
            Model::Svm(m) => m.predict(fv),
            Model::Mlp(m) => m.predict(fv),
        }
    }

    pub fn layout(&self) -> &FeatureLayout {
        match self {
            Model::Svm(m) => &m.layout,
            Model::Mlp(m) => &m.layout,
        }
    }

    pub fn modality(&self) -> ModalityChoice {
        match self {
            Model::Svm(m) => m.modality,
            Model::Mlp(m) => m.modality,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "model", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelConfig {
    Svm(SvmConfig),
    Mlp(MlpConfig),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Svm(SvmConfig::default())
    }
}

pub fn train(
    cfg: &ModelConfig,
    data: &LabeledDataset,
    layout: &FeatureLayout,
    modality: ModalityChoice,
    seed: u64,
) -> Result<Model> {
    match cfg {
        ModelConfig::Svm(c) => Ok(Model::Svm(svm::train_svm(data, layout, modality, c)?)),
        ModelConfig::Mlp(c) => Ok(Model::Mlp(mlp::train_mlp(data, layout, modality, c, seed)?)),
    }
}

pub fn evaluate(model: &Model, data: &LabeledDataset) -> Result<Metrics> {
    if data.samples.is_empty() {
        return Err(Error::InsufficientData("empty evaluation set".into()));
    }
    let pairs: Vec<(InteractionLabel, InteractionLabel)> = data
        .samples
        .iter()
        .map(|s| Ok((s.label, model.predict(&s.features)?.0)))
        .collect::<Result<_>>()?;
    metrics_from_pairs(&pairs)
}

/// Retrains (SVM) or continues training (MLP) with extra weighted samples.
/// Empty `new_data` returns the model unchanged.
pub fn finetune(model: &Model, new_data: &LabeledDataset, weight: f64) -> Result<Model> {
    if new_data.samples.is_empty() {
        return Ok(model.clone());
    }
    match model {
        Model::Svm(m) => Ok(Model::Svm(svm::finetune_svm(m, new_data, weight)?)),
        Model::Mlp(m) => Ok(Model::Mlp(mlp::finetune_mlp(m, new_data)?)),
    }
}

/// Seeded per-participant stratified 80:20 split: train on the 80% shards of
/// every participant, test on the pooled 20% shards.
pub fn protocol_aggregated(
    data: &LabeledDataset,
    cfg: &ModelConfig,
    layout: &FeatureLayout,
    modality: ModalityChoice,
    seed: u64,
) -> Result<Metrics> {
    let (train_set, test_set) = split_80_20(data, seed)?;
    let model = train(cfg, &train_set, layout, modality, seed)?;
    evaluate(&model, &test_set)
}

pub fn split_80_20(data: &LabeledDataset, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut train_samples = Vec::new();
    let mut test_samples = Vec::new();
    for pid in data.participants() {
        for label in InteractionLabel::ALL {
            let mut idx: Vec<usize> = data
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.participant == pid && s.label == label)
                .map(|(i, _)| i)
                .collect();
            if idx.is_empty() {
                continue;
            }
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (pid as u64) << 8 ^ label.index() as u64);
            idx.shuffle(&mut rng);
            let n_test = (idx.len() as f64 * 0.2).round() as usize;
            for (k, i) in idx.into_iter().enumerate() {
                if k < n_test {
                    test_samples.push(data.samples[i].clone());
                } else {
                    train_samples.push(data.samples[i].clone());
                }
            }
        }
    }
    if train_samples.is_empty() || test_samples.is_empty() {
        return Err(Error::InsufficientData("dataset too small for an 80:20 split".into()));
    }
    let prov = data.provenance.clone();
    Ok((
        LabeledDataset { samples: train_samples, provenance: prov.clone() },
        LabeledDataset { samples: test_samples, provenance: prov },
    ))
}

/// Leave-one-participant-out: one Metrics per held-out participant, in
/// ascending participant order.
pub fn protocol_loo(
    data: &LabeledDataset,
    cfg: &ModelConfig,
    layout: &FeatureLayout,
    modality: ModalityChoice,
    seed: u64,
) -> Result<Vec<(usize, Metrics)>> {
    let pids = data.participants();
    if pids.len() < 2 {
        return Err(Error::InsufficientData("LOO needs at least 2 participants".into()));
    }
    let mut out = Vec::new();
    for pid in pids {
        let train_set = data.filter(|s| s.participant != pid);
        let test_set = data.filter(|s| s.participant == pid);
        let model = train(cfg, &train_set, layout, modality, seed)?;
        out.push((pid, evaluate(&model, &test_set)?));
    }
    Ok(out)
}

/// Novel-participant finetuning curve: train on everyone but `target`, then
/// for each size in `sizes` finetune with that many of the target's samples
/// (stratified, seeded) and evaluate on the target's remaining samples.
/// Returns (size, macro_f1) pairs, starting with (0, zero-shot score).
pub fn finetune_curve(
    data: &LabeledDataset,
    target: usize,
    sizes: &[usize],
    cfg: &ModelConfig,
    layout: &FeatureLayout,
    modality: ModalityChoice,
    weight: f64,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let base_train = data.filter(|s| s.participant != target);
    let target_data = data.filter(|s| s.participant == target);
    if target_data.samples.is_empty() {
        return Err(Error::InsufficientData(format!("participant {target} has no samples")));
    }
    let max_size = sizes.iter().copied().max().unwrap_or(0);
    // carve a stratified finetune pool off the target's data; the rest is the
    // fixed test set shared by every curve point
    let mut pool = Vec::new();
    let mut test_samples = Vec::new();
    for label in InteractionLabel::ALL {
        let mut idx: Vec<usize> = target_data
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == label)
            .map(|(i, _)| i)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ce ^ label.index() as u64);
        idx.shuffle(&mut rng);
        let per_label = (max_size + NUM_CLASSES - 1) / NUM_CLASSES;
        for (k, i) in idx.into_iter().enumerate() {
            if k < per_label {
                pool.push(target_data.samples[i].clone());
            } else {
                test_samples.push(target_data.samples[i].clone());
            }
        }
    }
    if test_samples.is_empty() {
        return Err(Error::InsufficientData("finetune pool consumed the whole test set".into()));
    }
    let test_set =
        LabeledDataset { samples: test_samples, provenance: data.provenance.clone() };
    let base_model = train(cfg, &base_train, layout, modality, seed)?;
    let mut out = vec![(0, evaluate(&base_model, &test_set)?.macro_f1)];
    for &size in sizes {
        // round-robin across labels keeps every prefix stratified
        let mut subset = Vec::new();
        let mut by_label: Vec<Vec<&Sample>> = vec![Vec::new(); NUM_CLASSES];
        for s in &pool {
            by_label[s.label.index()].push(s);
        }
        let mut k = 0;
        'outer: loop {
            for c in 0..NUM_CLASSES {
                if let Some(s) = by_label[c].get(k) {
                    subset.push((*s).clone());
                    if subset.len() == size {
                        break 'outer;
                    }
                }
            }
            k += 1;
            if k > pool.len() {
                break;
            }
        }
        let new_data =
            LabeledDataset { samples: subset, provenance: data.provenance.clone() };
        let tuned = finetune(&base_model, &new_data, weight)?;
        out.push((size, evaluate(&tuned, &test_set)?.macro_f1));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    model: Model,
}

pub fn save_model(model: &Model, path: &std::path::Path) -> Result<()> {
    let file = ModelFile { format: MODEL_FORMAT.into(), model: model.clone() };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    dataset: LabeledDataset,
}

pub const DATASET_FORMAT: &str = "bitesim-dataset-v1";

pub fn save_dataset(data: &LabeledDataset, path: &std::path::Path) -> Result<()> {
    let file = DatasetFile { format: DATASET_FORMAT.into(), dataset: data.clone() };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_dataset(path: &std::path::Path) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path)?;
    let file: DatasetFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    if file.format != DATASET_FORMAT {
        return Err(Error::Parse {
            path: path.display().to_string(),
            msg: format!("unsupported dataset format {:?}", file.format),
        });
    }
    Ok(file.dataset)
}

pub fn load_model(path: &std::path::Path) -> Result<Model> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    if file.format != MODEL_FORMAT {
        return Err(Error::Parse {
            path: path.display().to_string(),
            msg: format!("unsupported model format {:?}", file.format),
        });
    }
    Ok(file.model)
}

#[cfg(test)]
pub(crate) mod testdata {
    use super::*;
    use rand::Rng;

    /// Tiny synthetic 4-class set: one informative feature per class plus
    /// noise, with a per-participant offset on a shared feature.
    pub fn blobs(
        participants: usize,
        per_class: usize,
        sep: f64,
        seed: u64,
    ) -> (LabeledDataset, FeatureLayout) {
        let f = 8;
        let layout = FeatureLayout {
            names: (0..f).map(|i| format!("f{i}")).collect(),
            modality: (0..f)
                .map(|i| if i < 5 { Modality::Haptic } else { Modality::Visual })
                .collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::new();
        for pid in 0..participants {
            let offset = pid as f64 * 0.8;
            for label in InteractionLabel::ALL {
                for _ in 0..per_class {
                    let mut values = vec![0.0; f];
                    for v in values.iter_mut() {
                        *v = rng.random_range(-1.0..1.0);
                    }
                    values[label.index()] += sep;
                    values[4] += offset;
                    samples.push(Sample {
                        features: FeatureVector { values, visual_present: true },
                        label,
                        participant: pid,
                    });
                }
            }
        }
        (LabeledDataset { samples, provenance: "test-blobs".into() }, layout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label_seq(counts: [usize; 4]) -> Vec<InteractionLabel> {
        let mut out = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            out.extend(std::iter::repeat(InteractionLabel::from_index(c).unwrap()).take(n));
        }
        out
    }

    #[test]
    fn metrics_perfect_predictions() {
        let labels = label_seq([5, 5, 5, 5]);
        let pairs: Vec<_> = labels.iter().map(|&l| (l, l)).collect();
        let m = metrics_from_pairs(&pairs).unwrap();
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.accuracy, 1.0);
        for c in 0..4 {
            assert_eq!(m.confusion[c][c], 5);
        }
    }

    #[test]
    fn metrics_shuffled_labels_near_chance() {
        use rand::seq::SliceRandom;
        let labels = label_seq([50, 50, 50, 50]);
        let mut sum = 0.0;
        let trials = 50;
        for seed in 0..trials {
            let mut preds = labels.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            preds.shuffle(&mut rng);
            let pairs: Vec<_> = labels.iter().cloned().zip(preds).collect();
            sum += metrics_from_pairs(&pairs).unwrap().macro_f1;
        }
        let mean = sum / trials as f64;
        assert!((mean - 0.25).abs() < 0.05, "mean macro F1 {mean}");
    }

    #[test]
    fn metrics_hand_built_confusion() {
        // confusion (true x pred):
        //   [3 1 0 0]
        //   [0 4 0 0]
        //   [1 0 3 0]
        //   [0 0 0 4]
        let mut pairs = Vec::new();
        let l = |i| InteractionLabel::from_index(i).unwrap();
        for _ in 0..3 { pairs.push((l(0), l(0))); }
        pairs.push((l(0), l(1)));
        for _ in 0..4 { pairs.push((l(1), l(1))); }
        pairs.push((l(2), l(0)));
        for _ in 0..3 { pairs.push((l(2), l(2))); }
        for _ in 0..4 { pairs.push((l(3), l(3))); }
        let m = metrics_from_pairs(&pairs).unwrap();
        // class 0: P=3/4, R=3/4, F1=0.75; class 1: P=4/5, R=1, F1=8/9
        // class 2: P=1, R=3/4, F1=6/7; class 3: F1=1
        let expect = (0.75 + 8.0 / 9.0 + 6.0 / 7.0 + 1.0) / 4.0;
        assert!((m.macro_f1 - expect).abs() < 1e-12);
        let total: usize = m.confusion.iter().flatten().sum();
        assert_eq!(total, m.n_test);
    }

    #[test]
    fn metrics_empty_errors() {
        assert!(metrics_from_pairs(&[]).is_err());
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let (data, _) = testdata::blobs(2, 10, 4.0, 3);
        let (train, test) = split_80_20(&data, 9).unwrap();
        assert_eq!(train.samples.len() + test.samples.len(), data.samples.len());
        assert_eq!(test.samples.len(), 2 * 4 * 2); // 20% of 10 per class per pid
        for label in InteractionLabel::ALL {
            let n = test.samples.iter().filter(|s| s.label == label).count();
            assert_eq!(n, 4);
        }
    }

    #[test]
    fn model_roundtrip_via_json() {
        let (data, layout) = testdata::blobs(1, 6, 4.0, 4);
        let cfg = ModelConfig::Svm(SvmConfig::default());
        let model = train(&cfg, &data, &layout, ModalityChoice::All, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        for s in &data.samples {
            assert_eq!(
                model.predict(&s.features).unwrap().0,
                loaded.predict(&s.features).unwrap().0
            );
        }
    }
}

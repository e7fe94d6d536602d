//! Distilled-model UDF candidates: object-aware sampling, vision-model
//! labels, classifier training, and uncertainty-driven active learning.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use scenequery_core::metrics::Confusion;
use scenequery_core::mlp::{train, TrainConfig, TrainError};
use scenequery_core::{SceneTables, UnitId};

use crate::features::{build_features, FeatureError, FeatureExtractor, SYNTHETIC_ID};
use crate::llm::Gateway;
use crate::registry::{ModelArtifact, UdfCandidate, UdfEnv, UdfKind, UdfSignature};
use crate::storage::{StorageError, Store};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub n_labeled: usize,
    pub al_rounds: usize,
    pub al_batch: usize,
    /// Unlabeled units the active-learning rounds choose from.
    pub pool_size: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub threshold: f64,
    pub extractor: String,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            n_labeled: 100,
            al_rounds: 3,
            al_batch: 10,
            pool_size: 2000,
            hidden_dim: 128,
            learning_rate: 0.01,
            epochs: 100,
            threshold: 0.5,
            extractor: SYNTHETIC_ID.into(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { hidden_dim: self.hidden_dim, learning_rate: self.learning_rate, epochs: self.epochs, seed: self.seed }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("{0}")]
    Storage(#[from] StorageError),
    #[error("{0}")]
    Features(#[from] FeatureError),
    #[error("{0}")]
    Train(#[from] TrainError),
    #[error("labels for {name} are all one class ({positives} positive, {negatives} negative)")]
    Degenerate { name: String, positives: usize, negatives: usize },
}

/// Labeled units with their features, in labeling order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet {
    pub units: Vec<UnitId>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
}

impl LabeledSet {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }

    pub fn push(&mut self, unit: UnitId, features: Vec<f64>, label: bool) {
        self.units.push(unit);
        self.features.push(features);
        self.labels.push(label);
    }
}

pub fn unit_features(
    tables: &SceneTables,
    units: &[UnitId],
    extractor: &dyn FeatureExtractor,
    env: &UdfEnv,
) -> Result<Vec<Vec<f64>>, FeatureError> {
    units
        .iter()
        .map(|&u| {
            let view = tables.tuple(u).expect("units come from the same tables");
            build_features(&view, extractor, env.images.as_deref())
        })
        .collect()
}

pub fn train_classifier(
    features: &[Vec<f64>],
    labels: &[bool],
    cfg: &DistillConfig,
) -> Result<ModelArtifact, TrainError> {
    let trained = train(features, labels, &cfg.train_config())?;
    Ok(ModelArtifact { extractor: cfg.extractor.clone(), threshold: cfg.threshold, mlp: trained.model })
}

/// Indices of the `batch` pool items whose probability is closest to 0.5,
/// ties broken by unit id.
pub fn most_uncertain(model: &ModelArtifact, pool: &[(UnitId, Vec<f64>)], batch: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, UnitId, usize)> =
        pool.iter().enumerate().map(|(i, (u, x))| ((model.mlp.probability(x) - 0.5).abs(), *u, i)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(batch).map(|(_, _, i)| i).collect()
}

/// Runs `cfg.al_rounds` rounds: label the most uncertain pool batch, add it
/// to `labeled`, retrain from scratch. Unlabelable units leave the pool.
pub fn active_learning_loop(
    mut model: ModelArtifact,
    labeled: &mut LabeledSet,
    pool: &mut Vec<(UnitId, Vec<f64>)>,
    cfg: &DistillConfig,
    label: &mut dyn FnMut(UnitId) -> Option<bool>,
) -> Result<ModelArtifact, TrainError> {
    for _ in 0..cfg.al_rounds {
        if pool.is_empty() {
            break;
        }
        let mut picked = most_uncertain(&model, pool, cfg.al_batch);
        picked.sort_unstable();
        let mut taken: Vec<(UnitId, Vec<f64>)> = Vec::with_capacity(picked.len());
        for &i in picked.iter().rev() {
            taken.push(pool.swap_remove(i));
        }
        taken.sort_by_key(|(u, _)| *u);
        for (u, x) in taken {
            if let Some(l) = label(u) {
                labeled.push(u, x, l);
            }
        }
        model = train_classifier(&labeled.features, &labeled.labels, cfg)?;
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub name: String,
    pub classes: BTreeSet<String>,
    pub initial_labels: usize,
    pub final_labels: usize,
    pub positives: usize,
    pub negatives: usize,
    pub skipped: usize,
    /// F1 of the final model on its own labeled set.
    pub training_f1: f64,
}

pub struct Distilled {
    pub candidate: UdfCandidate,
    pub report: DistillReport,
}

/// Samples relevant units, labels them with the vision model, and features
/// them. Fails when the labels are all one class.
pub fn collect_training_set(
    sig: &UdfSignature,
    store: &Store,
    cfg: &DistillConfig,
    gateway: &Gateway,
    env: &UdfEnv,
) -> Result<(LabeledSet, BTreeSet<String>, usize), DistillError> {
    let onames = store.active_domains().onames;
    let classes = gateway.relevant_object_classes(sig, &onames);
    let units = store.sample_tuples(sig.arity, cfg.n_labeled.max(2), Some(&classes), cfg.seed)?;
    let extractor = env.extractors.get(&cfg.extractor)?;
    let tables = store.read();
    let mut set = LabeledSet::default();
    let mut skipped = 0;
    for u in units {
        let view = tables.tuple(u).expect("sampled from these tables");
        match gateway.vlm_label(&view, sig, env.images.as_deref()) {
            Ok(l) => set.push(u, build_features(&view, extractor.as_ref(), env.images.as_deref())?, l),
            Err(_) => skipped += 1,
        }
    }
    if set.positives() == 0 || set.negatives() == 0 {
        return Err(DistillError::Degenerate { name: sig.name.clone(), positives: set.positives(), negatives: set.negatives() });
    }
    Ok((set, classes, skipped))
}

/// Builds one distilled-model candidate for `sig`.
pub fn distill(
    sig: &UdfSignature,
    store: &Store,
    cfg: &DistillConfig,
    gateway: &Gateway,
    env: &UdfEnv,
) -> Result<Distilled, DistillError> {
    let (mut labeled, classes, mut skipped) = collect_training_set(sig, store, cfg, gateway, env)?;
    let initial = labeled.units.len();
    let model = train_classifier(&labeled.features, &labeled.labels, cfg)?;
    let extractor = env.extractors.get(&cfg.extractor)?;
    let mut pool = {
        let seen: BTreeSet<UnitId> = labeled.units.iter().copied().collect();
        let units: Vec<UnitId> = store
            .sample_tuples(sig.arity, cfg.pool_size.max(1) + seen.len(), Some(&classes), cfg.seed.wrapping_add(1))?
            .into_iter()
            .filter(|u| !seen.contains(u))
            .take(cfg.pool_size)
            .collect();
        let tables = store.read();
        let xs = unit_features(&tables, &units, extractor.as_ref(), env)?;
        units.into_iter().zip(xs).collect::<Vec<_>>()
    };
    let model = {
        let tables = store.read();
        let mut label = |u: UnitId| {
            let view = tables.tuple(u)?;
            let l = gateway.vlm_label(&view, sig, env.images.as_deref()).ok();
            if l.is_none() {
                skipped += 1;
            }
            l
        };
        active_learning_loop(model, &mut labeled, &mut pool, cfg, &mut label)?
    };
    let predicted = labeled.features.iter().map(|x| model.mlp.probability(x) >= model.threshold);
    let training_f1 = Confusion::from_pairs(predicted.zip(labeled.labels.iter().copied())).f1();
    let report = DistillReport {
        name: sig.name.clone(),
        classes,
        initial_labels: initial,
        final_labels: labeled.units.len(),
        positives: labeled.positives(),
        negatives: labeled.negatives(),
        skipped,
        training_f1,
    };
    let candidate = UdfCandidate {
        signature: sig.clone(),
        interpretation: format!("classifier distilled from {} vision-model labels", labeled.units.len()),
        kind: UdfKind::DistilledModel { model },
    };
    Ok(Distilled { candidate, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use scenequery_core::mlp::Mlp;

    #[test]
    fn uncertainty_ties_break_by_unit() {
        let mut mlp = Mlp::init(1, 1, 0);
        mlp.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let model = ModelArtifact { extractor: "x".into(), threshold: 0.5, mlp };
        let pool: Vec<(UnitId, Vec<f64>)> =
            [3u32, 1, 2, 0].iter().map(|&o| (UnitId::object(0, 0, o), vec![o as f64])).collect();
        assert_eq!(most_uncertain(&model, &pool, 2), vec![3, 1]);
    }

    #[test]
    fn zero_rounds_keep_the_model() {
        let xs = vec![vec![1.0], vec![-1.0]];
        let cfg = DistillConfig { al_rounds: 0, hidden_dim: 4, ..Default::default() };
        let m = train_classifier(&xs, &[true, false], &cfg).unwrap();
        let mut set = LabeledSet::default();
        let mut pool = vec![(UnitId::object(0, 0, 0), vec![0.5])];
        let out = active_learning_loop(m.clone(), &mut set, &mut pool, &cfg, &mut |_| Some(true)).unwrap();
        assert_eq!(out, m);
        assert_eq!(pool.len(), 1);
    }
}

//! Accuracy under PGD attack and under common corruptions.

use std::collections::BTreeMap;

use air_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::adversary::PgdConfig;
use crate::corruption::{corrupt, CorruptionKind, CorruptionSpec};
use crate::data::Dataset;
use crate::error::{precondition, Result};
use crate::finetune::{hit_rate, Classifier};
use crate::rng::{derive_seed, rng_for, stream};

const ATTACK_CHUNK: usize = 128;

fn labels(dataset: &Dataset) -> Result<&[usize]> {
    dataset
        .labels()
        .ok_or_else(|| precondition("evaluation needs labeled data"))
}

pub fn standard_accuracy(clf: &Classifier, dataset: &Dataset) -> Result<f64> {
    clf.accuracy(dataset.images(), labels(dataset)?)
}

/// Fraction of samples still classified correctly after a PGD attack on
/// the cross-entropy of their label.
pub fn robust_accuracy(
    clf: &Classifier,
    dataset: &Dataset,
    attack: &PgdConfig,
    seed: u64,
) -> Result<f64> {
    let y = labels(dataset)?;
    let mut pred = Vec::with_capacity(y.len());
    for (c, start) in (0..dataset.len()).step_by(ATTACK_CHUNK).enumerate() {
        let len = ATTACK_CHUNK.min(dataset.len() - start);
        let x = dataset.images().slice_rows(start, len)?;
        let adv = clf.attack(
            &x,
            &y[start..start + len],
            attack,
            derive_seed(seed, &[stream::ATTACK, c as u64]),
        )?;
        pred.extend(clf.predict(&adv)?);
    }
    Ok(hit_rate(&pred, y))
}

/// Every image of `dataset` corrupted per `spec`; noise is keyed by sample index.
pub fn corrupted_images(dataset: &Dataset, spec: CorruptionSpec, seed: u64) -> Result<Tensor> {
    let kind_key = CorruptionKind::ALL
        .iter()
        .position(|k| *k == spec.kind)
        .expect("known kind") as u64;
    let parts = (0..dataset.len())
        .map(|i| {
            let mut rng = rng_for(
                seed,
                &[stream::CORRUPT, kind_key, spec.severity as u64, i as u64],
            );
            corrupt(&dataset.sample(i).pixels, spec, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let [c, h, w] = dataset.descriptor.sample_shape();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::new(vec![dataset.len(), c, h, w], data)?)
}

pub fn corruption_accuracy(
    clf: &Classifier,
    dataset: &Dataset,
    spec: CorruptionSpec,
    seed: u64,
) -> Result<f64> {
    let x = corrupted_images(dataset, spec, seed)?;
    clf.accuracy(&x, labels(dataset)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub attack: PgdConfig,
    pub severities: Vec<u8>,
    pub corruptions: Vec<CorruptionKind>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            attack: PgdConfig::evaluation(),
            severities: vec![1, 3, 5],
            corruptions: CorruptionKind::ALL.to_vec(),
            seed: 0,
        }
    }
}

/// Accuracy per corruption kind and severity.
pub type CorruptionTable = BTreeMap<CorruptionKind, BTreeMap<u8, f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub dataset: String,
    pub standard_acc: f64,
    pub robust_acc: f64,
    pub corruption: CorruptionTable,
}

impl EvalReport {
    /// Mean over severities, per kind.
    pub fn corruption_per_kind(&self) -> BTreeMap<CorruptionKind, f64> {
        self.corruption
            .iter()
            .filter(|(_, s)| !s.is_empty())
            .map(|(k, s)| (*k, s.values().sum::<f64>() / s.len() as f64))
            .collect()
    }

    /// Arithmetic mean of the per-kind values.
    pub fn corruption_mean(&self) -> Option<f64> {
        let per = self.corruption_per_kind();
        (!per.is_empty()).then(|| per.values().sum::<f64>() / per.len() as f64)
    }
}

pub fn evaluate(clf: &Classifier, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.attack.validate()?;
    let mut corruption = CorruptionTable::new();
    for &kind in &cfg.corruptions {
        let row = corruption.entry(kind).or_default();
        for &s in &cfg.severities {
            row.insert(
                s,
                corruption_accuracy(clf, dataset, CorruptionSpec::new(kind, s)?, cfg.seed)?,
            );
        }
    }
    Ok(EvalReport {
        protocol: clf.protocol.to_string(),
        dataset: dataset.descriptor.name.clone(),
        standard_acc: standard_accuracy(clf, dataset)?,
        robust_acc: robust_accuracy(clf, dataset, &cfg.attack, cfg.seed)?,
        corruption,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticBlobs;
    use crate::encoder::{Encoder, EncoderSpec};

    fn setup() -> (Classifier, Dataset) {
        let ds = SyntheticBlobs {
            samples: 12,
            size: 8,
            ..Default::default()
        }
        .generate();
        let enc = Encoder::new(EncoderSpec::tiny(3, 8, 8), 2).unwrap();
        (Classifier::new(enc, 4, 5).unwrap(), ds)
    }

    #[test]
    fn zero_radius_attack_matches_standard_accuracy() {
        let (clf, ds) = setup();
        let cfg = PgdConfig {
            eps: 0.0,
            ..PgdConfig::evaluation()
        };
        assert_eq!(
            robust_accuracy(&clf, &ds, &cfg, 0).unwrap(),
            standard_accuracy(&clf, &ds).unwrap()
        );
        let none = PgdConfig {
            steps: 0,
            random_start: false,
            ..PgdConfig::evaluation()
        };
        assert_eq!(
            robust_accuracy(&clf, &ds, &none, 0).unwrap(),
            standard_accuracy(&clf, &ds).unwrap()
        );
    }

    #[test]
    fn report_mean_is_mean_of_kinds() {
        let (clf, ds) = setup();
        let cfg = EvalConfig {
            attack: PgdConfig {
                steps: 1,
                ..PgdConfig::evaluation()
            },
            corruptions: vec![CorruptionKind::Brightness, CorruptionKind::Contrast],
            ..Default::default()
        };
        let r = evaluate(&clf, &ds, &cfg).unwrap();
        let per = r.corruption_per_kind();
        assert_eq!(r.corruption[&CorruptionKind::Brightness].len(), 3);
        let mean = (per[&CorruptionKind::Brightness] + per[&CorruptionKind::Contrast]) / 2.0;
        assert_eq!(r.corruption_mean().unwrap(), mean);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"brightness\":{\"1\":"));
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), r);
    }
}

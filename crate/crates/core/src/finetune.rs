//! Downstream classifiers on top of a pre-trained extractor.
//!
//! SLF trains a linear head on natural representations, ALF trains it on
//! PGD examples, AFF trains head and extractor together on PGD examples.
//! The extractor always runs through the adversarial normalization branch.
//! Attacks on a classifier use running normalization statistics.

use std::fmt;
use std::path::Path;

use air_tensor::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{pgd, PgdConfig};
use crate::checkpoint::{Checkpoint, CheckpointKind, RngState};
use crate::data::Dataset;
use crate::encoder::{BoundParams, BranchTag, Encoder, EncoderSpec, NormUsage, StatUpdate};
use crate::error::{precondition, AirError, Result};
use crate::kmeans::{kmeans, Clustering, KMeansConfig};
use crate::optim::Sgd;
use crate::rng::{derive_seed, rng_for, stream};
use crate::schedule::cosine_lr;

/// Rows per forward pass when only predictions are needed.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    Slf,
    Alf,
    Aff,
}

impl FinetuneMode {
    pub fn freezes_extractor(self) -> bool {
        !matches!(self, FinetuneMode::Aff)
    }

    pub fn adversarial(self) -> bool {
        !matches!(self, FinetuneMode::Slf)
    }
}

impl fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FinetuneMode::Slf => "SLF",
            FinetuneMode::Alf => "ALF",
            FinetuneMode::Aff => "AFF",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub attack: PgdConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: FinetuneMode::Slf,
            epochs: 25,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 2e-4,
            batch_size: 64,
            seed: 0,
            attack: PgdConfig::finetune(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || !(self.lr >= 0.0)
            || self.weight_decay < 0.0
            || !(0.0..1.0).contains(&self.momentum)
        {
            return Err(AirError::Config(
                "finetune needs batch_size > 0, lr >= 0, weight_decay >= 0, momentum in [0,1)"
                    .into(),
            ));
        }
        self.attack.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub encoder: Encoder,
    /// `(z, classes)`.
    head_weight: Tensor,
    head_bias: Tensor,
    pub protocol: FinetuneMode,
}

struct BoundClassifier {
    params: BoundParams,
    weight: Var,
    bias: Var,
}

impl Classifier {
    pub fn new(encoder: Encoder, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(precondition(format!("{classes} classes")));
        }
        let z = encoder.spec().representation_dim();
        let bound = 1.0 / (z as f64).sqrt();
        let mut rng = rng_for(seed, &[stream::HEAD]);
        let weight = (0..z * classes)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..classes)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Ok(Self {
            encoder,
            head_weight: Tensor::new(vec![z, classes], weight)?,
            head_bias: Tensor::new(vec![classes], bias)?,
            protocol: FinetuneMode::Slf,
        })
    }

    pub fn classes(&self) -> usize {
        self.head_bias.len()
    }

    pub fn head(&self) -> (&Tensor, &Tensor) {
        (&self.head_weight, &self.head_bias)
    }

    fn bind(&self, g: &mut Graph, train_extractor: bool, train_head: bool) -> BoundClassifier {
        let params = self.encoder.bind(g, train_extractor);
        let (weight, bias) = if train_head {
            (
                g.variable(self.head_weight.clone()),
                g.variable(self.head_bias.clone()),
            )
        } else {
            (
                g.constant(self.head_weight.clone()),
                g.constant(self.head_bias.clone()),
            )
        };
        BoundClassifier {
            params,
            weight,
            bias,
        }
    }

    fn logits_graph(
        &self,
        g: &mut Graph,
        b: &BoundClassifier,
        x: Var,
        usage: NormUsage,
        updates: &mut Vec<StatUpdate>,
    ) -> Result<Var> {
        let f =
            self.encoder
                .forward_graph(g, &b.params, x, BranchTag::Adversarial, usage, updates)?;
        head_logits(g, f.representation, b.weight, b.bias)
    }

    /// Evaluation-mode class scores.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut parts = Vec::new();
        for start in (0..images.rows()).step_by(EVAL_CHUNK) {
            let chunk = images.slice_rows(start, EVAL_CHUNK.min(images.rows() - start))?;
            let mut g = Graph::new();
            let b = self.bind(&mut g, false, false);
            let x = g.constant(chunk);
            let out = self.logits_graph(&mut g, &b, x, NormUsage::Running, &mut Vec::new())?;
            parts.push(g.value(out).clone());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::concat_rows(&refs)?)
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    pub fn accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(images)?;
        Ok(hit_rate(&pred, labels))
    }

    /// Mean cross-entropy and its gradient with respect to the input images.
    pub fn input_gradient(&self, images: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false, false);
        let x = g.variable(images.clone());
        let logits = self.logits_graph(&mut g, &b, x, NormUsage::Running, &mut Vec::new())?;
        let loss = cross_entropy(&mut g, logits, labels)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).item(), grads.get_or_zeros(x, g.shape(x))))
    }

    /// PGD examples maximizing the cross-entropy of the true labels.
    pub fn attack(
        &self,
        images: &Tensor,
        labels: &[usize],
        cfg: &PgdConfig,
        seed: u64,
    ) -> Result<Tensor> {
        let out = pgd(std::slice::from_ref(images), cfg, seed, |cur| {
            let (loss, grad) = self.input_gradient(&cur[0], labels)?;
            Ok((loss, vec![grad]))
        })?;
        Ok(out.adversarial.into_iter().next().expect("one input"))
    }

    pub fn save(&self, path: &Path, epoch: usize, seed: u64) -> Result<()> {
        let mut ck = Checkpoint::new(
            CheckpointKind::Classifier,
            self.encoder.spec().clone(),
            epoch,
            RngState { seed, epoch },
        );
        ck.header.meta =
            serde_json::json!({ "classes": self.classes(), "protocol": self.protocol });
        ck.push_encoder(&self.encoder);
        ck.push("head.weight", self.head_weight.data().to_vec());
        ck.push("head.bias", self.head_bias.data().to_vec());
        ck.save(path)
    }

    pub fn load(path: &Path, expected: Option<&EncoderSpec>) -> Result<Self> {
        let ck = Checkpoint::load(path, expected)?;
        if ck.header.kind != CheckpointKind::Classifier {
            return Err(AirError::Format {
                path: path.to_path_buf(),
                reason: "not a classifier checkpoint".into(),
            });
        }
        let bad = |reason: &str| AirError::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        let classes = ck.header.meta["classes"]
            .as_u64()
            .ok_or_else(|| bad("missing class count"))? as usize;
        let protocol = serde_json::from_value(ck.header.meta["protocol"].clone())
            .map_err(|e| bad(&e.to_string()))?;
        let encoder = ck.encoder(path)?;
        let z = encoder.spec().representation_dim();
        let weight = ck
            .section("head.weight")
            .ok_or_else(|| bad("missing head.weight"))?;
        let bias = ck
            .section("head.bias")
            .ok_or_else(|| bad("missing head.bias"))?;
        Ok(Self {
            encoder,
            head_weight: Tensor::new(vec![z, classes], weight.to_vec())?,
            head_bias: Tensor::new(vec![classes], bias.to_vec())?,
            protocol,
        })
    }
}

fn head_logits(g: &mut Graph, z: Var, weight: Var, bias: Var) -> Result<Var> {
    let out = g.matmul(z, weight)?;
    Ok(g.add_row_bias(out, bias)?)
}

/// Mean negative log-likelihood of `labels` under row-wise softmax.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let n = labels.len();
    let logp = g.log_softmax_rows(logits, None)?;
    let picked = g.gather(logp, labels.to_vec())?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / n as f64))
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

pub fn hit_rate(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len().max(1) as f64
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub classifier: Classifier,
    /// Mean training cross-entropy per epoch.
    pub losses: Vec<f64>,
}

fn batches(n: usize, size: usize) -> Vec<(usize, usize)> {
    if n <= size {
        return vec![(0, n)];
    }
    (0..n / size).map(|b| (b * size, size)).collect()
}

/// Trains a classifier from a pre-trained encoder on a labeled dataset.
pub fn finetune(
    encoder: &Encoder,
    dataset: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    let labels = dataset
        .labels()
        .ok_or_else(|| precondition("finetuning needs one label per image"))?;
    if labels.len() != dataset.len() || dataset.is_empty() {
        return Err(precondition(format!(
            "{} labels for {} images",
            labels.len(),
            dataset.len()
        )));
    }
    if dataset.descriptor.sample_shape() != encoder.spec().input_shape() {
        return Err(AirError::Shape {
            expected: encoder.spec().input_shape().to_vec(),
            actual: dataset.descriptor.sample_shape().to_vec(),
        });
    }
    let mut clf = Classifier::new(encoder.clone(), dataset.descriptor.classes, cfg.seed)?;
    clf.protocol = cfg.mode;
    let plan = batches(dataset.len(), cfg.batch_size);
    let total_steps = plan.len() * cfg.epochs;
    let head_len = clf.head_weight.len() + clf.head_bias.len();
    let mut head_opt = Sgd::new(head_len, cfg.momentum, cfg.weight_decay);
    let mut enc_opt = Sgd::new(clf.encoder.num_params(), cfg.momentum, cfg.weight_decay);
    // Natural representations never change for SLF.
    let fixed_repr = match cfg.mode {
        FinetuneMode::Slf => Some(representations(&clf.encoder, dataset.images())?),
        _ => None,
    };
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng_for(
            cfg.seed,
            &[stream::SHUFFLE, stream::HEAD, epoch as u64],
        ));
        let mut sum = 0.0;
        for (b, &(start, len)) in plan.iter().enumerate() {
            let idx = &order[start..start + len];
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let lr = cosine_lr(epoch * plan.len() + b, total_steps, cfg.lr)?;
            let mut x = dataset.gather(idx);
            if cfg.mode.adversarial() {
                let seed = derive_seed(cfg.seed, &[stream::ATTACK, epoch as u64, b as u64]);
                x = clf.attack(&x, &y, &cfg.attack, seed)?;
            }
            let loss = if cfg.mode.freezes_extractor() {
                let z = match &fixed_repr {
                    Some(all) => gather_rows(all, idx),
                    None => representations(&clf.encoder, &x)?,
                };
                head_step(&mut clf, &mut head_opt, &z, &y, lr)?
            } else {
                full_step(&mut clf, &mut head_opt, &mut enc_opt, &x, &y, lr)?
            };
            if !loss.is_finite() {
                return Err(AirError::NonFinite(format!(
                    "finetune loss at epoch {epoch}"
                )));
            }
            sum += loss;
        }
        losses.push(sum / plan.len() as f64);
    }
    Ok(FinetuneReport {
        classifier: clf,
        losses,
    })
}

fn representations(encoder: &Encoder, images: &Tensor) -> Result<Tensor> {
    let mut parts = Vec::new();
    for start in (0..images.rows()).step_by(EVAL_CHUNK) {
        let chunk = images.slice_rows(start, EVAL_CHUNK.min(images.rows() - start))?;
        parts.push(encoder.representation(&chunk, BranchTag::Adversarial)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Tensor::concat_rows(&refs)?)
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let d = t.row_len();
    let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
    Tensor::new(vec![idx.len(), d], data).expect("gather shape")
}

fn apply_head(clf: &mut Classifier, opt: &mut Sgd, gw: &[f64], gb: &[f64], lr: f64) -> Result<()> {
    let mut head: Vec<f64> = clf
        .head_weight
        .data()
        .iter()
        .chain(clf.head_bias.data())
        .copied()
        .collect();
    let grads: Vec<f64> = gw.iter().chain(gb).copied().collect();
    opt.step(&mut head, &grads, lr)?;
    let split = clf.head_weight.len();
    clf.head_weight.data_mut().copy_from_slice(&head[..split]);
    clf.head_bias.data_mut().copy_from_slice(&head[split..]);
    Ok(())
}

fn head_step(clf: &mut Classifier, opt: &mut Sgd, z: &Tensor, y: &[usize], lr: f64) -> Result<f64> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let w = g.variable(clf.head_weight.clone());
    let b = g.variable(clf.head_bias.clone());
    let logits = head_logits(&mut g, zv, w, b)?;
    let loss = cross_entropy(&mut g, logits, y)?;
    let grads = g.backward(loss)?;
    let (gw, gb) = (
        grads.get_or_zeros(w, g.shape(w)),
        grads.get_or_zeros(b, g.shape(b)),
    );
    apply_head(clf, opt, gw.data(), gb.data(), lr)?;
    Ok(g.value(loss).item())
}

fn full_step(
    clf: &mut Classifier,
    head_opt: &mut Sgd,
    enc_opt: &mut Sgd,
    x: &Tensor,
    y: &[usize],
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let b = clf.bind(&mut g, true, true);
    let xv = g.constant(x.clone());
    let mut updates = Vec::new();
    let logits = clf.logits_graph(&mut g, &b, xv, NormUsage::Batch, &mut updates)?;
    let loss = cross_entropy(&mut g, logits, y)?;
    let grads = g.backward(loss)?;
    let enc_grads = clf.encoder.collect_grads(&grads, &b.params);
    let (gw, gb) = (
        grads.get_or_zeros(b.weight, g.shape(b.weight)),
        grads.get_or_zeros(b.bias, g.shape(b.bias)),
    );
    enc_opt.step(clf.encoder.params_mut(), &enc_grads, lr)?;
    clf.encoder.apply_stat_updates(&updates);
    apply_head(clf, head_opt, gw.data(), gb.data(), lr)?;
    Ok(g.value(loss).item())
}

/// Clusters extractor representations into `k` pseudo classes, then runs
/// adversarial full finetuning against those pseudo labels.
pub fn lp_aff(
    encoder: &Encoder,
    dataset: &Dataset,
    k: usize,
    cfg: &FinetuneConfig,
) -> Result<(FinetuneReport, Clustering)> {
    let reps = representations(encoder, dataset.images())?;
    let clustering = kmeans(&reps, &KMeansConfig::new(k, cfg.seed))?;
    let pseudo = dataset
        .clone()
        .with_labels(clustering.assignments.clone(), k)?;
    let cfg = FinetuneConfig {
        mode: FinetuneMode::Aff,
        ..cfg.clone()
    };
    Ok((finetune(encoder, &pseudo, &cfg)?, clustering))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticBlobs;

    fn setup() -> (Encoder, Dataset) {
        let ds = SyntheticBlobs {
            samples: 16,
            size: 8,
            ..Default::default()
        }
        .generate();
        (Encoder::new(EncoderSpec::tiny(3, 8, 8), 1).unwrap(), ds)
    }

    fn quick(mode: FinetuneMode) -> FinetuneConfig {
        FinetuneConfig {
            mode,
            epochs: 2,
            batch_size: 8,
            attack: PgdConfig {
                steps: 2,
                ..PgdConfig::finetune()
            },
            ..Default::default()
        }
    }

    #[test]
    fn linear_protocols_freeze_the_extractor() {
        let (enc, ds) = setup();
        for mode in [FinetuneMode::Slf, FinetuneMode::Alf] {
            let r = finetune(&enc, &ds, &quick(mode)).unwrap();
            assert_eq!(r.classifier.encoder.params(), enc.params());
            assert_eq!(r.classifier.encoder.running_stats(), enc.running_stats());
            assert_eq!(r.losses.len(), 2);
        }
    }

    #[test]
    fn full_finetuning_moves_the_extractor() {
        let (enc, ds) = setup();
        let r = finetune(&enc, &ds, &quick(FinetuneMode::Aff)).unwrap();
        assert_ne!(r.classifier.encoder.params(), enc.params());
    }

    #[test]
    fn classifier_checkpoint_round_trip() {
        let (enc, ds) = setup();
        let r = finetune(&enc, &ds, &quick(FinetuneMode::Slf)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clf.ckpt");
        r.classifier.save(&p, 2, 0).unwrap();
        let back = Classifier::load(&p, Some(enc.spec())).unwrap();
        assert_eq!(back.head(), r.classifier.head());
        assert_eq!(back.protocol, FinetuneMode::Slf);
        assert_eq!(
            back.logits(ds.images()).unwrap(),
            r.classifier.logits(ds.images()).unwrap()
        );
    }

    #[test]
    fn missing_labels_are_rejected() {
        let (enc, ds) = setup();
        let unlabeled = Dataset::new(ds.descriptor.clone(), ds.images().clone(), None).unwrap();
        assert!(finetune(&enc, &unlabeled, &quick(FinetuneMode::Slf)).is_err());
    }

    #[test]
    fn attack_stays_feasible() {
        let (enc, ds) = setup();
        let clf = Classifier::new(enc, 4, 0).unwrap();
        let x = ds.images().clone();
        let cfg = PgdConfig::finetune();
        let adv = clf.attack(&x, ds.labels().unwrap(), &cfg, 3).unwrap();
        assert!(adv.max_abs_diff(&x) <= cfg.eps + 1e-12);
        assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn lp_aff_rejects_single_cluster() {
        let (enc, ds) = setup();
        assert!(lp_aff(&enc, &ds, 1, &quick(FinetuneMode::Aff)).is_err());
    }
}

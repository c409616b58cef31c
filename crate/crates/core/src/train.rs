//! Pre-training loop: per minibatch, draw two augmented views, attack them
//! jointly, then take one SGD step on the regularized adversarial
//! contrastive objective.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use air_tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{pgd_pair, PgdConfig};
use crate::augment::AugmentationPipeline;
use crate::checkpoint::{Checkpoint, CheckpointKind, RngState};
use crate::data::Dataset;
use crate::encoder::{BranchTag, Encoder, EncoderSpec, NormUsage};
use crate::error::{io_err, precondition, AirError, Result};
use crate::objectives::{terms, EmbeddingVars, ObjectiveValues, RegularizerConfig};
use crate::optim::Sgd;
use crate::rng::{derive_seed, rng_for, stream};
use crate::schedule::{cosine_lr, SchedulerState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Full-strength augmentation and a fixed `ω` (`loss.omega`, default 0).
    Acl,
    /// Annealed augmentation strength and `ω` per the epoch schedule.
    Dynacl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_period: usize,
    pub reweight_rate: f64,
    /// Defaults to `max(1, epochs / 20)`.
    pub checkpoint_every: Option<usize>,
    pub seed: u64,
    #[serde(skip)]
    pub loss: RegularizerConfig,
    #[serde(skip)]
    pub attack: PgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Dynacl,
            epochs: 20,
            batch_size: 64,
            lr: 0.004,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_period: 50,
            reweight_rate: 2.0 / 3.0,
            checkpoint_every: None,
            seed: 0,
            loss: RegularizerConfig::default(),
            attack: PgdConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-scale pre-training settings: 1000 epochs, batch 512, lr 5.0.
    pub fn paper() -> Self {
        Self {
            epochs: 1000,
            batch_size: 512,
            lr: 5.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(AirError::Config(m));
        if self.batch_size < 2 {
            return fail(format!(
                "train.batch_size {} must be at least 2",
                self.batch_size
            ));
        }
        if self.epochs == 0 {
            return fail("train.epochs must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("train.lr {} must be non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return fail(
                "train.momentum must be in [0,1) and train.weight_decay non-negative".into(),
            );
        }
        if self.decay_period == 0 {
            return fail("train.decay_period must be positive".into());
        }
        if self.checkpoint_every == Some(0) {
            return fail("train.checkpoint_every must be positive".into());
        }
        self.loss.validate()?;
        self.attack.validate()
    }

    pub fn checkpoint_cadence(&self) -> usize {
        self.checkpoint_every.unwrap_or((self.epochs / 20).max(1))
    }

    /// Augmentation strength and loss weight for epoch `e`.
    pub fn epoch_schedule(&self, epoch: usize) -> Result<(f64, f64)> {
        match self.mode {
            TrainMode::Dynacl => {
                let s =
                    SchedulerState::at(epoch, self.decay_period, self.epochs, self.reweight_rate)?;
                Ok((s.mu, s.omega))
            }
            TrainMode::Acl => Ok((1.0, self.loss.omega)),
        }
    }
}

/// Mean values over the minibatches of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate of the epoch's first update.
    pub lr: f64,
    pub mu: f64,
    pub omega: f64,
    pub acl_loss: f64,
    pub sir: f64,
    pub air: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub encoder: Encoder,
    pub metrics: Vec<EpochMetrics>,
    /// Learning rate of every update, in order.
    pub lr_trace: Vec<f64>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Augmented pair for every selected sample. Seeds are keyed by
/// `(epoch, sample index, view)`.
pub fn view_pairs(
    dataset: &Dataset,
    indices: &[usize],
    strength: f64,
    seed: u64,
    epoch: usize,
) -> Result<(Tensor, Tensor)> {
    let pipeline = AugmentationPipeline::new(strength)?;
    let pairs = indices
        .par_iter()
        .map(|&i| {
            let x = dataset.sample(i);
            let key =
                |view: u64| derive_seed(seed, &[stream::AUGMENT, epoch as u64, i as u64, view]);
            Ok((
                pipeline.apply(&x, key(0))?.pixels,
                pipeline.apply(&x, key(1))?.pixels,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let [c, h, w] = dataset.descriptor.sample_shape();
    let stack = |pick: fn(&(Tensor, Tensor)) -> &Tensor| {
        let data = pairs
            .iter()
            .flat_map(|p| pick(p).data().iter().copied())
            .collect();
        Tensor::new(vec![indices.len(), c, h, w], data)
    };
    Ok((stack(|p| &p.0)?, stack(|p| &p.1)?))
}

struct StepOutcome {
    values: ObjectiveValues,
    grads: Vec<f64>,
    updates: Vec<crate::encoder::StatUpdate>,
}

/// Objective and parameter gradient for one minibatch with training-mode
/// normalization. Adversarial inputs are treated as data.
fn objective_step(
    encoder: &Encoder,
    originals: &Tensor,
    views: (&Tensor, &Tensor),
    adversarial: (&Tensor, &Tensor),
    loss: &RegularizerConfig,
) -> Result<StepOutcome> {
    let beta = originals.rows();
    let mut g = Graph::new();
    let params = encoder.bind(&mut g, true);
    let natural = g.constant(Tensor::concat_rows(&[originals, views.0, views.1])?);
    let adv = g.constant(Tensor::concat_rows(&[adversarial.0, adversarial.1])?);
    let mut updates = Vec::new();
    let nat = encoder.forward_graph(
        &mut g,
        &params,
        natural,
        BranchTag::Standard,
        NormUsage::Batch,
        &mut updates,
    )?;
    let advf = encoder.forward_graph(
        &mut g,
        &params,
        adv,
        BranchTag::Adversarial,
        NormUsage::Batch,
        &mut updates,
    )?;
    let vars = EmbeddingVars {
        originals: g.slice_rows(nat.embedding, 0, beta)?,
        view_i: g.slice_rows(nat.embedding, beta, beta)?,
        view_j: g.slice_rows(nat.embedding, 2 * beta, beta)?,
        adv_i: Some(g.slice_rows(advf.embedding, 0, beta)?),
        adv_j: Some(g.slice_rows(advf.embedding, beta, beta)?),
    };
    let t = terms::objective(&mut g, &vars, loss)?;
    let values = ObjectiveValues::read(&g, &t);
    let grads = g.backward(t.total)?;
    Ok(StepOutcome {
        values,
        grads: encoder.collect_grads(&grads, &params),
        updates,
    })
}

/// Parameter gradient of the objective on a fixed minibatch (no state changes).
pub fn objective_gradient(
    encoder: &Encoder,
    originals: &Tensor,
    views: (&Tensor, &Tensor),
    adversarial: (&Tensor, &Tensor),
    loss: &RegularizerConfig,
) -> Result<(ObjectiveValues, Vec<f64>)> {
    let s = objective_step(encoder, originals, views, adversarial, loss)?;
    Ok((s.values, s.grads))
}

fn encoder_checkpoint(
    encoder: &Encoder,
    opt: &Sgd,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(
        CheckpointKind::Encoder,
        encoder.spec().clone(),
        epoch,
        RngState {
            seed: cfg.seed,
            epoch,
        },
    );
    if epoch < cfg.epochs {
        ck.header.scheduler = Some(SchedulerState::at(
            epoch,
            cfg.decay_period,
            cfg.epochs,
            cfg.reweight_rate,
        )?);
    }
    ck.header.meta = serde_json::json!({ "mode": cfg.mode });
    ck.push_encoder(encoder);
    ck.push("momentum", opt.velocity().to_vec());
    Ok(ck)
}

/// Runs pre-training. With `out`, writes `metrics.jsonl`, periodic
/// checkpoints `epoch_NNNN.ckpt` and `encoder.ckpt` into that directory.
pub fn pretrain(
    dataset: &Dataset,
    spec: &EncoderSpec,
    cfg: &TrainConfig,
    out: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.len() < cfg.batch_size {
        return Err(precondition(format!(
            "dataset has {} samples, fewer than one batch of {}",
            dataset.len(),
            cfg.batch_size
        )));
    }
    if dataset.descriptor.sample_shape() != spec.input_shape() {
        return Err(AirError::Shape {
            expected: spec.input_shape().to_vec(),
            actual: dataset.descriptor.sample_shape().to_vec(),
        });
    }
    let mut encoder = Encoder::new(spec.clone(), derive_seed(cfg.seed, &[stream::INIT]))?;
    let mut opt = Sgd::new(encoder.num_params(), cfg.momentum, cfg.weight_decay);
    let batches = dataset.len() / cfg.batch_size;
    let total_steps = batches * cfg.epochs;
    let mut metrics_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let p = dir.join("metrics.jsonl");
            Some(BufWriter::new(File::create(&p).map_err(io_err(&p))?))
        }
        None => None,
    };
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut lr_trace = Vec::with_capacity(total_steps);
    for epoch in 0..cfg.epochs {
        let (mu, omega) = cfg.epoch_schedule(epoch)?;
        let loss = RegularizerConfig {
            omega,
            ..cfg.loss.clone()
        };
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[stream::SHUFFLE, epoch as u64]));
        let mut sums = ObjectiveValues {
            acl: 0.0,
            sir: 0.0,
            air: 0.0,
            total: 0.0,
        };
        let mut first_lr = None;
        for b in 0..batches {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let originals = dataset.gather(idx);
            let (vi, vj) = view_pairs(dataset, idx, mu, cfg.seed, epoch)?;
            let attack_seed = derive_seed(cfg.seed, &[stream::ATTACK, epoch as u64, b as u64]);
            let adv = pgd_pair(
                &encoder,
                &vi,
                &vj,
                loss.temperature,
                &cfg.attack,
                attack_seed,
            )?;
            let step = match objective_step(
                &encoder,
                &originals,
                (&vi, &vj),
                (&adv.adversarial[0], &adv.adversarial[1]),
                &loss,
            ) {
                Ok(s) if s.values.total.is_finite() && s.grads.iter().all(|g| g.is_finite()) => s,
                Ok(s) => {
                    return Err(diagnose(
                        &encoder,
                        &opt,
                        cfg,
                        epoch,
                        out,
                        format!("objective {:?}", s.values),
                    ))
                }
                Err(AirError::NonFinite(what)) => {
                    return Err(diagnose(&encoder, &opt, cfg, epoch, out, what))
                }
                Err(e) => return Err(e),
            };
            let lr = cosine_lr(epoch * batches + b, total_steps, cfg.lr)?;
            first_lr.get_or_insert(lr);
            lr_trace.push(lr);
            opt.step(encoder.params_mut(), &step.grads, lr)?;
            encoder.apply_stat_updates(&step.updates);
            sums.acl += step.values.acl;
            sums.sir += step.values.sir;
            sums.air += step.values.air;
            sums.total += step.values.total;
        }
        let n = batches as f64;
        let m = EpochMetrics {
            epoch,
            lr: first_lr.unwrap_or(0.0),
            mu,
            omega,
            acl_loss: sums.acl / n,
            sir: sums.sir / n,
            air: sums.air / n,
            total: sums.total / n,
        };
        if let (Some(f), Some(dir)) = (metrics_file.as_mut(), out) {
            let line = serde_json::to_string(&m).expect("metrics serialize");
            writeln!(f, "{line}")
                .and_then(|_| f.flush())
                .map_err(io_err(dir.join("metrics.jsonl")))?;
        }
        on_epoch(&m);
        metrics.push(m);
        if let Some(dir) = out {
            if (epoch + 1) % cfg.checkpoint_cadence() == 0 && epoch + 1 < cfg.epochs {
                encoder_checkpoint(&encoder, &opt, cfg, epoch + 1)?
                    .save(&dir.join(format!("epoch_{:04}.ckpt", epoch + 1)))?;
            }
        }
    }
    let final_checkpoint = match out {
        Some(dir) => {
            let p = dir.join("encoder.ckpt");
            encoder_checkpoint(&encoder, &opt, cfg, cfg.epochs)?.save(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok(TrainReport {
        encoder,
        metrics,
        lr_trace,
        final_checkpoint,
    })
}

fn diagnose(
    encoder: &Encoder,
    opt: &Sgd,
    cfg: &TrainConfig,
    epoch: usize,
    out: Option<&Path>,
    what: String,
) -> AirError {
    if let Some(dir) = out {
        let path = dir.join("diagnostic.ckpt");
        let saved = encoder_checkpoint(encoder, opt, cfg, epoch).and_then(|ck| ck.save(&path));
        if let Err(e) = saved {
            return AirError::NonFinite(format!(
                "{what} at epoch {epoch}; diagnostic checkpoint failed: {e}"
            ));
        }
        return AirError::NonFinite(format!(
            "{what} at epoch {epoch}; state saved to {}",
            path.display()
        ));
    }
    AirError::NonFinite(format!("{what} at epoch {epoch}"))
}

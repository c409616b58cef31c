//! ℓ∞ projected gradient ascent. [`pgd`] perturbs a set of inputs jointly
//! against one shared loss; [`pgd_pair`] applies it to the contrastive loss
//! of a pair of augmented views.

use air_tensor::{Graph, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{BranchTag, Encoder, NormUsage};
use crate::error::{precondition, AirError, Result};
use crate::objectives::terms;
use crate::rng::{rng_for, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgdConfig {
    pub eps: f64,
    pub steps: usize,
    pub alpha: f64,
    pub random_start: bool,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            eps: 8.0 / 255.0,
            steps: 5,
            alpha: 2.0 / 255.0,
            random_start: true,
        }
    }
}

impl PgdConfig {
    /// Attack used while finetuning a classifier.
    pub fn finetune() -> Self {
        Self {
            steps: 10,
            ..Self::default()
        }
    }

    /// Attack used to measure robust accuracy.
    pub fn evaluation() -> Self {
        Self {
            steps: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eps) {
            return Err(AirError::Config(format!(
                "attack.eps {} outside [0, 1]",
                self.eps
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(AirError::Config(format!(
                "attack.alpha {} must be positive",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Clips `candidate` into the ε-ball around `anchor`, then into `[0, 1]`.
pub fn project_linf(candidate: &Tensor, anchor: &Tensor, eps: f64) -> Result<Tensor> {
    if eps < 0.0 || eps.is_nan() {
        return Err(precondition(format!("negative radius {eps}")));
    }
    if candidate.shape() != anchor.shape() {
        return Err(AirError::Shape {
            expected: anchor.shape().to_vec(),
            actual: candidate.shape().to_vec(),
        });
    }
    let data = candidate
        .data()
        .iter()
        .zip(anchor.data())
        .map(|(&c, &a)| c.clamp(a - eps, a + eps).clamp(0.0, 1.0))
        .collect();
    Ok(Tensor::new(anchor.shape().to_vec(), data)?)
}

#[derive(Clone, Debug)]
pub struct PgdOutcome {
    pub adversarial: Vec<Tensor>,
    /// Loss at each iterate where a gradient was taken, starting point first.
    pub losses: Vec<f64>,
}

/// Sign-gradient ascent on `loss_grad`, which returns the loss and its
/// gradient with respect to each input.
pub fn pgd<F>(
    anchors: &[Tensor],
    cfg: &PgdConfig,
    seed: u64,
    mut loss_grad: F,
) -> Result<PgdOutcome>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    cfg.validate()?;
    let mut current: Vec<Tensor> = if cfg.random_start && cfg.eps > 0.0 {
        let mut rng = rng_for(seed, &[stream::ATTACK]);
        anchors
            .iter()
            .map(|a| {
                let data = a
                    .data()
                    .iter()
                    .map(|v| v + rng.random_range(-cfg.eps..=cfg.eps))
                    .collect();
                project_linf(&Tensor::new(a.shape().to_vec(), data)?, a, cfg.eps)
            })
            .collect::<Result<_>>()?
    } else {
        anchors
            .iter()
            .map(|a| project_linf(a, a, cfg.eps))
            .collect::<Result<_>>()?
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (loss, grads) = loss_grad(&current)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(AirError::NonFinite(format!(
                "attack loss/gradient (loss = {loss})"
            )));
        }
        losses.push(loss);
        current = current
            .iter()
            .zip(&grads)
            .zip(anchors)
            .map(|((x, g), a)| {
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &d)| v + cfg.alpha * air_tensor::sign(d))
                    .collect();
                project_linf(&Tensor::new(x.shape().to_vec(), data)?, a, cfg.eps)
            })
            .collect::<Result<_>>()?;
    }
    Ok(PgdOutcome {
        adversarial: current,
        losses,
    })
}

/// Contrastive loss of a view pair through the adversarial branch and its
/// gradient with respect to both inputs. Normalization uses the statistics
/// of the attacked batch; running averages are not touched.
pub fn contrastive_input_gradient(
    encoder: &Encoder,
    x_i: &Tensor,
    x_j: &Tensor,
    t: f64,
) -> Result<(f64, Tensor, Tensor)> {
    let beta = x_i.rows();
    let mut g = Graph::new();
    let params = encoder.bind(&mut g, false);
    let x = g.variable(Tensor::concat_rows(&[x_i, x_j])?);
    let out = encoder.forward_graph(
        &mut g,
        &params,
        x,
        BranchTag::Adversarial,
        NormUsage::Batch,
        &mut Vec::new(),
    )?;
    let a = g.slice_rows(out.embedding, 0, beta)?;
    let b = g.slice_rows(out.embedding, beta, beta)?;
    let loss = terms::contrastive_loss(&mut g, a, b, t)?;
    let grads = g.backward(loss)?;
    let gx = grads.get_or_zeros(x, g.shape(x));
    Ok((
        g.value(loss).item(),
        gx.slice_rows(0, beta)?,
        gx.slice_rows(beta, beta)?,
    ))
}

/// Adversarial counterparts `(x̃_i, x̃_j)` maximizing the pair's contrastive loss.
pub fn pgd_pair(
    encoder: &Encoder,
    x_i: &Tensor,
    x_j: &Tensor,
    t: f64,
    cfg: &PgdConfig,
    seed: u64,
) -> Result<PgdOutcome> {
    if x_i.shape() != x_j.shape() {
        return Err(AirError::Shape {
            expected: x_i.shape().to_vec(),
            actual: x_j.shape().to_vec(),
        });
    }
    pgd(&[x_i.clone(), x_j.clone()], cfg, seed, |cur| {
        let (loss, gi, gj) = contrastive_input_gradient(encoder, &cur[0], &cur[1], t)?;
        Ok((loss, vec![gi, gj]))
    })
}

//! Differentiable loss terms recorded on a [`Graph`]. Every function takes
//! embedding matrices `(β, d)` and returns a graph handle so gradients flow
//! back to whatever produced the embeddings.

use air_tensor::{Graph, Var};

use super::{RegularizerConfig, TableKind, ViewBranch, KL_FLOOR};
use crate::error::{precondition, AirError, Result};

/// Graph handles for the embeddings of one minibatch.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingVars {
    /// `f(x)` of the un-augmented originals.
    pub originals: Var,
    pub view_i: Var,
    pub view_j: Var,
    pub adv_i: Option<Var>,
    pub adv_j: Option<Var>,
}

impl EmbeddingVars {
    fn adversarial(&self) -> Result<(Var, Var)> {
        match (self.adv_i, self.adv_j) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(precondition("adversarial views are required")),
        }
    }

    fn natural(&self, branch: ViewBranch) -> Var {
        match branch {
            ViewBranch::I => self.view_i,
            ViewBranch::J => self.view_j,
        }
    }

    fn adv(&self, branch: ViewBranch) -> Result<Var> {
        let (a, b) = self.adversarial()?;
        Ok(match branch {
            ViewBranch::I => a,
            ViewBranch::J => b,
        })
    }

    /// Rejects non-finite values and zero rows, for which cosine similarity
    /// is undefined.
    pub fn check(&self, g: &Graph) -> Result<()> {
        let beta = g.shape(self.originals).first().copied().unwrap_or(0);
        if beta == 0 {
            return Err(precondition("empty batch"));
        }
        let all = [
            Some(self.originals),
            Some(self.view_i),
            Some(self.view_j),
            self.adv_i,
            self.adv_j,
        ];
        for v in all.into_iter().flatten() {
            let t = g.value(v);
            if t.shape() != g.shape(self.originals) {
                return Err(AirError::Shape {
                    expected: g.shape(self.originals).to_vec(),
                    actual: t.shape().to_vec(),
                });
            }
            if !t.all_finite() {
                return Err(AirError::NonFinite("embeddings".into()));
            }
            if (0..t.rows()).any(|r| t.row(r).iter().all(|&x| x == 0.0)) {
                return Err(precondition(
                    "zero embedding vector has no cosine similarity",
                ));
            }
        }
        Ok(())
    }
}

/// Per-sample contrastive loss `ℓ_CL(a_k, b_k)` for every `k`, shape `(β)`.
/// Each entry sums the two directions; the denominator of each direction
/// runs over all `2β` embeddings except the anchor itself.
pub fn contrastive_terms(g: &mut Graph, a: Var, b: Var, t: f64) -> Result<Var> {
    let beta = g.shape(a)[0];
    let z = g.concat_rows(&[a, b])?;
    let z = g.normalize_rows(z)?;
    let sims = g.matmul_t(z, z, false, true)?;
    let logits = g.scale(sims, 1.0 / t);
    let n = 2 * beta;
    let mask = (0..n * n).map(|i| i / n != i % n).collect();
    let logp = g.log_softmax_rows(logits, Some(mask))?;
    let positives = (0..n).map(|r| (r + beta) % n).collect();
    let picked = g.gather(logp, positives)?;
    let first = g.slice_rows(picked, 0, beta)?;
    let second = g.slice_rows(picked, beta, beta)?;
    let both = g.add(first, second)?;
    Ok(g.scale(both, -1.0))
}

/// `Σ_k ℓ_CL(a_k, b_k)`.
pub fn contrastive_loss(g: &mut Graph, a: Var, b: Var, t: f64) -> Result<Var> {
    let terms = contrastive_terms(g, a, b, t)?;
    Ok(g.sum(terms))
}

/// `(1 + ω)·ℓ_CL(adversarial) + (1 − ω)·ℓ_CL(natural)`.
pub fn acl_loss(g: &mut Graph, e: &EmbeddingVars, t: f64, omega: f64) -> Result<Var> {
    let (ai, aj) = e.adversarial()?;
    let adv = contrastive_loss(g, ai, aj, t)?;
    let nat = contrastive_loss(g, e.view_i, e.view_j, t)?;
    Ok(g.linear_combination(&[(1.0 + omega, adv), (1.0 - omega, nat)])?)
}

fn softmax(g: &mut Graph, logits: Var) -> Result<Var> {
    let n = g.shape(logits)[0];
    let row = g.reshape(logits, &[1, n])?;
    let logp = g.log_softmax_rows(row, None)?;
    let p = g.exp(logp);
    Ok(g.reshape(p, &[n])?)
}

/// Softmax over `k` of `sim(a_k, b_k) / t`.
pub fn diagonal_softmax(g: &mut Graph, a: Var, b: Var, t: f64) -> Result<Var> {
    let na = g.normalize_rows(a)?;
    let nb = g.normalize_rows(b)?;
    let sims = g.row_dot(na, nb)?;
    let logits = g.scale(sims, 1.0 / t);
    softmax(g, logits)
}

/// One of the three batch-level conditional distributions for branch `u`.
pub fn probability(
    g: &mut Graph,
    e: &EmbeddingVars,
    kind: TableKind,
    branch: ViewBranch,
    t: f64,
) -> Result<Var> {
    match kind {
        TableKind::YGivenAdv => {
            let adv = e.adv(branch)?;
            diagonal_softmax(g, e.originals, adv, t)
        }
        TableKind::AdvGivenX => {
            let adv = e.adv(branch)?;
            diagonal_softmax(g, adv, e.natural(branch), t)
        }
        TableKind::YGivenX => diagonal_softmax(g, e.originals, e.natural(branch), t),
    }
}

fn product(g: &mut Graph, e: &EmbeddingVars, branch: ViewBranch, t: f64) -> Result<Var> {
    let y = probability(g, e, TableKind::YGivenAdv, branch, t)?;
    let x = probability(g, e, TableKind::AdvGivenX, branch, t)?;
    Ok(g.mul(y, x)?)
}

/// KL between the unnormalized products `p(y|x̃)·p(x̃|x)` of branch `i` and branch `j`.
pub fn air_loss(g: &mut Graph, e: &EmbeddingVars, t: f64) -> Result<Var> {
    let pi = product(g, e, ViewBranch::I, t)?;
    let pj = product(g, e, ViewBranch::J, t)?;
    Ok(g.kl_div(pi, pj, KL_FLOOR)?)
}

/// `KL(p_i(y|x) ‖ p_j(y|x))`.
pub fn sir_loss(g: &mut Graph, e: &EmbeddingVars, t: f64) -> Result<Var> {
    let pi = probability(g, e, TableKind::YGivenX, ViewBranch::I, t)?;
    let pj = probability(g, e, TableKind::YGivenX, ViewBranch::J, t)?;
    Ok(g.kl_div(pi, pj, KL_FLOOR)?)
}

/// The two factor-wise KL terms without the confidence weights.
pub fn uncalibrated_air(g: &mut Graph, e: &EmbeddingVars, t: f64) -> Result<Var> {
    let mut parts = Vec::with_capacity(2);
    for kind in [TableKind::YGivenAdv, TableKind::AdvGivenX] {
        let pi = probability(g, e, kind, ViewBranch::I, t)?;
        let pj = probability(g, e, kind, ViewBranch::J, t)?;
        parts.push(g.kl_div(pi, pj, KL_FLOOR)?);
    }
    Ok(g.add(parts[0], parts[1])?)
}

/// Handles to the pieces of the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveTerms {
    pub acl: Var,
    pub sir: Var,
    /// The calibrated or uncalibrated adversarial regularizer, per config.
    pub air: Var,
    pub total: Var,
}

pub fn objective(
    g: &mut Graph,
    e: &EmbeddingVars,
    cfg: &RegularizerConfig,
) -> Result<ObjectiveTerms> {
    cfg.validate()?;
    e.check(g)?;
    let t = cfg.temperature;
    let acl = acl_loss(g, e, t, cfg.omega)?;
    let sir = sir_loss(g, e, t)?;
    let air = if cfg.calibrated {
        air_loss(g, e, t)?
    } else {
        uncalibrated_air(g, e, t)?
    };
    let total = g.linear_combination(&[(1.0, acl), (cfg.lambda1, sir), (cfg.lambda2, air)])?;
    Ok(ObjectiveTerms {
        acl,
        sir,
        air,
        total,
    })
}

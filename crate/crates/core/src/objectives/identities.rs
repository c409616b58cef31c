//! Plain floating-point evaluations of the decomposition and equivalence
//! identities. Nothing here touches the graph, so the results serve as an
//! independent cross-check of the differentiable implementation.

use air_tensor::{Graph, Tensor};

use super::{EmbeddingSet, TableKind, ViewBranch};
use crate::error::{precondition, AirError, Result};

/// `uᵀv / (‖u‖‖v‖)`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(AirError::Shape {
            expected: vec![u.len()],
            actual: vec![v.len()],
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(precondition("cosine similarity of a zero vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax over `k` of `sim(a_k, b_k) / t`.
pub(crate) fn diagonal_softmax(a: &Tensor, b: &Tensor, t: f64) -> Result<Vec<f64>> {
    let logits = (0..a.rows())
        .map(|k| Ok(cosine_similarity(a.row(k), b.row(k))? / t))
        .collect::<Result<Vec<f64>>>()?;
    let lse = log_sum_exp(logits.iter().copied());
    Ok(logits.iter().map(|l| (l - lse).exp()).collect())
}

pub(crate) fn table_values(
    e: &EmbeddingSet,
    kind: TableKind,
    branch: ViewBranch,
    t: f64,
) -> Result<Vec<f64>> {
    let natural = e.natural(branch);
    match kind {
        TableKind::YGivenAdv => diagonal_softmax(&e.originals, e.adv(branch)?, t),
        TableKind::AdvGivenX => diagonal_softmax(e.adv(branch)?, natural, t),
        TableKind::YGivenX => diagonal_softmax(&e.originals, natural, t),
    }
}

/// The two weighted sums whose total is the adversarial regularizer:
/// the `p_i(x̃|x)`-weighted contributions of the `y|x̃` log-ratios, and the
/// `p_i(y|x̃)`-weighted contributions of the `x̃|x` log-ratios.
pub fn air_decomposition(e: &EmbeddingSet, t: f64) -> Result<(f64, f64)> {
    e.check()?;
    let iy = table_values(e, TableKind::YGivenAdv, ViewBranch::I, t)?;
    let jy = table_values(e, TableKind::YGivenAdv, ViewBranch::J, t)?;
    let ix = table_values(e, TableKind::AdvGivenX, ViewBranch::I, t)?;
    let jx = table_values(e, TableKind::AdvGivenX, ViewBranch::J, t)?;
    let mut term1 = 0.0;
    let mut term2 = 0.0;
    for k in 0..iy.len() {
        term1 += ix[k] * iy[k] * (iy[k] / jy[k]).ln();
        term2 += iy[k] * ix[k] * (ix[k] / jx[k]).ln();
    }
    Ok((term1, term2))
}

/// Largest per-sample gap between the contrastive loss and
/// `−ln p(1_kj | x_k^i) − ln p(1_ki | x_k^j)`, where each conditional is a
/// softmax over the `2β − 1` other members of the augmented batch.
pub fn conditional_identity_gap(e: &EmbeddingSet, t: f64, adversarial: bool) -> Result<f64> {
    e.check()?;
    let (a, b) = if adversarial {
        (e.adv(ViewBranch::I)?, e.adv(ViewBranch::J)?)
    } else {
        (&e.view_i, &e.view_j)
    };
    let beta = a.rows();
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let losses = super::terms::contrastive_terms(&mut g, va, vb, t)?;
    let losses = g.value(losses).data().to_vec();

    let members: Vec<&[f64]> = (0..beta)
        .map(|k| a.row(k))
        .chain((0..beta).map(|k| b.row(k)))
        .collect();
    let neg_log_p = |anchor: usize, peer: usize| -> Result<f64> {
        let mut logits = Vec::with_capacity(2 * beta - 1);
        let mut positive = 0.0;
        for (m, row) in members.iter().enumerate() {
            if m == anchor {
                continue;
            }
            let l = cosine_similarity(members[anchor], row)? / t;
            if m == peer {
                positive = l;
            }
            logits.push(l);
        }
        Ok(log_sum_exp(logits.iter().copied()) - positive)
    };
    let mut worst: f64 = 0.0;
    for (k, loss) in losses.iter().enumerate() {
        let rhs = neg_log_p(k, beta + k)? + neg_log_p(beta + k, k)?;
        worst = worst.max((loss - rhs).abs());
    }
    Ok(worst)
}

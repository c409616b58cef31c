//! Contrastive losses, the batch-level conditional distributions, the
//! standard and adversarial invariant regularizers, and the combined
//! training objective.
//!
//! [`terms`] records everything on a [`Graph`] for training; the functions in
//! this module evaluate the same quantities on fixed embeddings, and
//! [`identities`] recomputes the decomposition and equivalence identities in
//! plain arithmetic.

pub mod identities;
pub mod terms;

use air_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::{BranchTag, Encoder};
use crate::error::{precondition, AirError, Result};
pub use identities::{air_decomposition, conditional_identity_gap, cosine_similarity};
pub use terms::{EmbeddingVars, ObjectiveTerms};

/// Lower bound applied to the second KL argument before the logarithm.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViewBranch {
    I,
    J,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    /// `p(y|x̃)`: softmax of `sim(f(x_k), f(x̃_k))`.
    YGivenAdv,
    /// `p(x̃|x)`: softmax of `sim(f(x̃_k), f(x_k^u))`.
    AdvGivenX,
    /// `p(y|x)`: softmax of `sim(f(x_k), f(x_k^u))`.
    YGivenX,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityTable {
    pub kind: TableKind,
    pub branch: ViewBranch,
    pub values: Vec<f64>,
}

impl ProbabilityTable {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub eps: f64,
    pub temperature: f64,
    pub omega: f64,
    pub calibrated: bool,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
            eps: 8.0 / 255.0,
            temperature: 0.5,
            omega: 0.0,
            calibrated: true,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(AirError::Config(m.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return fail("lambda1 and lambda2 must be non-negative");
        }
        if !(self.eps >= 0.0) {
            return fail("eps must be non-negative");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail("temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return fail("omega must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Embeddings `(β, d)` of the five blocks of a minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub originals: Tensor,
    pub view_i: Tensor,
    pub view_j: Tensor,
    pub adv_i: Option<Tensor>,
    pub adv_j: Option<Tensor>,
}

impl EmbeddingSet {
    pub fn beta(&self) -> usize {
        self.originals.rows()
    }

    pub(crate) fn natural(&self, branch: ViewBranch) -> &Tensor {
        match branch {
            ViewBranch::I => &self.view_i,
            ViewBranch::J => &self.view_j,
        }
    }

    pub(crate) fn adv(&self, branch: ViewBranch) -> Result<&Tensor> {
        let adv = match branch {
            ViewBranch::I => self.adv_i.as_ref(),
            ViewBranch::J => self.adv_j.as_ref(),
        };
        adv.ok_or_else(|| precondition("adversarial views are required"))
    }

    pub fn check(&self) -> Result<()> {
        let mut g = Graph::new();
        self.bind(&mut g).check(&g)
    }

    /// Every embedding multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let s = |t: &Tensor| t.map(|v| v * c);
        Self {
            originals: s(&self.originals),
            view_i: s(&self.view_i),
            view_j: s(&self.view_j),
            adv_i: self.adv_i.as_ref().map(s),
            adv_j: self.adv_j.as_ref().map(s),
        }
    }

    /// Adds the embeddings to a graph as constants.
    pub fn bind(&self, g: &mut Graph) -> EmbeddingVars {
        EmbeddingVars {
            originals: g.constant(self.originals.clone()),
            view_i: g.constant(self.view_i.clone()),
            view_j: g.constant(self.view_j.clone()),
            adv_i: self.adv_i.clone().map(|t| g.constant(t)),
            adv_j: self.adv_j.clone().map(|t| g.constant(t)),
        }
    }

    fn evaluate(
        &self,
        f: impl FnOnce(&mut Graph, &EmbeddingVars) -> Result<Var>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        vars.check(&g)?;
        let out = f(&mut g, &vars)?;
        let value = g.value(out).clone();
        if !value.all_finite() {
            return Err(AirError::NonFinite("objective".into()));
        }
        Ok(value)
    }
}

/// Images of one minibatch, each `(β, C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub originals: Tensor,
    pub view_i: Tensor,
    pub view_j: Tensor,
    pub adv_i: Option<Tensor>,
    pub adv_j: Option<Tensor>,
}

impl ViewBatch {
    pub fn new(originals: Tensor, view_i: Tensor, view_j: Tensor) -> Result<Self> {
        let batch = Self {
            originals,
            view_i,
            view_j,
            adv_i: None,
            adv_j: None,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn with_adversarial(mut self, adv_i: Tensor, adv_j: Tensor) -> Result<Self> {
        self.adv_i = Some(adv_i);
        self.adv_j = Some(adv_j);
        self.validate()?;
        Ok(self)
    }

    pub fn beta(&self) -> usize {
        self.originals.rows()
    }

    fn validate(&self) -> Result<()> {
        if self.originals.ndim() != 4 || self.beta() == 0 {
            return Err(precondition(
                "a view batch needs at least one (C,H,W) sample",
            ));
        }
        let all = [
            Some(&self.view_i),
            Some(&self.view_j),
            self.adv_i.as_ref(),
            self.adv_j.as_ref(),
        ];
        for t in all.into_iter().flatten() {
            if t.shape() != self.originals.shape() {
                return Err(AirError::Shape {
                    expected: self.originals.shape().to_vec(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Evaluation-mode embeddings: natural inputs through the standard
    /// branch, adversarial inputs through the adversarial branch.
    pub fn embed(&self, encoder: &Encoder) -> Result<EmbeddingSet> {
        let std = |x: &Tensor| encoder.forward(x, BranchTag::Standard);
        let adv = |x: &Tensor| encoder.forward(x, BranchTag::Adversarial);
        Ok(EmbeddingSet {
            originals: std(&self.originals)?,
            view_i: std(&self.view_i)?,
            view_j: std(&self.view_j)?,
            adv_i: self.adv_i.as_ref().map(adv).transpose()?,
            adv_j: self.adv_j.as_ref().map(adv).transpose()?,
        })
    }
}

/// `Σ_k ℓ_CL` over the natural or adversarial view pairs.
pub fn cl_loss(e: &EmbeddingSet, t: f64, use_adv: bool) -> Result<f64> {
    let v = e.evaluate(|g, v| {
        let (a, b) = if use_adv {
            match (v.adv_i, v.adv_j) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(precondition("adversarial views are required")),
            }
        } else {
            (v.view_i, v.view_j)
        };
        terms::contrastive_loss(g, a, b, t)
    })?;
    Ok(v.item())
}

pub fn acl_loss(e: &EmbeddingSet, t: f64, omega: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(precondition(format!("omega {omega} outside [0,1]")));
    }
    Ok(e.evaluate(|g, v| terms::acl_loss(g, v, t, omega))?.item())
}

pub fn probability_table(
    e: &EmbeddingSet,
    kind: TableKind,
    branch: ViewBranch,
    t: f64,
) -> Result<ProbabilityTable> {
    let values = e.evaluate(|g, v| terms::probability(g, v, kind, branch, t))?;
    Ok(ProbabilityTable {
        kind,
        branch,
        values: values.into_data(),
    })
}

/// `Σ_k p_k log(p_k / q_k)` with `q` floored at [`KL_FLOOR`] and `0·log 0 = 0`.
pub fn kl_batch(p: &ProbabilityTable, q: &ProbabilityTable) -> Result<f64> {
    if p.values.len() != q.values.len() {
        return Err(AirError::Shape {
            expected: vec![p.values.len()],
            actual: vec![q.values.len()],
        });
    }
    Ok(p.values
        .iter()
        .zip(&q.values)
        .map(|(&a, &b)| air_tensor::kl_term(a, b, KL_FLOOR))
        .sum())
}

pub fn air_loss(e: &EmbeddingSet, t: f64) -> Result<f64> {
    Ok(e.evaluate(|g, v| terms::air_loss(g, v, t))?.item())
}

pub fn sir_loss(e: &EmbeddingSet, t: f64) -> Result<f64> {
    Ok(e.evaluate(|g, v| terms::sir_loss(g, v, t))?.item())
}

pub fn uncalibrated_air(e: &EmbeddingSet, t: f64) -> Result<f64> {
    Ok(e.evaluate(|g, v| terms::uncalibrated_air(g, v, t))?.item())
}

/// Values of the combined objective and its parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValues {
    pub acl: f64,
    pub sir: f64,
    pub air: f64,
    pub total: f64,
}

impl ObjectiveValues {
    pub fn read(g: &Graph, terms: &ObjectiveTerms) -> Self {
        Self {
            acl: g.value(terms.acl).item(),
            sir: g.value(terms.sir).item(),
            air: g.value(terms.air).item(),
            total: g.value(terms.total).item(),
        }
    }
}

pub fn total_objective(e: &EmbeddingSet, cfg: &RegularizerConfig) -> Result<ObjectiveValues> {
    let mut g = Graph::new();
    let vars = e.bind(&mut g);
    let terms = terms::objective(&mut g, &vars, cfg)?;
    let values = ObjectiveValues::read(&g, &terms);
    if !values.total.is_finite() {
        return Err(AirError::NonFinite("objective".into()));
    }
    Ok(values)
}

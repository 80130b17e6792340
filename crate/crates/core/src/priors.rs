//! Attention priors derived from a query alignment, and the KL losses used
//! to pre-train model attention toward them.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Graph, Mat, Var};
use crate::error::{GapError, Result};
use crate::grounder::QueryAlignment;

/// Priors keyed by instance id.
pub type PriorTable = indexmap::IndexMap<String, AttentionPrior>;

/// Floor applied to distributions that appear in a KL denominator.
pub const KL_FLOOR: f64 = 1e-8;

/// `α*` over words, `β*` over regions and the jointly normalized `B*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPrior {
    pub alpha_star: Vec<f64>,
    pub beta_star: Vec<f64>,
    /// `T × N`, row-major.
    pub joint_star: Vec<Vec<f64>>,
}

impl AttentionPrior {
    pub fn from_alignment(a: &QueryAlignment) -> Result<Self> {
        let (alpha_star, beta_star) = marginalize_prior(a)?;
        let joint = joint_prior(a)?;
        Ok(AttentionPrior {
            alpha_star,
            beta_star,
            joint_star: joint.rows().into_iter().map(|r| r.to_vec()).collect(),
        })
    }

    /// Uniform prior over `t` words and `n` regions.
    pub fn uniform(t: usize, n: usize) -> Self {
        AttentionPrior {
            alpha_star: vec![1.0 / t as f64; t],
            beta_star: vec![1.0 / n as f64; n],
            joint_star: vec![vec![1.0 / (t * n) as f64; n]; t],
        }
    }

    pub fn joint_matrix(&self) -> Mat {
        let t = self.joint_star.len();
        let n = self.joint_star.first().map_or(0, Vec::len);
        Array2::from_shape_fn((t, n), |(i, j)| self.joint_star[i][j])
    }

    pub fn words(&self) -> usize {
        self.alpha_star.len()
    }

    pub fn regions(&self) -> usize {
        self.beta_star.len()
    }
}

fn check_finite(a: &QueryAlignment) -> Result<()> {
    if a.words() == 0 || a.regions() == 0 {
        return Err(GapError::Empty("alignment has no words or no regions".into()));
    }
    if a.logits.iter().any(|x| !x.is_finite()) {
        return Err(GapError::NonFinite("alignment logits".into()));
    }
    Ok(())
}

/// `β* = mean_i softmax_j(A*[i,·])`, `α* = mean_j softmax_i(A*[·,j])`.
pub fn marginalize_prior(a: &QueryAlignment) -> Result<(Vec<f64>, Vec<f64>)> {
    check_finite(a)?;
    let (t, n) = a.logits.dim();
    let mut beta = vec![0.0; n];
    for row in a.logits.rows() {
        let mut p = row.to_vec();
        softmax_in_place(&mut p);
        for (b, v) in beta.iter_mut().zip(p) {
            *b += v / t as f64;
        }
    }
    let mut alpha = vec![0.0; t];
    for col in a.logits.columns() {
        let mut p = col.to_vec();
        softmax_in_place(&mut p);
        for (x, v) in alpha.iter_mut().zip(p) {
            *x += v / n as f64;
        }
    }
    Ok((alpha, beta))
}

/// Softmax over all `T·N` cells.
pub fn joint_prior(a: &QueryAlignment) -> Result<Mat> {
    check_finite(a)?;
    let mut out = a.logits.as_standard_layout().into_owned();
    softmax_in_place(out.as_slice_mut().expect("standard layout"));
    Ok(out)
}

/// Floor at [`KL_FLOOR`] and renormalize.
pub fn floor_renormalize(q: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = q.iter().map(|&x| x.max(KL_FLOOR)).collect();
    let total: f64 = floored.iter().sum();
    floored.into_iter().map(|x| x / total).collect()
}

/// `KL(p ‖ q)` in nats with `0 · ln 0 = 0`; `q` is floored first.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(GapError::Shape(format!("KL over lengths {} and {}", p.len(), q.len())));
    }
    let q = floor_renormalize(q);
    Ok(p
        .iter()
        .zip(&q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum())
}

fn sum_normalize(xs: &[f64]) -> Vec<f64> {
    let total: f64 = xs.iter().sum();
    xs.iter().map(|x| x / total).collect()
}

/// `KL(softmax(vec A*) ‖ vec A / Σ A)` for nonnegative model attention `A`.
pub fn pretrain_loss_joint(attention: &Mat, a: &QueryAlignment) -> Result<f64> {
    if attention.dim() != a.logits.dim() {
        return Err(GapError::Shape(format!(
            "attention {:?} vs alignment {:?}",
            attention.dim(),
            a.logits.dim()
        )));
    }
    if attention.iter().any(|&x| x < 0.0) {
        return Err(GapError::InvalidArgument("attention weights must be nonnegative".into()));
    }
    let prior = joint_prior(a)?;
    let target: Vec<f64> = prior.iter().copied().collect();
    let model = sum_normalize(&attention.iter().copied().collect::<Vec<_>>());
    kl_divergence(&target, &model)
}

/// `KL(β* ‖ β)`.
pub fn pretrain_loss_marginal(beta: &[f64], a: &QueryAlignment) -> Result<f64> {
    if beta.len() != a.regions() {
        return Err(GapError::Shape(format!(
            "beta has {} entries for {} regions",
            beta.len(),
            a.regions()
        )));
    }
    let (_, beta_star) = marginalize_prior(a)?;
    kl_divergence(&beta_star, beta)
}

/// Differentiable `KL(target ‖ q)` where `q` is a simplex-valued node of the
/// same shape as `target`; `q` is floored and renormalized on the graph.
pub fn kl_to_node(g: &mut Graph, target: &Mat, q: Var) -> Var {
    let floored = g.floor(q, KL_FLOOR);
    let renorm = g.normalize_all(floored);
    g.kl_from_const(target, renorm)
}

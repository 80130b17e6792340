//! Gated refinement of model attention with grounding priors.
//!
//! The additive form is the weighted Euclidean aggregate of the two
//! distributions and the multiplicative form is the weighted KL aggregate.
//! [`aggregate_numeric_oracle`] solves both aggregation problems
//! numerically so the closed forms can be checked against it.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, ParamStore, Var};
use crate::error::{GapError, Result};
use crate::exec;

/// Floor applied before fractional powers.
pub const POWER_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    #[default]
    Additive,
    Multiplicative,
}

impl std::str::FromStr for RefineMode {
    type Err = GapError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(RefineMode::Additive),
            "multiplicative" => Ok(RefineMode::Multiplicative),
            other => Err(GapError::InvalidArgument(format!("unknown refinement mode `{other}`"))),
        }
    }
}

/// Gate value in `(0, 1)`; clamped test gates may sit on either end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateOutput(pub f64);

impl GateOutput {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Parameters of one gate, stored under `prefix` in a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub prefix: String,
    pub store: ParamStore,
}

pub fn init_gate<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) {
    store.init_scaled(&format!("{prefix}.w_v"), d, d, rng);
    store.init_zeros(&format!("{prefix}.b_v"), 1, d);
    store.init_scaled(&format!("{prefix}.w_q"), d, d, rng);
    store.init_zeros(&format!("{prefix}.b_q"), 1, d);
    store.init_scaled(&format!("{prefix}.w_h"), d, d, rng);
    store.init_scaled(&format!("{prefix}.w_lambda"), d, 1, rng);
}

impl GateParams {
    pub fn init(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_gate(&mut store, "gate", d, &mut rng);
        GateParams {
            prefix: "gate".into(),
            store,
        }
    }

    fn dim(&self) -> usize {
        self.store.get(&format!("{}.w_v", self.prefix)).map_or(0, |w| w.nrows())
    }
}

/// `ELU((v̄ W_v + b_v) ⊙ (q W_q + b_q))`, the shared gate body.
fn gate_body(g: &mut Graph, prefix: &str, v_bar: Var, q: Var) -> Var {
    let w_v = g.param(&format!("{prefix}.w_v"));
    let b_v = g.param(&format!("{prefix}.b_v"));
    let w_q = g.param(&format!("{prefix}.w_q"));
    let b_q = g.param(&format!("{prefix}.b_q"));
    let ev = g.matmul(v_bar, w_v);
    let ev = g.add(ev, b_v);
    let eq = g.matmul(q, w_q);
    let eq = g.add(eq, b_q);
    let prod = g.mul(ev, eq);
    g.elu(prod)
}

/// `λ = σ(w_λᵀ ELU((W_vᵀ v̄ + b_v) ⊙ (W_qᵀ q + b_q)))` as a `1×1` node.
pub fn gate_graph(g: &mut Graph, prefix: &str, v_bar: Var, q: Var) -> Var {
    let body = gate_body(g, prefix, v_bar, q);
    let w = g.param(&format!("{prefix}.w_lambda"));
    let z = g.matmul(body, w);
    g.sigmoid(z)
}

/// `λ_k = σ(w_λᵀ ELU(c_k ⊙ h(v̄, q)))` with `h = W_hᵀ ELU(...)`.
pub fn gate_step_graph(g: &mut Graph, prefix: &str, c_k: Var, v_bar: Var, q: Var) -> Var {
    let body = gate_body(g, prefix, v_bar, q);
    let w_h = g.param(&format!("{prefix}.w_h"));
    let h = g.matmul(body, w_h);
    let mixed = g.mul(c_k, h);
    let act = g.elu(mixed);
    let w = g.param(&format!("{prefix}.w_lambda"));
    let z = g.matmul(act, w);
    g.sigmoid(z)
}

fn check_dims(params: &GateParams, vecs: &[&[f64]]) -> Result<usize> {
    let d = params.dim();
    if let Some(v) = vecs.iter().find(|v| v.len() != d) {
        return Err(GapError::Shape(format!("gate input of length {} for d = {d}", v.len())));
    }
    Ok(d)
}

pub fn gate(v_bar: &[f64], q: &[f64], params: &GateParams) -> Result<GateOutput> {
    check_dims(params, &[v_bar, q])?;
    let mut g = Graph::with_params(&params.store);
    let v = g.row_vector(v_bar);
    let qv = g.row_vector(q);
    let out = gate_graph(&mut g, &params.prefix, v, qv);
    Ok(GateOutput(g.item(out)))
}

pub fn gate_step(c_k: &[f64], v_bar: &[f64], q: &[f64], params: &GateParams) -> Result<GateOutput> {
    check_dims(params, &[c_k, v_bar, q])?;
    let mut g = Graph::with_params(&params.store);
    let c = g.row_vector(c_k);
    let v = g.row_vector(v_bar);
    let qv = g.row_vector(q);
    let out = gate_step_graph(&mut g, &params.prefix, c, v, qv);
    Ok(GateOutput(g.item(out)))
}

fn check_gate(g: GateOutput) -> Result<f64> {
    if !(0.0..=1.0).contains(&g.0) {
        return Err(GapError::InvalidArgument(format!("gate {} outside [0, 1]", g.0)));
    }
    Ok(g.0)
}

/// `g·att + (1−g)·prior`.
pub fn refine_additive(att: &[f64], prior: &[f64], g: GateOutput) -> Result<Vec<f64>> {
    if att.len() != prior.len() {
        return Err(GapError::Shape(format!("attention {} vs prior {}", att.len(), prior.len())));
    }
    let g = check_gate(g)?;
    Ok(att.iter().zip(prior).map(|(a, p)| g * a + (1.0 - g) * p).collect())
}

/// `norm(att^g ⊙ prior^(1−g))` with both inputs floored at [`POWER_FLOOR`].
pub fn refine_multiplicative(att: &[f64], prior: &[f64], g: GateOutput) -> Result<Vec<f64>> {
    if att.len() != prior.len() {
        return Err(GapError::Shape(format!("attention {} vs prior {}", att.len(), prior.len())));
    }
    let g = check_gate(g)?;
    let raw: Vec<f64> = att
        .iter()
        .zip(prior)
        .map(|(&a, &p)| (g * a.max(POWER_FLOOR).ln() + (1.0 - g) * p.max(POWER_FLOOR).ln()).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|x| x / total).collect())
}

/// Refinement of a joint `T×N` attention map against `B*`; the
/// multiplicative form normalizes over all cells.
pub fn refine_joint(a: &Mat, b_star: &Mat, g: GateOutput, mode: RefineMode) -> Result<Mat> {
    if a.dim() != b_star.dim() {
        return Err(GapError::Shape(format!("attention {:?} vs prior {:?}", a.dim(), b_star.dim())));
    }
    let flat_a: Vec<f64> = a.iter().copied().collect();
    let flat_b: Vec<f64> = b_star.iter().copied().collect();
    let out = match mode {
        RefineMode::Additive => refine_additive(&flat_a, &flat_b, g)?,
        RefineMode::Multiplicative => refine_multiplicative(&flat_a, &flat_b, g)?,
    };
    Ok(Array2::from_shape_vec(a.dim(), out).expect("same shape"))
}

/// Differentiable refinement of `att` toward the constant-or-not `prior`
/// node with gate node `g` (`1×1`). Works for vectors and joint matrices.
pub fn refine_graph(graph: &mut Graph, att: Var, prior: Var, gate: Var, mode: RefineMode) -> Var {
    let rest = graph.one_minus(gate);
    match mode {
        RefineMode::Additive => {
            let a = graph.mul_scalar(att, gate);
            let p = graph.mul_scalar(prior, rest);
            graph.add(a, p)
        }
        RefineMode::Multiplicative => {
            let fa = graph.floor(att, POWER_FLOOR);
            let la = graph.ln(fa);
            let fp = graph.floor(prior, POWER_FLOOR);
            let lp = graph.ln(fp);
            let a = graph.mul_scalar(la, gate);
            let p = graph.mul_scalar(lp, rest);
            let s = graph.add(a, p);
            let e = graph.exp(s);
            graph.normalize_all(e)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Euclidean,
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub max_iter: usize,
    pub step: f64,
    pub tol: f64,
    /// Grid resolution of the fallback search for 2–3 bins.
    pub grid: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            max_iter: 10_000,
            step: 0.1,
            tol: 1e-6,
            grid: 1e-3,
        }
    }
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// `Σ_i w_i · D(p, members_i)`.
pub fn aggregation_objective(p: &[f64], members: &[Vec<f64>], weights: &[f64], distance: Distance) -> f64 {
    members
        .iter()
        .zip(weights)
        .map(|(m, &w)| {
            let d: f64 = match distance {
                Distance::Euclidean => 0.5 * p.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
                Distance::Kl => p
                    .iter()
                    .zip(m)
                    .filter(|(&a, _)| a > 0.0)
                    .map(|(&a, &b)| a * (a.ln() - b.max(POWER_FLOOR).ln()))
                    .sum(),
            };
            w * d
        })
        .sum()
}

fn objective_grad(p: &[f64], members: &[Vec<f64>], weights: &[f64], distance: Distance) -> Vec<f64> {
    (0..p.len())
        .map(|x| {
            members
                .iter()
                .zip(weights)
                .map(|(m, &w)| match distance {
                    Distance::Euclidean => w * (p[x] - m[x]),
                    Distance::Kl => w * (p[x].max(1e-300).ln() + 1.0 - m[x].max(POWER_FLOOR).ln()),
                })
                .sum()
        })
        .collect()
}

fn grid_search(members: &[Vec<f64>], weights: &[f64], distance: Distance, h: f64) -> Vec<f64> {
    let k = members[0].len();
    let steps = (1.0 / h).round() as usize;
    let mut best = (f64::INFINITY, vec![1.0 / k as f64; k]);
    let mut consider = |p: Vec<f64>| {
        let f = aggregation_objective(&p, members, weights, distance);
        if f < best.0 {
            best = (f, p);
        }
    };
    match k {
        1 => consider(vec![1.0]),
        2 => (0..=steps).for_each(|i| {
            let a = i as f64 / steps as f64;
            consider(vec![a, 1.0 - a]);
        }),
        _ => (0..=steps).for_each(|i| {
            (0..=steps - i).for_each(|j| {
                let a = i as f64 / steps as f64;
                let b = j as f64 / steps as f64;
                consider(vec![a, b, (1.0 - a - b).max(0.0)]);
            })
        }),
    }
    best.1
}

/// Numerically minimize `Σ_i w_i·D(P, P_i)` over the simplex: projected
/// gradient descent for Euclidean, exponentiated gradient for KL. Falls
/// back to a dense grid for 2–3 bins when the iteration budget runs out.
pub fn aggregate_numeric_oracle(
    members: &[Vec<f64>],
    weights: &[f64],
    distance: Distance,
    config: &OracleConfig,
) -> Result<Vec<f64>> {
    if members.is_empty() {
        return Err(GapError::Empty("no member distributions".into()));
    }
    if weights.len() != members.len() {
        return Err(GapError::Shape(format!(
            "{} weights for {} members",
            weights.len(),
            members.len()
        )));
    }
    let k = members[0].len();
    if k == 0 || members.iter().any(|m| m.len() != k) {
        return Err(GapError::Shape("members must share a nonzero length".into()));
    }
    if weights.iter().any(|&w| w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(GapError::InvalidArgument("weights must be nonnegative and sum to 1".into()));
    }

    let mut p = vec![1.0 / k as f64; k];
    let mut residual = f64::INFINITY;
    for _ in 0..config.max_iter {
        let grad = objective_grad(&p, members, weights, distance);
        let next = match distance {
            Distance::Euclidean => {
                let moved: Vec<f64> = p.iter().zip(&grad).map(|(a, g)| a - config.step * g).collect();
                project_simplex(&moved)
            }
            Distance::Kl => {
                let raw: Vec<f64> = p
                    .iter()
                    .zip(&grad)
                    .map(|(a, g)| a * (-config.step * g).exp())
                    .collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / total).collect()
            }
        };
        residual = p.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        p = next;
        if residual < config.tol {
            return Ok(p);
        }
    }
    if k <= 3 {
        return Ok(grid_search(members, weights, distance, config.grid));
    }
    Err(GapError::NoConvergence {
        iterations: config.max_iter,
        residual,
    })
}

/// Outcome of the closed-form vs numeric-minimizer comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub cases: usize,
    pub max_linf_additive: f64,
    pub max_linf_multiplicative: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    pub fn max_linf(&self) -> f64 {
        self.max_linf_additive.max(self.max_linf_multiplicative)
    }
}

/// Random positive simplex vector (flat Dirichlet).
pub fn random_simplex<R: Rng>(len: usize, rng: &mut R) -> Vec<f64> {
    let gamma: Gamma<f64> = Gamma::new(1.0, 1.0).expect("valid gamma");
    let raw: Vec<f64> = (0..len).map(|_| gamma.sample(rng).max(1e-6)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

/// Compare both refinements with the numeric minimizers on `cases` random
/// instances (lengths 2–8, gates uniform in (0, 1)).
pub fn verify_oracle_equivalence(cases: usize, seed: u64, tolerance: f64) -> Result<OracleReport> {
    let config = OracleConfig::default();
    let results = exec::map_range(cases, |case| -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(case as u64));
        let len = rng.gen_range(2..=8);
        let att = random_simplex(len, &mut rng);
        let prior = random_simplex(len, &mut rng);
        let g: f64 = rng.gen_range(0.001..0.999);
        let members = vec![att.clone(), prior.clone()];
        let weights = [g, 1.0 - g];
        let add = refine_additive(&att, &prior, GateOutput(g))?;
        let mul = refine_multiplicative(&att, &prior, GateOutput(g))?;
        let add_o = aggregate_numeric_oracle(&members, &weights, Distance::Euclidean, &config)?;
        let mul_o = aggregate_numeric_oracle(&members, &weights, Distance::Kl, &config)?;
        let linf = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        Ok((linf(&add, &add_o), linf(&mul, &mul_o)))
    });
    let mut max_add: f64 = 0.0;
    let mut max_mul: f64 = 0.0;
    for r in results {
        let (a, m) = r?;
        max_add = max_add.max(a);
        max_mul = max_mul.max(m);
    }
    Ok(OracleReport {
        cases,
        max_linf_additive: max_add,
        max_linf_multiplicative: max_mul,
        tolerance,
        pass: max_add <= tolerance && max_mul <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn zero_gate_weights_give_one_half() {
        let mut p = GateParams::init(4, 1);
        p.store.insert("gate.w_lambda", Array2::zeros((4, 1)));
        let v = [0.3, -1.0, 2.0, 0.1];
        let q = [1.0, 0.5, -0.5, 0.0];
        assert_eq!(gate(&v, &q, &p).unwrap().value(), 0.5);
        assert_eq!(gate_step(&q, &v, &q, &p).unwrap().value(), 0.5);
    }

    #[test]
    fn gate_step_with_zero_control_is_one_half() {
        let p = GateParams::init(4, 2);
        let v = [0.3, -1.0, 2.0, 0.1];
        let q = [1.0, 0.5, -0.5, 0.0];
        assert_eq!(gate_step(&[0.0; 4], &v, &q, &p).unwrap().value(), 0.5);
        let a = gate_step(&[1.0, 0.0, -1.0, 2.0], &v, &q, &p).unwrap();
        let b = gate_step(&[-2.0, 1.0, 0.5, 0.0], &v, &q, &p).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn gate_rejects_wrong_dimension() {
        let p = GateParams::init(4, 2);
        assert!(matches!(gate(&[1.0; 3], &[1.0; 4], &p), Err(GapError::Shape(_))));
    }

    #[test]
    fn gate_gradients_match_finite_differences() {
        let p = GateParams::init(4, 3);
        let v = [0.3, -1.0, 2.0, 0.1];
        let q = [1.0, 0.5, -0.5, 0.2];
        let c = [0.4, -0.3, 1.2, -0.8];
        let r = check_gradients(&p.store, 1e-5, |g| {
            let vv = g.row_vector(&v);
            let qq = g.row_vector(&q);
            gate_graph(g, "gate", vv, qq)
        });
        assert!(r.passes(1e-4), "{r:?}");
        let r = check_gradients(&p.store, 1e-5, |g| {
            let cc = g.row_vector(&c);
            let vv = g.row_vector(&v);
            let qq = g.row_vector(&q);
            gate_step_graph(g, "gate", cc, vv, qq)
        });
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn additive_examples() {
        assert_eq!(refine_additive(&[0.3, 0.7], &[0.9, 0.1], GateOutput(1.0)).unwrap(), [0.3, 0.7]);
        assert_eq!(refine_additive(&[1.0, 0.0], &[0.0, 1.0], GateOutput(0.5)).unwrap(), [0.5, 0.5]);
        let r = refine_additive(&[0.8, 0.2], &[0.4, 0.6], GateOutput(0.25)).unwrap();
        assert_abs_diff_eq!(r[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r[1], 0.5, epsilon = 1e-12);
        assert!(refine_additive(&[1.0], &[0.5, 0.5], GateOutput(0.5)).is_err());
    }

    #[test]
    fn multiplicative_examples() {
        let same = refine_multiplicative(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5], GateOutput(0.37)).unwrap();
        for (a, b) in same.iter().zip([0.2, 0.3, 0.5]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        let r = refine_multiplicative(&[0.5, 0.5], &[0.8, 0.2], GateOutput(0.5)).unwrap();
        assert_abs_diff_eq!(r[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r[1], 1.0 / 3.0, epsilon = 1e-12);
        let o = aggregate_numeric_oracle(
            &[vec![0.5, 0.5], vec![0.8, 0.2]],
            &[0.5, 0.5],
            Distance::Kl,
            &OracleConfig::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(o[0], 2.0 / 3.0, epsilon = 1e-4);
    }

    #[test]
    fn joint_refinement() {
        let a = array![[0.1, 0.2], [0.3, 0.4]];
        let b = array![[0.25, 0.25], [0.4, 0.1]];
        assert_eq!(refine_joint(&a, &b, GateOutput(1.0), RefineMode::Additive).unwrap(), a);
        assert_eq!(refine_joint(&a, &b, GateOutput(0.0), RefineMode::Additive).unwrap(), b);
        let m = refine_joint(&a, &b, GateOutput(0.3), RefineMode::Multiplicative).unwrap();
        assert_abs_diff_eq!(m.sum(), 1.0, epsilon = 1e-12);
        let row = refine_joint(&array![[0.6, 0.4]], &array![[0.1, 0.9]], GateOutput(0.7), RefineMode::Multiplicative).unwrap();
        let flat = refine_multiplicative(&[0.6, 0.4], &[0.1, 0.9], GateOutput(0.7)).unwrap();
        assert_eq!(row.row(0).to_vec(), flat);
        assert!(refine_joint(&a, &array![[1.0]], GateOutput(0.5), RefineMode::Additive).is_err());
    }

    #[test]
    fn oracle_examples() {
        let cfg = OracleConfig::default();
        let e = aggregate_numeric_oracle(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.5, 0.5], Distance::Euclidean, &cfg).unwrap();
        assert_abs_diff_eq!(e[0], 0.5, epsilon = 1e-4);
        let single = aggregate_numeric_oracle(&[vec![0.1, 0.7, 0.2]], &[1.0], Distance::Kl, &cfg).unwrap();
        for (a, b) in single.iter().zip([0.1, 0.7, 0.2]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-4);
        }
        assert!(aggregate_numeric_oracle(&[], &[], Distance::Kl, &cfg).is_err());
        assert!(aggregate_numeric_oracle(&[vec![0.5, 0.5]], &[0.7], Distance::Kl, &cfg).is_err());
    }

    #[test]
    fn oracle_generalizes_to_many_members() {
        let members = vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.2, 0.2], vec![0.1, 0.1, 0.8]];
        let w = [0.2, 0.5, 0.3];
        let e = aggregate_numeric_oracle(&members, &w, Distance::Euclidean, &OracleConfig::default()).unwrap();
        for x in 0..3 {
            let expect: f64 = members.iter().zip(&w).map(|(m, w)| w * m[x]).sum();
            assert_abs_diff_eq!(e[x], expect, epsilon = 1e-4);
        }
        let k = aggregate_numeric_oracle(&members, &w, Distance::Kl, &OracleConfig::default()).unwrap();
        let geo: Vec<f64> = (0..3).map(|x| members.iter().zip(&w).map(|(m, w)| w * m[x].ln()).sum::<f64>().exp()).collect();
        let total: f64 = geo.iter().sum();
        for x in 0..3 {
            assert_abs_diff_eq!(k[x], geo[x] / total, epsilon = 1e-4);
        }
    }

    #[test]
    fn grid_fallback_for_small_supports() {
        let cfg = OracleConfig {
            max_iter: 1,
            ..Default::default()
        };
        let r = aggregate_numeric_oracle(&[vec![0.5, 0.5], vec![0.8, 0.2]], &[0.5, 0.5], Distance::Kl, &cfg).unwrap();
        assert_abs_diff_eq!(r[0], 2.0 / 3.0, epsilon = 1e-3);
        let err = aggregate_numeric_oracle(&[vec![0.25; 4], vec![0.1, 0.2, 0.3, 0.4]], &[0.5, 0.5], Distance::Kl, &cfg);
        assert!(matches!(err, Err(GapError::NoConvergence { .. })));
    }

    #[test]
    fn projection_lands_on_simplex() {
        let p = project_simplex(&[0.9, 0.8, -0.3]);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(p.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn refinement_gradients_match_finite_differences() {
        for mode in [RefineMode::Additive, RefineMode::Multiplicative] {
            let mut store = ParamStore::new();
            store.insert("att", array![[0.2, 0.5, 0.3]]);
            store.insert("prior", array![[0.6, 0.1, 0.3]]);
            store.insert("gate", array![[0.35]]);
            let weights = array![[0.7, -1.3, 0.4]];
            let r = check_gradients(&store, 1e-5, |g| {
                let a = g.param("att");
                let p = g.param("prior");
                let k = g.param("gate");
                let out = refine_graph(g, a, p, k, mode);
                let w = g.constant(weights.clone());
                let y = g.mul(out, w);
                g.sum_all(y)
            });
            assert!(r.passes(1e-4), "{mode:?}: {r:?}");
        }
    }

    #[test]
    fn graph_and_direct_refinements_agree() {
        let att = [0.2, 0.5, 0.3];
        let prior = [0.6, 0.1, 0.3];
        for mode in [RefineMode::Additive, RefineMode::Multiplicative] {
            let mut g = Graph::new();
            let a = g.row_vector(&att);
            let p = g.row_vector(&prior);
            let k = g.scalar(0.35);
            let out = refine_graph(&mut g, a, p, k, mode);
            let direct = match mode {
                RefineMode::Additive => refine_additive(&att, &prior, GateOutput(0.35)).unwrap(),
                RefineMode::Multiplicative => refine_multiplicative(&att, &prior, GateOutput(0.35)).unwrap(),
            };
            for (x, y) in g.row_values(out).iter().zip(&direct) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-14);
            }
        }
    }

    proptest! {
        #[test]
        fn refinements_match_oracle_and_stay_on_simplex(seed in any::<u64>(), len in 2usize..9, g in 0.01f64..0.99) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let att = random_simplex(len, &mut rng);
            let prior = random_simplex(len, &mut rng);
            let cfg = OracleConfig::default();
            let add = refine_additive(&att, &prior, GateOutput(g)).unwrap();
            let mul = refine_multiplicative(&att, &prior, GateOutput(g)).unwrap();
            let members = vec![att.clone(), prior.clone()];
            let add_o = aggregate_numeric_oracle(&members, &[g, 1.0 - g], Distance::Euclidean, &cfg).unwrap();
            let mul_o = aggregate_numeric_oracle(&members, &[g, 1.0 - g], Distance::Kl, &cfg).unwrap();
            for i in 0..len {
                prop_assert!((add[i] - add_o[i]).abs() <= 1e-4);
                prop_assert!((mul[i] - mul_o[i]).abs() <= 1e-4);
            }
            for v in [&add, &mul] {
                prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(v.iter().all(|&x| x >= 0.0));
            }
            let uniform = vec![1.0 / len as f64; len];
            let kept = refine_multiplicative(&att, &uniform, GateOutput(g)).unwrap();
            let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            prop_assert_eq!(argmax(&kept), argmax(&att));
        }
    }
}

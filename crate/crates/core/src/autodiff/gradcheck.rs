//! Central finite-difference checks against the tape's analytic gradients.
//!
//! The relative error of a parameter tensor is
//! `‖g_analytic − g_numeric‖₂ / max(‖g_analytic‖₂, ‖g_numeric‖₂)`, taken as
//! 0 when both norms are below `1e-12` (parameter not on the loss path).

use super::{Graph, Mat, ParamStore, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub per_param: Vec<(String, f64)>,
    /// Analytic gradient norm per parameter, same order as `per_param`.
    pub norms: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn check_gradients<F>(store: &ParamStore, step: f64, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph) -> Var,
{
    let analytic = {
        let mut g = Graph::with_params(store);
        let out = build(&mut g);
        let grads = g.backward(out);
        g.param_grads(&grads)
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::with_params(s);
        let out = build(&mut g);
        g.item(out)
    };

    let mut per_param = Vec::new();
    let mut norms = Vec::new();
    let mut probe = store.clone();
    for (idx, name) in store.names().enumerate() {
        let shape = store.get_index(idx).dim();
        let mut numeric = Mat::zeros(shape);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = store.get_index(idx)[[r, c]];
                probe.get_mut(name).unwrap()[[r, c]] = orig + step;
                let plus = eval(&probe);
                probe.get_mut(name).unwrap()[[r, c]] = orig - step;
                let minus = eval(&probe);
                probe.get_mut(name).unwrap()[[r, c]] = orig;
                numeric[[r, c]] = (plus - minus) / (2.0 * step);
            }
        }
        let a = analytic.get(idx).cloned().unwrap_or_else(|| Mat::zeros(shape));
        let diff = (&a - &numeric).iter().map(|x| x * x).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let rel = if denom < 1e-12 { 0.0 } else { diff / denom };
        per_param.push((name.to_string(), rel));
        norms.push(na);
    }
    let (worst_param, max_rel_error) = per_param
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
    GradCheckReport {
        max_rel_error,
        worst_param,
        per_param,
        norms,
    }
}

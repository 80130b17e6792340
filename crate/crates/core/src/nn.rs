//! Building blocks shared by the grounder and the VQA models.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Var};

/// Parameter names of a bidirectional tanh-RNN encoder under `prefix`.
pub fn init_bi_rnn<R: Rng>(store: &mut ParamStore, prefix: &str, vocab: usize, d: usize, rng: &mut R) {
    store.init_normal(&format!("{prefix}.emb"), vocab, d, 1.0, rng);
    for dir in ["fwd", "bwd"] {
        store.init_scaled(&format!("{prefix}.{dir}.wx"), d, d, rng);
        store.init_scaled(&format!("{prefix}.{dir}.wh"), d, d, rng);
        store.init_zeros(&format!("{prefix}.{dir}.b"), 1, d);
    }
    store.init_scaled(&format!("{prefix}.out"), 2 * d, d, rng);
    store.init_zeros(&format!("{prefix}.out_b"), 1, d);
    store.init_scaled(&format!("{prefix}.pool"), 2 * d, d, rng);
    store.init_zeros(&format!("{prefix}.pool_b"), 1, d);
}

/// Contextual `T×d` states and a pooled `1×d` summary built from the two
/// end states `[h→_T ; h←_1]`.
pub fn bi_rnn(g: &mut Graph, prefix: &str, ids: &[usize]) -> (Var, Var) {
    let t_len = ids.len();
    assert!(t_len > 0, "empty token sequence");
    let emb = g.param(&format!("{prefix}.emb"));
    let x = g.gather(emb, ids);
    let mut dir_states = Vec::with_capacity(2);
    for (dir, reverse) in [("fwd", false), ("bwd", true)] {
        let wx = g.param(&format!("{prefix}.{dir}.wx"));
        let wh = g.param(&format!("{prefix}.{dir}.wh"));
        let b = g.param(&format!("{prefix}.{dir}.b"));
        let xw = g.matmul(x, wx);
        let xw = g.add_row(xw, b);
        let mut states: Vec<Option<Var>> = vec![None; t_len];
        let mut prev: Option<Var> = None;
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for t in order {
            let mut pre = g.row(xw, t);
            if let Some(h) = prev {
                let hw = g.matmul(h, wh);
                pre = g.add(pre, hw);
            }
            let h = g.tanh(pre);
            states[t] = Some(h);
            prev = Some(h);
        }
        let states: Vec<Var> = states.into_iter().map(|s| s.expect("state")).collect();
        dir_states.push(states);
    }
    let fwd = g.concat_rows(&dir_states[0]);
    let bwd = g.concat_rows(&dir_states[1]);
    let both = g.concat_cols(&[fwd, bwd]);
    let out_w = g.param(&format!("{prefix}.out"));
    let out_b = g.param(&format!("{prefix}.out_b"));
    let ctx = g.matmul(both, out_w);
    let ctx = g.add_row(ctx, out_b);
    let ctx = g.tanh(ctx);

    let ends = g.concat_cols(&[dir_states[0][t_len - 1], dir_states[1][0]]);
    let pool_w = g.param(&format!("{prefix}.pool"));
    let pool_b = g.param(&format!("{prefix}.pool_b"));
    let pooled = g.matmul(ends, pool_w);
    let pooled = g.add_row(pooled, pool_b);
    let pooled = g.tanh(pooled);
    (ctx, pooled)
}

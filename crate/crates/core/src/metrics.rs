//! Evaluation metrics: MSVE, the element-wise parameter-convergence
//! statistics used for progress curves, and the three transformer-vs-batch-TD
//! comparison metrics (value difference, implicit weight similarity,
//! sensitivity similarity).

use serde::{Deserialize, Serialize};

use crate::attention::{forward, TransformerParams};
use crate::autodiff::query_grad;
use crate::constructions::construct_td;
use crate::error::{Error, Result};
use crate::mrp::{stationary_distribution, FiniteTask};
use crate::numerics::{cosine_similarity, weighted_least_squares, weighted_norm, Matrix};
use crate::oracles::batch_td0;
use crate::prompt::Prompt;

/// One logged row of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub task_index: usize,
    pub msve: f64,
    pub p_bottom_right: f64,
    pub p_avg_abs_others: f64,
    pub q_trace_left: f64,
    pub q_trace_right: f64,
    pub q_avg_abs_others: f64,
    pub vd: f64,
    pub iws: f64,
    pub ss: f64,
}

/// Stationary-weighted mean squared value error `sum_s d_p(s) (v(s)-v_pi(s))^2`.
pub fn msve(values: &[f64], v_true: &[f64], d_p: &[f64]) -> Result<f64> {
    if values.len() != v_true.len() {
        return Err(Error::Dimension("msve: value length mismatch".into()));
    }
    let diff: Vec<f64> = values.iter().zip(v_true).map(|(a, b)| a - b).collect();
    let norm = weighted_norm(&diff, d_p)?;
    Ok(norm * norm)
}

/// Visualization normalization: divide each matrix by its own max-abs entry,
/// then flip the signs of both iff P's bottom-right entry came out negative
/// (P and Q can absorb a common sign flip without changing the function).
pub fn normalize_for_viz(p: &Matrix, q: &Matrix) -> Result<(Matrix, Matrix)> {
    let (mp, mq) = (p.max_abs(), q.max_abs());
    if mp == 0.0 || mq == 0.0 {
        return Err(Error::Degenerate("normalize_for_viz: all-zero matrix".into()));
    }
    let mut pn = p.scale(1.0 / mp);
    let mut qn = q.scale(1.0 / mq);
    if pn[(p.rows() - 1, p.cols() - 1)] < 0.0 {
        pn = pn.scale(-1.0);
        qn = qn.scale(-1.0);
    }
    Ok((pn, qn))
}

/// The five parameter-pattern statistics, computed after `normalize_for_viz`:
/// P's bottom-right entry, the mean |entry| of the rest of P, the traces of
/// Q's upper-left and upper-middle d x d blocks, and the mean |entry| of Q
/// excluding both trace diagonals.
pub fn elementwise_stats(
    p0: &Matrix,
    q0: &Matrix,
    d: usize,
) -> Result<(f64, f64, f64, f64, f64)> {
    let sz = 2 * d + 1;
    if p0.rows() != sz || p0.cols() != sz || q0.rows() != sz || q0.cols() != sz {
        return Err(Error::Dimension("elementwise_stats: expected (2d+1) square".into()));
    }
    let (p, q) = normalize_for_viz(p0, q0)?;
    let p_bottom_right = p[(sz - 1, sz - 1)];
    let mut p_sum = 0.0;
    for i in 0..sz {
        for j in 0..sz {
            if i != sz - 1 || j != sz - 1 {
                p_sum += p[(i, j)].abs();
            }
        }
    }
    let p_avg_abs_others = p_sum / (sz * sz - 1) as f64;
    let mut q_trace_left = 0.0;
    let mut q_trace_right = 0.0;
    for i in 0..d {
        q_trace_left += q[(i, i)];
        q_trace_right += q[(i, d + i)];
    }
    let mut q_sum = 0.0;
    for i in 0..sz {
        for j in 0..sz {
            if i < d && (j == i || j == d + i) {
                continue;
            }
            q_sum += q[(i, j)].abs();
        }
    }
    let q_avg_abs_others = q_sum / (sz * sz - 2 * d) as f64;
    Ok((p_bottom_right, p_avg_abs_others, q_trace_left, q_trace_right, q_avg_abs_others))
}

/// The batch-TD reference model VD/IWS/SS compare against: the explicit TD
/// construction with `C_l = alpha I` at every layer, plus the preconditioner
/// list its oracle runs with.
#[derive(Debug, Clone)]
pub struct TdBaseline {
    pub params: TransformerParams,
    pub c_list: Vec<Matrix>,
}

pub fn td_baseline(alpha: f64, l: usize, d: usize, n: usize) -> Result<TdBaseline> {
    let c_list = vec![Matrix::identity(d).scale(alpha); l];
    Ok(TdBaseline { params: construct_td(&c_list, n)?, c_list })
}

/// Per-state predictions: substitute each state's feature as the query and
/// run the forward pass.
pub fn eval_values(
    prompt: &Prompt,
    params: &TransformerParams,
    task: &FiniteTask,
) -> Result<Vec<f64>> {
    (0..task.mrp.num_states())
        .map(|s| {
            let p = prompt.query_substitute(&task.features.feature(s))?;
            Ok(forward(&p, params)?.output)
        })
        .collect()
}

/// `||v_TF - v_TD||^2` under the stationary distribution.
pub fn value_difference(
    theta_tf: &TransformerParams,
    baseline: &TdBaseline,
    task: &FiniteTask,
    prompt: &Prompt,
) -> Result<f64> {
    let d_p = stationary_distribution(&task.mrp.p)?;
    let v_tf = eval_values(prompt, theta_tf, task)?;
    let v_td = eval_values(prompt, &baseline.params, task)?;
    let diff: Vec<f64> = v_tf.iter().zip(&v_td).map(|(a, b)| a - b).collect();
    let norm = weighted_norm(&diff, &d_p)?;
    Ok(norm * norm)
}

/// Cosine between the transformer's implicit weight (the weighted
/// least-squares linear fit of its per-state values) and the batch-TD weight
/// from the oracle on the same context.
pub fn implicit_weight_similarity(
    theta_tf: &TransformerParams,
    baseline: &TdBaseline,
    task: &FiniteTask,
    prompt: &Prompt,
) -> Result<f64> {
    let d_p = stationary_distribution(&task.mrp.p)?;
    let v_tf = eval_values(prompt, theta_tf, task)?;
    let w_tf = weighted_least_squares(&task.features.phi, &v_tf, &d_p)?;
    let ws = batch_td0(prompt.context(), &baseline.c_list, baseline.c_list.len())?;
    Ok(cosine_similarity(&w_tf, ws.last().unwrap()))
}

/// Stationary-weighted average cosine between the query gradients of the two
/// models across states.
pub fn sensitivity_similarity(
    theta_tf: &TransformerParams,
    baseline: &TdBaseline,
    task: &FiniteTask,
    prompt: &Prompt,
) -> Result<f64> {
    let d_p = stationary_distribution(&task.mrp.p)?;
    let mut acc = 0.0;
    for s in 0..task.mrp.num_states() {
        let p = prompt.query_substitute(&task.features.feature(s))?;
        let g_tf = query_grad(&p, theta_tf)?;
        let g_td = query_grad(&p, &baseline.params)?;
        acc += d_p[s] * cosine_similarity(&g_tf, &g_td);
    }
    Ok(acc)
}
